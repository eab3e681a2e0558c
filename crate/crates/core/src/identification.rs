//! Uniqueness geometry: the collapsed outcome simplex, rank audits of the
//! bordered density matrix, and boundary diagnostics.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{
    kl_divergence, mixture_marginal, CountVector, DensityKind, DensityMatrix, FrequencyVector,
    Prior,
};
use crate::solver::SolveResult;

/// Observed outcomes plus one auxiliary outcome holding the mass of every
/// unobserved outcome.
#[derive(Clone, Debug)]
pub struct CollapsedModel {
    pub observed: Vec<usize>,
    /// `(ibar + 1) x J`; row 0 is the auxiliary outcome.
    pub f0: DensityMatrix,
    pub ibar: usize,
    pub n_outcomes: usize,
}

impl CollapsedModel {
    /// Collapses a full outcome vector onto the reduced simplex.
    pub fn collapse_vector(&self, tau: &[f64]) -> Vec<f64> {
        let obs: f64 = self.observed.iter().map(|&i| tau[i]).sum();
        let total: f64 = tau.iter().sum();
        std::iter::once(total - obs)
            .chain(self.observed.iter().map(|&i| tau[i]))
            .collect()
    }

    pub fn regime(&self) -> Regime {
        if self.ibar == self.n_outcomes {
            Regime::FullSupportData
        } else {
            Regime::BoundaryData
        }
    }
}

pub fn collapse(f: &DensityMatrix, b: &CountVector) -> Result<CollapsedModel> {
    if f.kind() != DensityKind::Discrete {
        return Err(Error::InvalidValue("collapsing needs a discrete model".into()));
    }
    if b.len() != f.n_outcomes() {
        return Err(Error::Dimension("counts and density rows differ".into()));
    }
    let observed = b.observed();
    let cols: Vec<Vec<f64>> = (0..f.n_types())
        .map(|j| {
            let c = f.column(j);
            let obs: Vec<f64> = observed.iter().map(|&i| c[i]).collect();
            let rest = (1.0 - obs.iter().sum::<f64>()).max(0.0);
            std::iter::once(rest).chain(obs).collect()
        })
        .collect();
    let f0 = DensityMatrix::from_columns_nonnegative(f.kind(), cols)?;
    Ok(CollapsedModel { ibar: observed.len(), observed, f0, n_outcomes: f.n_outcomes() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FullSupportData,
    BoundaryData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMethod {
    Exhaustive,
    Randomized,
    SupportTargeted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentificationConfig {
    /// Largest subset count checked exhaustively.
    pub cap: u64,
    pub n_random: usize,
    /// Random completions of the solved support.
    pub n_targeted: usize,
    pub seed: u64,
    /// Singular values below `rel_tol * sigma_max` count as zero.
    pub rel_tol: f64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig { cap: 100_000, n_random: 2000, n_targeted: 500, seed: 0, rel_tol: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub regime: Regime,
    pub rank_ok: bool,
    pub checked_subsets: u64,
    pub method: CheckMethod,
    pub subset_size: usize,
    /// Smallest `sigma_min / sigma_max` over every checked matrix.
    pub min_singular_value_seen: f64,
    pub failing_subset: Option<Vec<usize>>,
    pub warnings: Vec<String>,
}

fn relative_sigma_min(m: &DMatrix<f64>) -> f64 {
    let k = m.nrows().min(m.ncols());
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax <= 0.0 {
        return 0.0;
    }
    // A wide matrix cannot have full column rank.
    if m.ncols() > m.nrows() {
        return 0.0;
    }
    sv.iter().take(k).copied().fold(f64::INFINITY, f64::min) / smax
}

/// `C(n, k)`, saturating at `u64::MAX`.
fn choose(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Columns `j` of the bordered matrix `(1; rows of F)`.
fn bordered(f: &DensityMatrix, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len() + 1, cols.len());
    for (c, &j) in cols.iter().enumerate() {
        m[(0, c)] = 1.0;
        let col = f.column(j);
        for (r, &i) in rows.iter().enumerate() {
            m[(r + 1, c)] = col[i];
        }
    }
    m
}

struct Audit {
    checked: u64,
    min_sv: f64,
    failing: Option<Vec<usize>>,
    method: CheckMethod,
}

/// Rank audit of `s`-column subsets of the bordered matrix.
fn audit_subsets(
    f: &DensityMatrix,
    rows: &[usize],
    s: usize,
    support: Option<&[usize]>,
    cfg: &IdentificationConfig,
) -> Audit {
    let j = f.n_types();
    let total = choose(j, s);
    let check = |cols: &Vec<usize>| relative_sigma_min(&bordered(f, rows, cols));

    let subsets: Vec<Vec<usize>> = if total <= cfg.cap {
        (0..j).combinations(s).collect()
    } else {
        let mut out = Vec::new();
        if let Some(sup) = support.filter(|s2| !s2.is_empty() && s2.len() <= s) {
            let rest: Vec<usize> = (0..j).filter(|k| !sup.contains(k)).collect();
            let need = s - sup.len();
            for t in 0..cfg.n_targeted {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(t as u64);
                let mut cols = sup.to_vec();
                cols.extend(sample_indices(&mut rng, rest.len(), need).into_iter().map(|k| rest[k]));
                cols.sort_unstable();
                out.push(cols);
                if need == 0 {
                    break;
                }
            }
        }
        for t in 0..cfg.n_random {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0000);
            rng.set_stream(t as u64);
            let mut cols = sample_indices(&mut rng, j, s).into_vec();
            cols.sort_unstable();
            out.push(cols);
        }
        out
    };
    let method = if total <= cfg.cap {
        CheckMethod::Exhaustive
    } else if support.is_some_and(|s2| !s2.is_empty() && s2.len() <= s) {
        CheckMethod::SupportTargeted
    } else {
        CheckMethod::Randomized
    };
    let svs: Vec<f64> = subsets.par_iter().map(check).collect();
    let min_sv = svs.iter().copied().fold(f64::INFINITY, f64::min);
    let failing = svs.iter().position(|&v| v <= cfg.rel_tol).map(|k| subsets[k].clone());
    Audit { checked: subsets.len() as u64, min_sv, failing, method }
}

fn report(regime: Regime, s: usize, audit: Audit, total: u64, extra: Vec<String>) -> IdentificationReport {
    let mut warnings = extra;
    if let Some(fs) = &audit.failing {
        warnings.push(format!(
            "rank deficiency in a {s}-column subset (first failing columns {:?}); the stable fixed point need not be unique",
            &fs[..fs.len().min(8)]
        ));
    }
    if audit.method != CheckMethod::Exhaustive {
        warnings.push(format!(
            "rank audit is partial: {} of {} subsets checked",
            audit.checked,
            if total == u64::MAX { "more than 2^64".to_string() } else { total.to_string() }
        ));
    }
    IdentificationReport {
        regime,
        rank_ok: audit.failing.is_none(),
        checked_subsets: audit.checked,
        method: audit.method,
        subset_size: s,
        min_singular_value_seen: audit.min_sv,
        failing_subset: audit.failing,
        warnings,
    }
}

/// Audits the rank condition for a discrete model. `support`, when given,
/// targets subsets containing the solved support.
pub fn check_assumption_discrete(
    f: &DensityMatrix,
    b: &CountVector,
    cfg: &IdentificationConfig,
    support: Option<&[usize]>,
) -> Result<IdentificationReport> {
    if b.len() != f.n_outcomes() {
        return Err(Error::Dimension("counts and density rows differ".into()));
    }
    let observed = b.observed();
    let j = f.n_types();
    if observed.len() == f.n_outcomes() {
        // Every outcome observed: F itself must have full column rank.
        let mut m = DMatrix::zeros(f.n_outcomes(), j);
        for c in 0..j {
            for (r, &v) in f.column(c).iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        let mut extra = Vec::new();
        let sv = if j > f.n_outcomes() {
            extra.push(format!("{j} types exceed {} outcomes; F cannot have full column rank", f.n_outcomes()));
            0.0
        } else {
            relative_sigma_min(&m)
        };
        let ok = sv > cfg.rel_tol;
        let audit = Audit {
            checked: 1,
            min_sv: sv,
            failing: (!ok).then(|| (0..j).collect()),
            method: CheckMethod::Exhaustive,
        };
        let mut r = report(Regime::FullSupportData, j, audit, 1, extra);
        r.rank_ok = ok;
        return Ok(r);
    }
    let s = j.min(observed.len() + 1);
    let audit = audit_subsets(f, &observed, s, support, cfg);
    Ok(report(Regime::BoundaryData, s, audit, choose(j, s), Vec::new()))
}

/// Audits the bordered determinant condition for density evaluations at
/// `N` observations (one row each).
pub fn check_assumption_continuous(
    f: &DensityMatrix,
    cfg: &IdentificationConfig,
    support: Option<&[usize]>,
) -> Result<IdentificationReport> {
    let n = f.n_outcomes();
    let j = f.n_types();
    let rows: Vec<usize> = (0..n).collect();
    if n + 1 > j {
        let sv = relative_sigma_min(&bordered(f, &rows, &(0..j).collect::<Vec<_>>()));
        let ok = sv > cfg.rel_tol;
        let audit = Audit {
            checked: 1,
            min_sv: sv,
            failing: (!ok).then(|| (0..j).collect()),
            method: CheckMethod::Exhaustive,
        };
        return Ok(report(
            Regime::FullSupportData,
            j,
            audit,
            1,
            vec![format!("{} observations leave fewer types than bordered rows; checked full column rank", n)],
        ));
    }
    let audit = audit_subsets(f, &rows, n + 1, support, cfg);
    Ok(report(Regime::FullSupportData, n + 1, audit, choose(j, n + 1), Vec::new()))
}

/// `|support| <= ibar`; `None` when every outcome was observed.
pub fn support_bound_check(result: &SolveResult, model: &CollapsedModel) -> Option<bool> {
    (model.regime() == Regime::BoundaryData).then(|| result.support.len() <= model.ibar)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDiagnostic {
    pub kl: f64,
    /// Data lie outside the image of the simplex under `F`.
    pub off_image: bool,
    pub zero_outcomes: usize,
}

pub fn boundary_diagnostic(
    beta: &FrequencyVector,
    f: &DensityMatrix,
    pi: &Prior,
) -> Result<BoundaryDiagnostic> {
    let tau = mixture_marginal(f, pi)?;
    let kl = kl_divergence(beta, &tau)?;
    Ok(BoundaryDiagnostic {
        kl,
        off_image: kl > 1e-9,
        zero_outcomes: beta.freqs().iter().filter(|&&x| x == 0.0).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_f_continuous, build_f_discrete, Grid1D, Kernel, ModelSpec};
    use crate::solver::{solve_fixed_point, SolveConfig};
    use proptest::prelude::*;

    fn ex3() -> (DensityMatrix, CountVector) {
        let g = Grid1D::uniform_open(999).unwrap();
        let f = build_f_discrete(&ModelSpec::BernoulliGk { shots: 10 }, &g).unwrap();
        (f, CountVector::new(vec![1, 0, 0, 0, 2, 3, 1, 0, 0, 0, 1]).unwrap())
    }

    fn gk() -> DensityMatrix {
        DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.95, 0.1], vec![0.05, 0.9]]).unwrap()
    }

    #[test]
    fn collapse_binomial_ten() {
        let (f, b) = ex3();
        let c = collapse(&f, &b).unwrap();
        assert_eq!(c.ibar, 5);
        assert_eq!((c.f0.n_outcomes(), c.f0.n_types()), (6, 999));
        assert_eq!(c.regime(), Regime::BoundaryData);
        for j in 0..999 {
            let s: f64 = c.f0.column(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(c.f0.get(0, j) < 1.0);
        }
    }

    #[test]
    fn collapse_full_support() {
        let c = collapse(&gk(), &CountVector::new(vec![1, 1]).unwrap()).unwrap();
        assert_eq!(c.ibar, 2);
        assert_eq!(c.regime(), Regime::FullSupportData);
        assert!(c.f0.row(0).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn discrete_rank_examples() {
        let cfg = IdentificationConfig::default();
        let b = CountVector::new(vec![1, 1]).unwrap();
        let r = check_assumption_discrete(&gk(), &b, &cfg, None).unwrap();
        assert!(r.rank_ok);
        assert_eq!(r.regime, Regime::FullSupportData);
        let dup = DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.95, 0.95], vec![0.05, 0.05]]).unwrap();
        let r = check_assumption_discrete(&dup, &b, &cfg, None).unwrap();
        assert!(!r.rank_ok);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn duplicate_column_flips_rank() {
        let g = Grid1D::uniform_open(6).unwrap();
        let f = build_f_discrete(&ModelSpec::BernoulliGk { shots: 4 }, &g).unwrap();
        let b = CountVector::new(vec![1, 2, 0, 0, 1]).unwrap();
        let cfg = IdentificationConfig::default();
        let r = check_assumption_discrete(&f, &b, &cfg, None).unwrap();
        assert!(r.rank_ok, "{r:?}");
        assert_eq!(r.method, CheckMethod::Exhaustive);
        assert_eq!(r.checked_subsets, 15);
        let mut cols: Vec<Vec<f64>> = (0..6).map(|j| f.column(j).to_vec()).collect();
        cols.push(cols[4].clone());
        let f2 = DensityMatrix::from_columns(DensityKind::Discrete, cols).unwrap();
        assert!(!check_assumption_discrete(&f2, &b, &cfg, None).unwrap().rank_ok);
    }

    #[test]
    fn exhaustive_and_randomized_agree() {
        let g = Grid1D::uniform_open(12).unwrap();
        let f = build_f_discrete(&ModelSpec::BernoulliGk { shots: 6 }, &g).unwrap();
        let b = CountVector::new(vec![2, 0, 1, 0, 0, 3, 0]).unwrap();
        let ex = check_assumption_discrete(&f, &b, &IdentificationConfig::default(), None).unwrap();
        let rnd_cfg = IdentificationConfig { cap: 0, n_random: 300, ..Default::default() };
        let rnd = check_assumption_discrete(&f, &b, &rnd_cfg, None).unwrap();
        assert_eq!(ex.method, CheckMethod::Exhaustive);
        assert_eq!(rnd.method, CheckMethod::Randomized);
        assert_eq!(ex.rank_ok, rnd.rank_ok);
        assert!(rnd.min_singular_value_seen >= ex.min_singular_value_seen);
    }

    #[test]
    fn continuous_examples() {
        let k = Kernel::Gaussian { sigma: 1.0 };
        let g = Grid1D::linspace(-2.0, 2.0, 7).unwrap();
        let f = build_f_continuous(&[-0.7, 0.1, 1.3], &k, &g).unwrap();
        let cfg = IdentificationConfig::default();
        assert!(check_assumption_continuous(&f, &cfg, None).unwrap().rank_ok);
        let mut cols: Vec<Vec<f64>> = (0..7).map(|j| f.column(j).to_vec()).collect();
        cols.push(cols[2].clone());
        let f2 = DensityMatrix::from_columns(DensityKind::Continuous, cols).unwrap();
        assert!(!check_assumption_continuous(&f2, &cfg, None).unwrap().rank_ok);
        let g2 = Grid1D::new(vec![-1.0, 0.5]).unwrap();
        let f3 = build_f_continuous(&[0.2], &k, &g2).unwrap();
        let r = check_assumption_continuous(&f3, &cfg, None).unwrap();
        assert!(r.rank_ok);
        assert_eq!(r.checked_subsets, 1);
    }

    #[test]
    fn support_bound_and_boundary_on_binomial_ten() {
        let (f, b) = ex3();
        let r = solve_fixed_point(&f, &b, &SolveConfig::default(), None).unwrap();
        let c = collapse(&f, &b).unwrap();
        assert_eq!(support_bound_check(&r, &c), Some(true));
        let beta = crate::mixture::normalize_counts(&b).unwrap();
        let d = boundary_diagnostic(&beta, &f, &r.pi_hat).unwrap();
        assert!(d.off_image && d.kl > 0.0);
        assert_eq!(d.zero_outcomes, 6);

        let ident = check_assumption_discrete(&f, &b, &IdentificationConfig::default(), Some(&r.support)).unwrap();
        assert_eq!(ident.method, CheckMethod::SupportTargeted);
    }

    #[test]
    fn full_support_skips_bound() {
        let b = CountVector::new(vec![1, 1]).unwrap();
        let r = solve_fixed_point(&gk(), &b, &SolveConfig::default(), None).unwrap();
        let c = collapse(&gk(), &b).unwrap();
        assert_eq!(support_bound_check(&r, &c), None);
    }

    #[test]
    fn in_image_data_has_zero_kl() {
        let f = gk();
        let pi = Prior::new(vec![0.3, 0.7]).unwrap();
        let beta = FrequencyVector::new(mixture_marginal(&f, &pi).unwrap()).unwrap();
        let d = boundary_diagnostic(&beta, &f, &pi).unwrap();
        assert!(d.kl.abs() < 1e-12 && !d.off_image);
    }

    proptest! {
        #[test]
        fn collapse_commutes(
            ws in prop::collection::vec(0.01f64..1.0, 6),
            counts in prop::collection::vec(0u64..3, 5),
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let g = Grid1D::uniform_open(6).unwrap();
            let f = build_f_discrete(&ModelSpec::BernoulliGk { shots: 4 }, &g).unwrap();
            let b = CountVector::new(counts).unwrap();
            let c = collapse(&f, &b).unwrap();
            let s: f64 = ws.iter().sum();
            let pi = Prior::new(ws.iter().map(|w| w / s).collect()).unwrap();
            let direct = c.collapse_vector(&mixture_marginal(&f, &pi).unwrap());
            let via = mixture_marginal(&c.f0, &pi).unwrap();
            for (x, y) in direct.iter().zip(&via) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
