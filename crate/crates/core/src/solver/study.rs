//! Grid-refinement and sample-size studies.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_fixed_point, SolveConfig, SolveResult};
use crate::error::{Error, Result};
use crate::mixture::{CountVector, DensityMatrix};
use crate::models::{build_f_continuous, Grid1D, Kernel};

/// 1-Wasserstein distance between two discrete measures on the line.
pub fn wasserstein_1d(x: &[f64], wx: &[f64], y: &[f64], wy: &[f64]) -> Result<f64> {
    if x.len() != wx.len() || y.len() != wy.len() {
        return Err(Error::Dimension("atoms and weights differ in length".into()));
    }
    let sx: f64 = wx.iter().sum();
    let sy: f64 = wy.iter().sum();
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::Degenerate("measure with no mass".into()));
    }
    // Signed increments of F_x - F_y at every atom.
    let mut ev: Vec<(f64, f64)> = x
        .iter()
        .zip(wx)
        .map(|(&a, &w)| (a, w / sx))
        .chain(y.iter().zip(wy).map(|(&a, &w)| (a, -w / sy)))
        .collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf = 0.0;
    let mut dist = 0.0;
    for k in 0..ev.len() {
        cdf += ev[k].1;
        if k + 1 < ev.len() {
            dist += cdf.abs() * (ev[k + 1].0 - ev[k].0);
        }
    }
    Ok(dist)
}

fn support_points(f: &DensityMatrix, r: &SolveResult) -> Result<Vec<(f64, f64)>> {
    r.support
        .iter()
        .map(|&j| {
            let x = f
                .type_labels()
                .get(j)
                .and_then(|l| l.coordinate())
                .ok_or_else(|| Error::InvalidValue("studies need scalar type labels".into()))?;
            Ok((x, r.pi_hat.weights()[j]))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NestedGridLevel {
    pub n_types: usize,
    pub log_likelihood: f64,
    pub kl: f64,
    pub support: Vec<(f64, f64)>,
    pub support_size: usize,
    pub ibar: usize,
    /// `None` when every outcome was observed and the bound does not apply.
    pub support_bound_ok: Option<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub wasserstein_to_previous: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NestedGridReport {
    pub levels: Vec<NestedGridLevel>,
    pub likelihood_nondecreasing: bool,
    pub support_bounded: bool,
    pub notes: Vec<String>,
}

/// Solves on each grid of a nested sequence with the same data.
pub fn nested_grid_study<B>(
    grids: &[Grid1D],
    build: B,
    b: &CountVector,
    cfg: &SolveConfig,
) -> Result<NestedGridReport>
where
    B: Fn(&Grid1D) -> Result<DensityMatrix>,
{
    if grids.is_empty() {
        return Err(Error::Degenerate("no grids".into()));
    }
    for (k, w) in grids.windows(2).enumerate() {
        if !w[0].is_subset_of(&w[1], 1e-12) {
            return Err(Error::NotNested(format!("grid {k} is not contained in grid {}", k + 1)));
        }
    }
    let ibar = b.observed().len();
    let boundary = ibar < b.len();
    let mut levels: Vec<NestedGridLevel> = Vec::with_capacity(grids.len());
    for g in grids {
        let f = build(g)?;
        let r = solve_fixed_point(&f, b, cfg, None)?;
        let support = support_points(&f, &r)?;
        let wasserstein_to_previous = match levels.last() {
            Some(prev) => {
                let (x, wx): (Vec<f64>, Vec<f64>) = prev.support.iter().copied().unzip();
                let (y, wy): (Vec<f64>, Vec<f64>) = support.iter().copied().unzip();
                Some(wasserstein_1d(&x, &wx, &y, &wy)?)
            }
            None => None,
        };
        levels.push(NestedGridLevel {
            n_types: f.n_types(),
            log_likelihood: r.log_likelihood,
            kl: r.kl,
            support_size: support.len(),
            support,
            ibar,
            support_bound_ok: boundary.then_some(r.support.len() <= ibar),
            converged: r.converged,
            iterations: r.iterations,
            wasserstein_to_previous,
        });
    }
    let likelihood_nondecreasing = levels
        .windows(2)
        .all(|w| w[1].log_likelihood >= w[0].log_likelihood - 1e-9);
    let support_bounded = levels.iter().all(|l| l.support_bound_ok != Some(false));
    Ok(NestedGridReport {
        levels,
        likelihood_nondecreasing,
        support_bounded,
        notes: vec![
            "affine independence of boundary points of the convex hull of F(T) is assumed, not checked"
                .into(),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub atoms: Vec<f64>,
    pub atom_weights: Vec<f64>,
    pub sigma: f64,
    pub sample_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    pub eval_points: usize,
    pub solve: SolveConfig,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            atoms: vec![-1.5, 1.5],
            atom_weights: vec![0.5, 0.5],
            sigma: 1.0,
            sample_sizes: vec![100, 1000, 10_000],
            seeds: vec![0, 1, 2, 3, 4],
            grid_lo: -4.0,
            grid_hi: 4.0,
            grid_points: 161,
            eval_points: 801,
            solve: SolveConfig { record_trace: false, ..SolveConfig::default() },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub sample_size: usize,
    pub seed: u64,
    /// Quadrature of `a ln(a / f_hat)` over the evaluation grid.
    pub kl_proxy: f64,
    pub support_size: usize,
    /// Largest distance from a fitted atom (weight at least 1e-3) to the
    /// nearest true atom.
    pub max_atom_distance: f64,
    pub support: Vec<(f64, f64)>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    /// `(sample size, mean KL proxy over seeds)`.
    pub mean_kl: Vec<(usize, f64)>,
    /// Least-squares slope of the mean KL proxy against `ln k`.
    pub slope: f64,
    pub trend_ok: bool,
}

/// Simulates from a Gaussian location mixture at increasing sample sizes and
/// measures how far the fitted density is from the truth.
pub fn consistency_study(cfg: &ConsistencyConfig) -> Result<ConsistencyReport> {
    if cfg.atoms.is_empty() || cfg.atoms.len() != cfg.atom_weights.len() {
        return Err(Error::Dimension("atoms and atom_weights".into()));
    }
    if cfg.sample_sizes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Degenerate("no sample sizes or seeds".into()));
    }
    if cfg.eval_points < 2 {
        return Err(Error::InvalidValue("eval_points must be at least 2".into()));
    }
    let kernel = Kernel::Gaussian { sigma: cfg.sigma };
    let grid = Grid1D::linspace(cfg.grid_lo, cfg.grid_hi, cfg.grid_points)?;
    let pick = WeightedIndex::new(&cfg.atom_weights)
        .map_err(|e| Error::InvalidValue(format!("atom weights: {e}")))?;
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let wsum: f64 = cfg.atom_weights.iter().sum();

    let lo = cfg.atoms.iter().copied().fold(f64::INFINITY, f64::min) - 6.0 * cfg.sigma;
    let hi = cfg.atoms.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 6.0 * cfg.sigma;
    let h = (hi - lo) / (cfg.eval_points - 1) as f64;
    let xs: Vec<f64> = (0..cfg.eval_points).map(|k| lo + h * k as f64).collect();
    let truth: Vec<f64> = xs
        .iter()
        .map(|&x| {
            cfg.atoms
                .iter()
                .zip(&cfg.atom_weights)
                .map(|(&t, &w)| w / wsum * kernel.density(x, t))
                .sum()
        })
        .collect();

    let cells: Vec<(usize, usize, u64)> = cfg
        .sample_sizes
        .iter()
        .enumerate()
        .flat_map(|(ci, &k)| cfg.seeds.iter().map(move |&s| (ci, k, s)))
        .collect();
    let rows: Vec<ConsistencyRow> = cells
        .par_iter()
        .map(|&(ci, k, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64);
            let obs: Vec<f64> = (0..k)
                .map(|_| cfg.atoms[pick.sample(&mut rng)] + noise.sample(&mut rng))
                .collect();
            let f = build_f_continuous(&obs, &kernel, &grid)?;
            let b = CountVector::ones(k)?;
            let r = solve_fixed_point(&f, &b, &cfg.solve, None)?;
            let support = support_points(&f, &r)?;
            let fitted: Vec<f64> = xs
                .iter()
                .map(|&x| support.iter().map(|&(t, w)| w * kernel.density(x, t)).sum())
                .collect();
            let integrand: Vec<f64> = truth
                .iter()
                .zip(&fitted)
                .map(|(&a, &fh)| if a > 0.0 { a * (a / fh).ln() } else { 0.0 })
                .collect();
            let kl_proxy = h
                * (integrand.iter().sum::<f64>()
                    - 0.5 * (integrand[0] + integrand[integrand.len() - 1]));
            let max_atom_distance = support
                .iter()
                .filter(|&&(_, w)| w >= 1e-3)
                .map(|&(t, _)| cfg.atoms.iter().map(|&a| (a - t).abs()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max);
            Ok(ConsistencyRow {
                sample_size: k,
                seed,
                kl_proxy,
                support_size: support.len(),
                max_atom_distance,
                support,
                converged: r.converged,
                iterations: r.iterations,
            })
        })
        .collect::<Result<_>>()?;

    let mean_kl: Vec<(usize, f64)> = cfg
        .sample_sizes
        .iter()
        .map(|&k| {
            let v: Vec<f64> = rows.iter().filter(|r| r.sample_size == k).map(|r| r.kl_proxy).collect();
            (k, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let slope = if mean_kl.len() < 2 {
        0.0
    } else {
        let lx: Vec<f64> = mean_kl.iter().map(|&(k, _)| (k as f64).ln()).collect();
        let mx = lx.iter().sum::<f64>() / lx.len() as f64;
        let my = mean_kl.iter().map(|p| p.1).sum::<f64>() / mean_kl.len() as f64;
        let sxy: f64 = lx.iter().zip(&mean_kl).map(|(x, p)| (x - mx) * (p.1 - my)).sum();
        let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
        if sxx > 0.0 { sxy / sxx } else { 0.0 }
    };
    Ok(ConsistencyReport { rows, mean_kl, slope, trend_ok: slope <= 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_f_discrete, ModelSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn wasserstein_examples() {
        assert_abs_diff_eq!(wasserstein_1d(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            wasserstein_1d(&[0.0, 1.0], &[0.5, 0.5], &[0.0, 1.0], &[0.5, 0.5]).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            wasserstein_1d(&[0.0, 1.0], &[0.5, 0.5], &[0.5], &[1.0]).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    fn gk_counts() -> CountVector {
        CountVector::new(vec![1, 0, 0, 0, 2, 3, 1, 0, 0, 0, 1]).unwrap()
    }

    fn build(g: &Grid1D) -> Result<DensityMatrix> {
        build_f_discrete(&ModelSpec::BernoulliGk { shots: 10 }, g)
    }

    #[test]
    fn single_and_repeated_grids() {
        let g = Grid1D::uniform_open(9).unwrap();
        let cfg = SolveConfig::default();
        let one = nested_grid_study(std::slice::from_ref(&g), build, &gk_counts(), &cfg).unwrap();
        assert_eq!(one.levels.len(), 1);
        assert!(one.levels[0].wasserstein_to_previous.is_none());
        let two = nested_grid_study(&[g.clone(), g], build, &gk_counts(), &cfg).unwrap();
        assert!(two.levels[1].wasserstein_to_previous.unwrap() < 1e-9);
    }

    #[test]
    fn rejects_non_nested() {
        let grids = [Grid1D::uniform_open(10).unwrap(), Grid1D::uniform_open(99).unwrap()];
        let e = nested_grid_study(&grids, build, &gk_counts(), &SolveConfig::default());
        assert!(matches!(e, Err(Error::NotNested(_))));
    }

    #[test]
    fn single_atom_concentrates() {
        let cfg = ConsistencyConfig {
            atoms: vec![0.5],
            atom_weights: vec![1.0],
            sample_sizes: vec![2000],
            seeds: vec![3],
            grid_points: 41,
            ..Default::default()
        };
        let r = consistency_study(&cfg).unwrap();
        let mass_near: f64 = r.rows[0]
            .support
            .iter()
            .filter(|(t, _)| (t - 0.5).abs() <= 0.5)
            .map(|p| p.1)
            .sum();
        assert!(mass_near > 0.9, "{:?}", r.rows[0].support);
    }
}
