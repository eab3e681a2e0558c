//! Callback-pattern pipeline: ingest paired callback counts, fit a bivariate
//! callback model, and report posterior discrimination probabilities per
//! pattern, plus a conditional test of independence.

use std::io::Read;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identification::{
    check_assumption_discrete, collapse, support_bound_check, IdentificationConfig,
    IdentificationReport,
};
use crate::mixture::{mixture_marginal, normalize_counts, CountVector, DensityMatrix, TypeLabel};
use crate::models::{
    bivariate_index, build_f_discrete, FrechetSamplerConfig, Grid1D, IntTable, ModelSpec,
    MoveKind, TableChain, Target,
};
use crate::solver::{solve_fixed_point, SolveConfig, SolveResult, StabilityCertificate};

/// Callback counts indexed by `(c_f, c_m)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallbackData {
    pub shots: u32,
    /// Row-major over `c_f`, length `(shots + 1)^2`.
    pub counts: Vec<u64>,
    pub n_jobs: u64,
}

impl CallbackData {
    pub fn new(shots: u32, counts: Vec<u64>) -> Result<Self> {
        let n = (shots as usize + 1).pow(2);
        if counts.len() != n {
            return Err(Error::Dimension(format!("{} counts for {n} callback patterns", counts.len())));
        }
        let n_jobs = counts.iter().sum();
        if n_jobs == 0 {
            return Err(Error::Degenerate("no jobs".into()));
        }
        Ok(CallbackData { shots, counts, n_jobs })
    }

    pub fn count(&self, c_f: u32, c_m: u32) -> u64 {
        self.counts[bivariate_index(self.shots, c_f, c_m)]
    }

    pub fn count_vector(&self) -> Result<CountVector> {
        CountVector::new(self.counts.clone())
    }

    /// The same data with the two groups exchanged.
    pub fn transposed(&self) -> Self {
        let l = self.shots;
        let counts = (0..=l)
            .flat_map(|a| (0..=l).map(move |b| (a, b)))
            .map(|(a, b)| self.count(b, a))
            .collect();
        CallbackData { shots: l, counts, n_jobs: self.n_jobs }
    }

    pub fn as_table(&self) -> Result<IntTable> {
        let k = self.shots as usize + 1;
        IntTable::new(k, k, self.counts.clone())
    }
}

#[derive(Deserialize)]
struct CsvRow {
    c_f: String,
    c_m: String,
    count: String,
}

fn parse_int<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: {what} {s:?} is not a nonnegative integer")))
}

/// Parses `c_f,c_m,count` rows; every pattern must appear exactly once.
pub fn read_callback_csv<R: Read>(reader: R) -> Result<CallbackData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["c_f", "c_m", "count"] {
        return Err(Error::Parse(format!("expected header c_f,c_m,count, found {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = k + 2;
        let r = rec?;
        if r.count.trim().starts_with('-') {
            return Err(Error::InvalidValue(format!("line {line}: negative count {}", r.count)));
        }
        rows.push((
            parse_int::<u32>(&r.c_f, line, "c_f")?,
            parse_int::<u32>(&r.c_m, line, "c_m")?,
            parse_int::<u64>(&r.count, line, "count")?,
        ));
    }
    let shots = rows.iter().map(|r| r.0.max(r.1)).max().ok_or_else(|| Error::Parse("no data rows".into()))?;
    let k = shots as usize + 1;
    let mut counts: Vec<Option<u64>> = vec![None; k * k];
    for &(a, b, c) in &rows {
        let slot = &mut counts[bivariate_index(shots, a, b)];
        if slot.is_some() {
            return Err(Error::Parse(format!("pattern ({a},{b}) appears more than once")));
        }
        *slot = Some(c);
    }
    let counts = counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Parse(format!("pattern ({},{}) is missing", i / k, i % k))))
        .collect::<Result<Vec<_>>>()?;
    CallbackData::new(shots, counts)
}

pub fn ingest_callback_csv(path: &Path) -> Result<CallbackData> {
    read_callback_csv(std::fs::File::open(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallbackModel {
    Independent,
    Frechet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 25-point grids and 25 tables per margin pair.
    Desk,
    /// 99-point grids and 99 tables per margin pair.
    Full,
}

impl Profile {
    pub fn grid(self) -> Result<Grid1D> {
        match self {
            Profile::Desk => Grid1D::linspace(0.01, 0.99, 25),
            Profile::Full => Grid1D::linspace(0.01, 0.99, 99),
        }
    }

    pub fn samples_per_pair(self) -> usize {
        match self {
            Profile::Desk => 25,
            Profile::Full => 99,
        }
    }

    pub fn sampler(self, seed: u64) -> FrechetSamplerConfig {
        FrechetSamplerConfig { samples_per_pair: self.samples_per_pair(), seed, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub c_f: u32,
    pub c_m: u32,
    pub count: u64,
    pub beta: f64,
    /// Fitted outcome probability `tau_i`.
    pub fitted: f64,
    pub mean_f: f64,
    pub mean_m: f64,
    pub pr_f_greater: f64,
    pub pr_equal: f64,
    pub pr_f_less: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub index: usize,
    pub weight: f64,
    pub label: TypeLabel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub model: CallbackModel,
    pub shots: u32,
    pub n_jobs: u64,
    pub n_types: usize,
    pub rows: Vec<PatternRow>,
    pub support: Vec<SupportPoint>,
    pub support_size: usize,
    pub ibar: usize,
    pub support_bound_ok: Option<bool>,
    pub log_likelihood: f64,
    pub kl: f64,
    pub max_fitted_gap: f64,
    pub converged: bool,
    pub iterations: usize,
    pub certificate: StabilityCertificate,
    pub identification: IdentificationReport,
    pub warnings: Vec<String>,
}

impl DiscriminationReport {
    pub fn row(&self, c_f: u32, c_m: u32) -> &PatternRow {
        &self.rows[bivariate_index(self.shots, c_f, c_m)]
    }

    /// Posterior probability that the job favors `f` over `m`, i.e.
    /// discriminates against `m`.
    pub fn discrimination_against_m(&self, c_f: u32, c_m: u32) -> f64 {
        self.row(c_f, c_m).pr_f_greater
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "callback", "count", "beta", "p", "p_f", "p_m", "pr_f_gt_m", "pr_f_eq_m", "pr_f_lt_m",
        ])?;
        for r in &self.rows {
            wr.write_record([
                format!("({},{})", r.c_f, r.c_m),
                r.count.to_string(),
                format!("{:.6}", r.beta),
                format!("{:.6}", r.fitted),
                format!("{:.6}", r.mean_f),
                format!("{:.6}", r.mean_m),
                format!("{:.6}", r.pr_f_greater),
                format!("{:.6}", r.pr_equal),
                format!("{:.6}", r.pr_f_less),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn build_callback_matrix(
    shots: u32,
    model: CallbackModel,
    grid: &Grid1D,
    sampler: &FrechetSamplerConfig,
) -> Result<DensityMatrix> {
    let spec = match model {
        CallbackModel::Independent => ModelSpec::IndependentBivariate { shots },
        CallbackModel::Frechet => ModelSpec::FrechetBivariate { shots, sampler: sampler.clone() },
    };
    build_f_discrete(&spec, grid)
}

/// Builds the model, solves, and assembles the per-pattern report.
pub fn estimate_discrimination(
    data: &CallbackData,
    model: CallbackModel,
    grid: &Grid1D,
    sampler: &FrechetSamplerConfig,
    solve: &SolveConfig,
    ident: &IdentificationConfig,
) -> Result<DiscriminationReport> {
    let f = build_callback_matrix(data.shots, model, grid, sampler)?;
    estimate_with_matrix(data, model, &f, solve, ident)
}

/// Same as [`estimate_discrimination`] for a prebuilt density matrix whose
/// type labels carry the group parameters.
pub fn estimate_with_matrix(
    data: &CallbackData,
    model: CallbackModel,
    f: &DensityMatrix,
    solve: &SolveConfig,
    ident: &IdentificationConfig,
) -> Result<DiscriminationReport> {
    let b = data.count_vector()?;
    let r = solve_fixed_point(f, &b, solve, None)?;
    report_from_solution(data, model, f, &r, ident)
}

pub fn report_from_solution(
    data: &CallbackData,
    model: CallbackModel,
    f: &DensityMatrix,
    r: &SolveResult,
    ident: &IdentificationConfig,
) -> Result<DiscriminationReport> {
    let b = data.count_vector()?;
    let beta = normalize_counts(&b)?;
    let labels = f.type_labels();
    if labels.len() != f.n_types() {
        return Err(Error::InvalidValue("density matrix needs type labels".into()));
    }
    let pairs: Vec<(f64, f64, usize, usize)> = r
        .support
        .iter()
        .map(|&j| labels[j].pair().ok_or_else(|| Error::InvalidValue(format!("type {j} is not bivariate"))))
        .collect::<Result<_>>()?;
    let tau = mixture_marginal(f, &r.pi_hat)?;
    let mut warnings = r.warnings.clone();
    let l = data.shots;
    let mut rows = Vec::with_capacity(f.n_outcomes());
    for c_f in 0..=l {
        for c_m in 0..=l {
            let i = bivariate_index(l, c_f, c_m);
            let mut acc = [0.0f64; 5];
            if tau[i] > 0.0 {
                for (&j, &(a, bb, ia, ib)) in r.support.iter().zip(&pairs) {
                    let h = f.get(i, j) * r.pi_hat.weights()[j] / tau[i];
                    acc[0] += h * a;
                    acc[1] += h * bb;
                    match ia.cmp(&ib) {
                        std::cmp::Ordering::Greater => acc[2] += h,
                        std::cmp::Ordering::Equal => acc[3] += h,
                        std::cmp::Ordering::Less => acc[4] += h,
                    }
                }
            } else {
                acc = [f64::NAN; 5];
                warnings.push(format!("fitted probability of pattern ({c_f},{c_m}) is zero; posterior undefined"));
            }
            rows.push(PatternRow {
                c_f,
                c_m,
                count: data.counts[i],
                beta: beta.freqs()[i],
                fitted: tau[i],
                mean_f: acc[0],
                mean_m: acc[1],
                pr_f_greater: acc[2],
                pr_equal: acc[3],
                pr_f_less: acc[4],
            });
        }
    }
    let identification = check_assumption_discrete(f, &b, ident, Some(&r.support))?;
    warnings.extend(identification.warnings.iter().cloned());
    if !r.converged {
        warnings.push("solver did not certify convergence; report is partial".into());
    }
    let collapsed = collapse(f, &b)?;
    let support_bound_ok = support_bound_check(r, &collapsed);
    let max_fitted_gap = rows.iter().map(|x| (x.fitted - x.beta).abs()).fold(0.0, f64::max);
    Ok(DiscriminationReport {
        model,
        shots: l,
        n_jobs: data.n_jobs,
        n_types: f.n_types(),
        support: r
            .support
            .iter()
            .map(|&j| SupportPoint { index: j, weight: r.pi_hat.weights()[j], label: labels[j].clone() })
            .collect(),
        support_size: r.support.len(),
        ibar: collapsed.ibar,
        support_bound_ok,
        log_likelihood: r.log_likelihood,
        kl: r.kl,
        max_fitted_gap,
        converged: r.converged,
        iterations: r.iterations,
        certificate: r.certificate.clone(),
        identification,
        warnings,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceTestConfig {
    pub n_sim: usize,
    pub seed: u64,
    pub burn_in: usize,
    /// Chain steps between recorded tables.
    pub thin: usize,
    pub move_kind: MoveKind,
}

impl IndependenceTestConfig {
    pub fn new(n_sim: usize, seed: u64) -> Self {
        IndependenceTestConfig { n_sim, seed, burn_in: 2000, thin: 50, move_kind: MoveKind::Line }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceTestReport {
    /// Log conditional probability of the observed table given its margins.
    pub statistic: f64,
    pub p_value: f64,
    /// Simulated tables at most as probable as the observed one.
    pub n_extreme: usize,
    pub config: IndependenceTestConfig,
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut v = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    v.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        v.push(acc);
    }
    v
}

/// Log multivariate-hypergeometric probability of a table given its margins.
fn log_conditional_probability(t: &IntTable, lf: &[f64]) -> f64 {
    let n = t.total() as usize;
    t.row_sums().iter().map(|&r| lf[r as usize]).sum::<f64>()
        + t.col_sums().iter().map(|&c| lf[c as usize]).sum::<f64>()
        - lf[n]
        - t.cells().iter().map(|&x| lf[x as usize]).sum::<f64>()
}

/// Monte Carlo conditional test of independence with margins fixed.
pub fn independence_test_table(t: &IntTable, cfg: &IndependenceTestConfig) -> Result<IndependenceTestReport> {
    if cfg.n_sim < 1000 {
        return Err(Error::InvalidValue("n_sim must be at least 1000".into()));
    }
    if cfg.thin == 0 {
        return Err(Error::InvalidValue("thin must be at least 1".into()));
    }
    let lf = ln_factorials(t.total());
    let obs = log_conditional_probability(t, &lf);
    let mut chain = TableChain::new(t.clone(), Target::Hypergeometric, cfg.move_kind, cfg.seed, 0);
    chain.advance(cfg.burn_in);
    let tol = 1e-9 * obs.abs().max(1.0);
    let mut n_extreme = 0;
    for _ in 0..cfg.n_sim {
        chain.advance(cfg.thin);
        if log_conditional_probability(chain.table(), &lf) <= obs + tol {
            n_extreme += 1;
        }
    }
    Ok(IndependenceTestReport {
        statistic: obs,
        p_value: (1 + n_extreme) as f64 / (cfg.n_sim + 1) as f64,
        n_extreme,
        config: cfg.clone(),
    })
}

pub fn independence_test(data: &CallbackData, n_sim: usize, seed: u64) -> Result<IndependenceTestReport> {
    independence_test_table(&data.as_table()?, &IndependenceTestConfig::new(n_sim, seed))
}

/// Draws a table of `n` units from the product of the given margins.
pub fn sample_null_table(row: &[u64], col: &[u64], n: u64, seed: u64) -> Result<IntTable> {
    let (r, c) = (row.len(), col.len());
    let w: Vec<f64> = row
        .iter()
        .flat_map(|&a| col.iter().map(move |&b| a as f64 * b as f64))
        .collect();
    let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidValue(format!("margins: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = vec![0u64; r * c];
    for _ in 0..n {
        cells[dist.sample(&mut rng)] += 1;
    }
    IntTable::new(r, c, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::round_marginal;

    pub(crate) const CALLBACKS: &str = include_str!("../data/callbacks.csv");

    #[test]
    fn ingest_fixture() {
        let d = read_callback_csv(CALLBACKS.as_bytes()).unwrap();
        assert_eq!(d.n_jobs, 799);
        assert_eq!(d.shots, 4);
        assert_eq!(d.count(0, 0), 573);
        assert_eq!(d.count(1, 4), 0);
        assert_eq!(d.count(4, 4), 16);
    }

    #[test]
    fn ingest_errors() {
        let missing: String = CALLBACKS.lines().filter(|l| *l != "1,4,0").collect::<Vec<_>>().join("\n");
        assert!(matches!(read_callback_csv(missing.as_bytes()), Err(Error::Parse(_))));
        let decimal = CALLBACKS.replace("0,0,573", "0,0,573.0");
        assert!(matches!(read_callback_csv(decimal.as_bytes()), Err(Error::Parse(_))));
        let neg = CALLBACKS.replace("0,1,26", "0,1,-26");
        assert!(read_callback_csv(neg.as_bytes()).is_err());
        let dup = format!("{CALLBACKS}0,0,1\n");
        assert!(matches!(read_callback_csv(dup.as_bytes()), Err(Error::Parse(_))));
        let header = CALLBACKS.replace("c_f,c_m,count", "f,m,n");
        assert!(matches!(read_callback_csv(header.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn transposition_swaps_patterns() {
        let d = read_callback_csv(CALLBACKS.as_bytes()).unwrap();
        let t = d.transposed();
        assert_eq!(t.count(4, 1), d.count(1, 4));
        assert_eq!(t.transposed(), d);
    }

    #[test]
    fn unique_fiber_gives_p_one() {
        let t = IntTable::new(2, 2, vec![3, 0, 0, 0]).unwrap();
        let r = independence_test_table(&t, &IndependenceTestConfig::new(1000, 1)).unwrap();
        assert_eq!(r.p_value, 1.0);
        let t = IntTable::new(2, 2, vec![2, 0, 0, 3]).unwrap();
        let r = independence_test_table(&t, &IndependenceTestConfig::new(1000, 1)).unwrap();
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn rounded_independence_table_is_not_rejected() {
        let d = read_callback_csv(CALLBACKS.as_bytes()).unwrap();
        let t = d.as_table().unwrap();
        let rows: Vec<f64> = t.row_sums().iter().map(|&x| x as f64).collect();
        let cols: Vec<f64> = t.col_sums().iter().map(|&x| x as f64).collect();
        let r = round_marginal(&rows, 799).unwrap();
        let c = round_marginal(&cols, 799).unwrap();
        let ind = IntTable::independence(&r, &c).unwrap();
        let rep = independence_test_table(&ind, &IndependenceTestConfig::new(2000, 9)).unwrap();
        assert!(rep.p_value > 0.01, "{rep:?}");
    }

    #[test]
    fn null_tables_have_requested_size() {
        let t = sample_null_table(&[1, 2], &[3, 4], 50, 0).unwrap();
        assert_eq!(t.total(), 50);
        assert_eq!(t, sample_null_table(&[1, 2], &[3, 4], 50, 0).unwrap());
    }

    #[test]
    fn independent_model_report_shape() {
        let d = read_callback_csv(CALLBACKS.as_bytes()).unwrap();
        let grid = Grid1D::linspace(0.05, 0.95, 7).unwrap();
        let rep = estimate_discrimination(
            &d,
            CallbackModel::Independent,
            &grid,
            &FrechetSamplerConfig::default(),
            &SolveConfig::default(),
            &IdentificationConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 25);
        let fitted: f64 = rep.rows.iter().map(|r| r.fitted).sum();
        assert!((fitted - 1.0).abs() < 1e-9);
        for r in &rep.rows {
            assert!((r.pr_f_greater + r.pr_equal + r.pr_f_less - 1.0).abs() < 1e-9);
        }
        assert!(!rep.warnings.is_empty());
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("callback,count,beta,p,p_f,p_m,pr_f_gt_m,pr_f_eq_m,pr_f_lt_m"));
        assert_eq!(text.lines().count(), 26);
    }
}
