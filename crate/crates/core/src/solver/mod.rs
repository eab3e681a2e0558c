//! Stable fixed points of the posterior belief operator.
//!
//! The iteration is the self-consistency map `pi <- h(pi)` (EM for mixture
//! weights) with periodic pruning of dying types. Near the boundary of the
//! simplex EM slows to a crawl, so every pruning checkpoint hands the iterate
//! to an active-set refinement: Newton steps on the current face of the
//! simplex, vertex-direction moves that revive types with positive
//! discrepancy, and a support reduction along directions that leave the
//! fitted marginal unchanged. Every step is an ascent step for the
//! log-likelihood. A solution is accepted only when the coherence/stability
//! certificate passes.

mod study;

pub use study::{
    consistency_study, nested_grid_study, wasserstein_1d, ConsistencyConfig, ConsistencyReport,
    ConsistencyRow, NestedGridLevel, NestedGridReport,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{
    col_dots, discrepancy_from_marginal, kl_divergence, log_likelihood_from_marginal, mat_vec,
    mixture_marginal, normalize_counts, CountVector, DensityMatrix, FrequencyVector, Prior,
};

/// Faces with more active types are left to EM.
const MAX_NEWTON_FACE: usize = 400;
/// Above this many active types refinement first solves the problem
/// restricted to the heaviest types.
const LARGE_FACE: usize = 2000;
/// Violating types added per vertex step.
const VERTEX_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Uniform,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    /// Sup-norm bound on `h(pi) - pi`.
    pub tol_fixed_point: f64,
    pub max_iterations: usize,
    /// Weights below this level are dropped at pruning checkpoints.
    pub prune_threshold: f64,
    /// EM iterations between pruning checkpoints.
    pub prune_interval: usize,
    pub seed_init: InitKind,
    pub tol_coherence: f64,
    pub tol_stability: f64,
    /// Run the active-set refinement at checkpoints.
    pub refine: bool,
    pub record_trace: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol_fixed_point: 1e-10,
            max_iterations: 200_000,
            prune_threshold: 1e-6,
            prune_interval: 500,
            seed_init: InitKind::Uniform,
            tol_coherence: 1e-8,
            tol_stability: 1e-8,
            refine: true,
            record_trace: true,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_fixed_point > 0.0) {
            return Err(Error::InvalidValue("tol_fixed_point must be positive".into()));
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold <= 1e-3) {
            return Err(Error::InvalidValue("prune_threshold must lie in (0, 1e-3]".into()));
        }
        if self.prune_interval == 0 {
            return Err(Error::InvalidValue("prune_interval must be at least 1".into()));
        }
        if !(self.tol_coherence > 0.0 && self.tol_stability >= 0.0) {
            return Err(Error::InvalidValue("certificate tolerances".into()));
        }
        Ok(())
    }
}

/// Residuals of the coherence (on support) and stability (off support)
/// conditions, i.e. the KKT conditions of likelihood maximization on the
/// simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// `max_{j in support} |d_j|`.
    pub coherence_residual: f64,
    /// `max_{j not in support} d_j`, signed; `None` when every type carries mass.
    pub stability_residual: Option<f64>,
    pub tol_coherence: f64,
    pub tol_stability: f64,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub residual: f64,
    pub support_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveResult {
    #[serde(with = "sparse_prior")]
    pub pi_hat: Prior,
    pub iterations: usize,
    /// Normalized log-likelihood `L / sum(b)`.
    pub log_likelihood: f64,
    /// Unnormalized `sum_i b_i ln tau_i`.
    pub log_likelihood_total: f64,
    pub kl: f64,
    pub support: Vec<usize>,
    pub certificate: StabilityCertificate,
    /// `max_j |h_j(pi) - pi_j|` at the returned iterate.
    pub fixed_point_residual: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

impl SolveResult {
    /// Writes the iteration trace as CSV.
    pub fn write_trace<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "log_likelihood", "residual", "support_size"])?;
        for t in &self.trace {
            wr.write_record([
                t.iteration.to_string(),
                format!("{:.17e}", t.log_likelihood),
                format!("{:.6e}", t.residual),
                t.support_size.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Serializes a prior as its support, which keeps results for million-type
/// grids small.
mod sparse_prior {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::mixture::Prior;

    #[derive(Serialize, Deserialize)]
    struct Sparse {
        n_types: usize,
        index: Vec<usize>,
        weight: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(p: &Prior, s: S) -> Result<S::Ok, S::Error> {
        let index = p.support();
        let weight = index.iter().map(|&j| p.weights()[j]).collect();
        Sparse { n_types: p.len(), index, weight }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Prior, D::Error> {
        let sp = Sparse::deserialize(d)?;
        let mut w = vec![0.0; sp.n_types];
        for (j, x) in sp.index.into_iter().zip(sp.weight) {
            if j >= w.len() {
                return Err(serde::de::Error::custom("support index out of range"));
            }
            w[j] = x;
        }
        Prior::new(w).map_err(serde::de::Error::custom)
    }
}

/// `max_j pi_j |d_j|`, which equals `max_j |h_j(pi) - pi_j|`.
pub fn fixed_point_residual(pi: &Prior, d: &[f64]) -> f64 {
    pi.weights()
        .iter()
        .zip(d)
        .map(|(&p, &dj)| if p > 0.0 { (p * dj).abs() } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Evaluates the coherence/stability certificate for any candidate prior.
pub fn verify_stability(
    f: &DensityMatrix,
    beta: &FrequencyVector,
    pi: &Prior,
    tol_coherence: f64,
    tol_stability: f64,
) -> Result<StabilityCertificate> {
    let tau = mixture_marginal(f, pi)?;
    let d = discrepancy_from_marginal(f, beta, &tau)?;
    Ok(certificate_from(pi.weights(), &d, tol_coherence, tol_stability))
}

fn certificate_from(w: &[f64], d: &[f64], tol_c: f64, tol_s: f64) -> StabilityCertificate {
    let mut coh: f64 = 0.0;
    let mut stab: Option<f64> = None;
    for (&p, &dj) in w.iter().zip(d) {
        if p > 0.0 {
            coh = coh.max(dj.abs());
        } else {
            stab = Some(stab.map_or(dj, |s| s.max(dj)));
        }
    }
    let pass = coh <= tol_c && stab.is_none_or(|s| s <= tol_s);
    StabilityCertificate {
        coherence_residual: coh,
        stability_residual: stab,
        tol_coherence: tol_c,
        tol_stability: tol_s,
        pass,
    }
}

/// Zeroes weights below `threshold` and renormalizes.
pub fn prune_support(pi: &Prior, threshold: f64) -> Result<Prior> {
    if !(threshold > 0.0 && threshold <= 1e-3) {
        return Err(Error::InvalidValue("prune threshold must lie in (0, 1e-3]".into()));
    }
    let mut w: Vec<f64> = pi
        .weights()
        .iter()
        .map(|&x| if x < threshold { 0.0 } else { x })
        .collect();
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        return Err(Error::Degenerate(format!(
            "every weight lies below the pruning threshold {threshold}"
        )));
    }
    if w.iter().zip(pi.weights()).all(|(a, b)| a == b) {
        return Ok(pi.clone());
    }
    w.iter_mut().for_each(|x| *x /= s);
    Ok(Prior::from_iterate(w))
}

/// Iterates the posterior operator to its stable fixed point.
///
/// Returns a result with `converged = false` (and the best iterate) when the
/// iteration budget runs out before the certificate passes.
pub fn solve_fixed_point(
    f: &DensityMatrix,
    b: &CountVector,
    cfg: &SolveConfig,
    pi0: Option<&Prior>,
) -> Result<SolveResult> {
    cfg.validate()?;
    if b.len() != f.n_outcomes() {
        return Err(Error::Dimension(format!(
            "{} counts for {} outcomes",
            b.len(),
            f.n_outcomes()
        )));
    }
    let beta = normalize_counts(b)?;
    let start = match (cfg.seed_init, pi0) {
        (_, Some(p)) => {
            if p.len() != f.n_types() {
                return Err(Error::Dimension("initial prior length".into()));
            }
            p.weights().to_vec()
        }
        (InitKind::Uniform, None) => Prior::uniform(f.n_types())?.into_weights(),
        (InitKind::Custom, None) => {
            return Err(Error::InvalidValue("custom initialization needs a prior".into()))
        }
    };

    let mut s = Solver::new(f, &beta, cfg, start);
    s.run()?;
    s.finish(b)
}

/// Observed-row view of the problem plus the iterate.
struct Solver<'a> {
    f: &'a DensityMatrix,
    beta: &'a FrequencyVector,
    cfg: &'a SolveConfig,
    obs: Vec<usize>,
    beta_obs: Vec<f64>,
    /// Full-length weights; zero off the active set.
    w: Vec<f64>,
    active: Vec<usize>,
    /// Observed rows x active columns, column-major.
    block: Vec<f64>,
    iterations: usize,
    trace: Vec<TraceRecord>,
    converged: bool,
}

impl<'a> Solver<'a> {
    fn new(f: &'a DensityMatrix, beta: &'a FrequencyVector, cfg: &'a SolveConfig, w: Vec<f64>) -> Self {
        let obs: Vec<usize> = (0..beta.len()).filter(|&i| beta.freqs()[i] > 0.0).collect();
        let beta_obs = obs.iter().map(|&i| beta.freqs()[i]).collect();
        let mut s = Solver {
            f,
            beta,
            cfg,
            obs,
            beta_obs,
            w,
            active: Vec::new(),
            block: Vec::new(),
            iterations: 0,
            trace: Vec::new(),
            converged: false,
        };
        s.rebuild_block();
        s
    }

    fn n_obs(&self) -> usize {
        self.obs.len()
    }

    fn rebuild_block(&mut self) {
        self.active = (0..self.w.len()).filter(|&j| self.w[j] > 0.0).collect();
        self.block = gather(self.f, &self.obs, &self.active);
    }

    fn record(&mut self, l: f64, residual: f64, support_size: usize) {
        if self.cfg.record_trace {
            self.trace.push(TraceRecord {
                iteration: self.iterations,
                log_likelihood: l,
                residual,
                support_size,
            });
        }
    }

    fn tau_obs(&self, block: &[f64], w: &[f64]) -> Vec<f64> {
        mat_vec(block, self.n_obs(), w)
    }

    fn loglik(&self, tau: &[f64]) -> f64 {
        self.beta_obs
            .iter()
            .zip(tau)
            .map(|(&b, &t)| if t > 0.0 { b * t.ln() } else { f64::NEG_INFINITY })
            .sum()
    }

    fn ratios(&self, tau: &[f64]) -> Result<Vec<f64>> {
        self.beta_obs
            .iter()
            .zip(tau)
            .enumerate()
            .map(|(k, (&b, &t))| if t > 0.0 { Ok(b / t) } else { Err(Error::ZeroMarginal(self.obs[k])) })
            .collect()
    }

    /// Discrepancy over every type (full gradient minus one).
    fn full_discrepancy(&self) -> Result<Vec<f64>> {
        let wa: Vec<f64> = self.active.iter().map(|&j| self.w[j]).collect();
        let tau = self.tau_obs(&self.block, &wa);
        let r_obs = self.ratios(&tau)?;
        let mut r = vec![0.0; self.f.n_outcomes()];
        for (&i, &x) in self.obs.iter().zip(&r_obs) {
            r[i] = x;
        }
        let bsum: f64 = self.beta_obs.iter().sum();
        Ok(col_dots(self.f.as_column_major(), self.f.n_outcomes(), &r)
            .into_iter()
            .map(|g| g - bsum)
            .collect())
    }

    fn certified(&self) -> Result<bool> {
        let d = self.full_discrepancy()?;
        let cert = certificate_from(&self.w, &d, self.cfg.tol_coherence, self.cfg.tol_stability);
        let resid = fixed_point_residual(&Prior::from_iterate(self.w.clone()), &d);
        Ok(cert.pass && resid <= self.cfg.tol_fixed_point)
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let mut since_prune = 0;
        while self.iterations < cfg.max_iterations {
            let wa: Vec<f64> = self.active.iter().map(|&j| self.w[j]).collect();
            let tau = self.tau_obs(&self.block, &wa);
            let l = self.loglik(&tau);
            let r = self.ratios(&tau)?;
            let g = col_dots(&self.block, self.n_obs(), &r);
            let resid = wa
                .iter()
                .zip(&g)
                .map(|(&p, &gj)| (p * (gj - 1.0)).abs())
                .fold(0.0, f64::max);
            self.record(l, resid, self.active.len());
            if resid <= cfg.tol_fixed_point && self.certified()? {
                self.converged = true;
                return Ok(());
            }
            for (k, &j) in self.active.iter().enumerate() {
                self.w[j] = wa[k] * g[k];
            }
            self.iterations += 1;
            since_prune += 1;

            if since_prune >= cfg.prune_interval {
                since_prune = 0;
                self.guarded_prune(l)?;
                if cfg.refine {
                    self.refine()?;
                    if self.certified()? {
                        self.converged = true;
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops weights below the threshold unless doing so lowers the
    /// likelihood; falls back to dropping only types with negative
    /// discrepancy.
    fn guarded_prune(&mut self, _l_prev: f64) -> Result<()> {
        let thr = self.cfg.prune_threshold;
        let wa: Vec<f64> = self.active.iter().map(|&j| self.w[j]).collect();
        let tau = self.tau_obs(&self.block, &wa);
        let l_now = self.loglik(&tau);
        let r = self.ratios(&tau)?;
        let g = col_dots(&self.block, self.n_obs(), &r);

        let try_drop = |keep: &dyn Fn(usize) -> bool| -> Option<Vec<f64>> {
            let mut w2: Vec<f64> = wa.iter().enumerate().map(|(k, &x)| if keep(k) { x } else { 0.0 }).collect();
            let s: f64 = w2.iter().sum();
            if s <= 0.0 || w2 == wa {
                return None;
            }
            w2.iter_mut().for_each(|x| *x /= s);
            Some(w2)
        };
        let all = |k: usize| wa[k] >= thr;
        let dying = |k: usize| wa[k] >= thr || g[k] >= 1.0;
        for keep in [&all as &dyn Fn(usize) -> bool, &dying] {
            if let Some(w2) = try_drop(keep) {
                let t2 = self.tau_obs(&self.block, &w2);
                if self.loglik(&t2) >= l_now - 1e-12 {
                    for (k, &j) in self.active.iter().enumerate() {
                        self.w[j] = w2[k];
                    }
                    self.rebuild_block();
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    /// Active-set refinement: Newton on the current face, vertex moves for
    /// violated stability conditions, then support reduction.
    fn refine(&mut self) -> Result<()> {
        if self.active.len() > LARGE_FACE && !self.restrict()? {
            return Ok(());
        }
        let max_outer = 10 * self.n_obs() + 200;
        for _ in 0..max_outer {
            if self.iterations >= self.cfg.max_iterations {
                break;
            }
            self.reduce_support()?;
            self.newton_face()?;
            let d = self.full_discrepancy()?;
            let mut viol: Vec<(usize, f64)> = d
                .iter()
                .enumerate()
                .filter(|&(j, &dj)| self.w[j] == 0.0 && dj > 0.5 * self.cfg.tol_stability)
                .map(|(j, &dj)| (j, dj))
                .collect();
            if viol.is_empty() {
                break;
            }
            viol.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            viol.truncate(VERTEX_BATCH);
            let cols: Vec<usize> = viol.iter().map(|v| v.0).collect();
            self.vertex_step(&cols)?;
        }
        Ok(())
    }

    /// Solves the problem restricted to the `LARGE_FACE` heaviest types and
    /// adopts the result when it improves the likelihood.
    fn restrict(&mut self) -> Result<bool> {
        let mut order = self.active.clone();
        order.sort_by(|&a, &b| self.w[b].total_cmp(&self.w[a]).then(a.cmp(&b)));
        order.truncate(LARGE_FACE);
        order.sort_unstable();
        let (_, _, l_now) = self.face_state()?;
        let sub = self.f.select_columns(&order)?;
        let mass: f64 = order.iter().map(|&j| self.w[j]).sum();
        let start: Vec<f64> = order.iter().map(|&j| self.w[j] / mass).collect();
        if mat_vec(&gather(&sub, &self.obs, &(0..order.len()).collect::<Vec<_>>()), self.n_obs(), &start)
            .iter()
            .any(|&t| t <= 0.0)
        {
            return Ok(false);
        }
        let cfg = SolveConfig {
            record_trace: false,
            max_iterations: self.cfg.max_iterations - self.iterations,
            ..self.cfg.clone()
        };
        let mut inner = Solver::new(&sub, self.beta, &cfg, start);
        inner.run()?;
        let wa: Vec<f64> = inner.active.iter().map(|&j| inner.w[j]).collect();
        let l_new = self.loglik(&inner.tau_obs(&inner.block, &wa));
        self.iterations += inner.iterations;
        if l_new < l_now {
            return Ok(false);
        }
        self.w.iter_mut().for_each(|x| *x = 0.0);
        for (k, &j) in order.iter().enumerate() {
            self.w[j] = inner.w[k];
        }
        self.rebuild_block();
        self.record_state()?;
        Ok(true)
    }

    fn face_state(&self) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let wa: Vec<f64> = self.active.iter().map(|&j| self.w[j]).collect();
        let tau = self.tau_obs(&self.block, &wa);
        let l = self.loglik(&tau);
        Ok((wa, tau, l))
    }

    fn newton_face(&mut self) -> Result<()> {
        let m = self.n_obs();
        for _ in 0..200 {
            if self.iterations >= self.cfg.max_iterations {
                return Ok(());
            }
            let k = self.active.len();
            if k == 1 {
                self.w[self.active[0]] = 1.0;
                return Ok(());
            }
            if k > MAX_NEWTON_FACE {
                return Ok(());
            }
            let (wa, tau, l0) = self.face_state()?;
            let r = self.ratios(&tau)?;
            let g = col_dots(&self.block, m, &r);
            let coh = g.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
            let resid = wa.iter().zip(&g).map(|(p, x)| (p * (x - 1.0)).abs()).fold(0.0, f64::max);
            if coh <= 1e-3 * self.cfg.tol_coherence && resid <= 0.1 * self.cfg.tol_fixed_point {
                return Ok(());
            }

            // Negative Hessian of the normalized likelihood restricted to the face.
            let q: Vec<f64> = self.beta_obs.iter().zip(&tau).map(|(b, t)| b / (t * t)).collect();
            let cols: Vec<&[f64]> = self.block.chunks_exact(m).collect();
            let mut a = DMatrix::<f64>::zeros(k, k);
            for p in 0..k {
                for s in p..k {
                    let v: f64 = (0..m).map(|i| q[i] * cols[p][i] * cols[s][i]).sum();
                    a[(p, s)] = v;
                    a[(s, p)] = v;
                }
            }
            let Some(delta) = constrained_newton_direction(&a, &g) else {
                return Ok(());
            };
            let slope: f64 = g.iter().zip(&delta).map(|(x, y)| x * y).sum();

            let mut alpha_max = f64::INFINITY;
            let mut blocking = None;
            for (p, (&x, &dx)) in wa.iter().zip(&delta).enumerate() {
                if dx < 0.0 {
                    let t = x / -dx;
                    if t < alpha_max {
                        alpha_max = t;
                        blocking = Some(p);
                    }
                }
            }
            let mut alpha = alpha_max.min(1.0);
            let hits_bound = alpha_max <= 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let mut trial: Vec<f64> = wa.iter().zip(&delta).map(|(x, dx)| (x + alpha * dx).max(0.0)).collect();
                if hits_bound && alpha == alpha_max {
                    if let Some(p) = blocking {
                        trial[p] = 0.0;
                    }
                }
                let s: f64 = trial.iter().sum();
                trial.iter_mut().for_each(|x| *x /= s);
                let lt = self.loglik(&self.tau_obs(&self.block, &trial));
                let armijo = lt >= l0 + 1e-4 * alpha * slope;
                let flat = slope < 1e-14 && lt >= l0 - 1e-14;
                if armijo || flat {
                    accepted = Some((trial, lt));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, lt)) = accepted else {
                return Ok(());
            };
            for (p, &j) in self.active.iter().enumerate() {
                self.w[j] = trial[p];
            }
            self.iterations += 1;
            if trial.iter().any(|&x| x == 0.0) {
                self.rebuild_block();
            }
            let support = self.active.len();
            self.record(lt, resid, support);
            if (lt - l0).abs() < 1e-15 && !hits_bound {
                return Ok(());
            }
        }
        Ok(())
    }

    /// Moves mass toward the average of the vertices in `js` by an exact line
    /// search on the segment.
    fn vertex_step(&mut self, js: &[usize]) -> Result<()> {
        let (wa, tau, _) = self.face_state()?;
        let share = 1.0 / js.len() as f64;
        let col: Vec<f64> = self
            .obs
            .iter()
            .map(|&i| js.iter().map(|&j| self.f.get(i, j)).sum::<f64>() * share)
            .collect();
        let phi = |a: f64| -> f64 {
            self.beta_obs
                .iter()
                .zip(&tau)
                .zip(&col)
                .map(|((&b, &t), &c)| b * (c - t) / ((1.0 - a) * t + a * c))
                .sum()
        };
        let alpha = if phi(1.0) >= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if phi(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        if alpha <= 0.0 {
            return Ok(());
        }
        for (p, &jj) in self.active.iter().enumerate() {
            self.w[jj] = wa[p] * (1.0 - alpha);
        }
        for &j in js {
            self.w[j] += alpha * share;
        }
        self.iterations += 1;
        self.rebuild_block();
        self.record_state()
    }

    fn record_state(&mut self) -> Result<()> {
        let (wa, tau, l) = self.face_state()?;
        let r = self.ratios(&tau)?;
        let g = col_dots(&self.block, self.n_obs(), &r);
        let resid = wa.iter().zip(&g).map(|(p, x)| (p * (x - 1.0)).abs()).fold(0.0, f64::max);
        let support = self.active.len();
        self.record(l, resid, support);
        Ok(())
    }

    /// Removes support points along null directions of `(1; F_obs)`: the
    /// marginal on observed outcomes, and hence the likelihood and every
    /// discrepancy, stay fixed. Reverted if rounding moves the marginal.
    fn reduce_support(&mut self) -> Result<()> {
        let m = self.n_obs();
        if self.active.len() <= m + 1 {
            return Ok(());
        }
        let (_, tau_before, l_before) = self.face_state()?;
        let saved = self.w.clone();
        let mut act: Vec<usize> = self.active.clone();
        let k = m + 2;
        let mut bmat = DMatrix::<f64>::zeros(k, k);
        while act.len() > m + 1 {
            let sub = &act[act.len() - k..];
            for (c, &j) in sub.iter().enumerate() {
                bmat[(0, c)] = 1.0;
                let col = self.f.column(j);
                for (r, &i) in self.obs.iter().enumerate() {
                    bmat[(r + 1, c)] = col[i];
                }
            }
            let svd = bmat.clone().svd(false, true);
            let Some(v_t) = svd.v_t else { break };
            let imin = svd.singular_values.imin();
            let v: Vec<f64> = v_t.row(imin).iter().copied().collect();
            let mut best: Option<(f64, usize, f64)> = None;
            for sign in [1.0, -1.0] {
                for (c, &j) in sub.iter().enumerate() {
                    let dv = sign * v[c];
                    if dv < 0.0 {
                        let t = self.w[j] / -dv;
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, c, sign));
                        }
                    }
                }
            }
            let Some((t, hit, sign)) = best else { break };
            for (c, &j) in sub.iter().enumerate() {
                self.w[j] = (self.w[j] + t * sign * v[c]).max(0.0);
            }
            self.w[sub[hit]] = 0.0;
            act.retain(|&j| self.w[j] > 0.0);
        }
        let s: f64 = self.w.iter().sum();
        self.w.iter_mut().for_each(|x| *x /= s);
        self.rebuild_block();
        let (_, tau_after, l_after) = self.face_state()?;
        let drift = tau_before
            .iter()
            .zip(&tau_after)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if l_after < l_before - 1e-12 || drift > 1e-9 {
            self.w = saved;
            self.rebuild_block();
        }
        Ok(())
    }

    fn finish(self, b: &CountVector) -> Result<SolveResult> {
        let pi = Prior::from_iterate(self.w);
        let tau = mixture_marginal(self.f, &pi)?;
        let d = discrepancy_from_marginal(self.f, self.beta, &tau)?;
        let certificate =
            certificate_from(pi.weights(), &d, self.cfg.tol_coherence, self.cfg.tol_stability);
        let residual = fixed_point_residual(&pi, &d);
        let l = log_likelihood_from_marginal(self.beta, &tau);
        let kl = kl_divergence(self.beta, &tau)?;
        let converged =
            self.converged && certificate.pass && residual <= self.cfg.tol_fixed_point;
        let mut warnings = Vec::new();
        if !converged {
            warnings.push(format!(
                "not certified after {} iterations (coherence {:.3e}, stability {:?})",
                self.iterations, certificate.coherence_residual, certificate.stability_residual
            ));
        }
        Ok(SolveResult {
            support: pi.support(),
            pi_hat: pi,
            iterations: self.iterations,
            log_likelihood: l,
            log_likelihood_total: l * b.total() as f64,
            kl,
            certificate,
            fixed_point_residual: residual,
            converged,
            warnings,
            trace: self.trace,
        })
    }
}

/// Gathers the given rows and columns of `f` into a column-major block.
fn gather(f: &DensityMatrix, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &j in cols {
        let c = f.column(j);
        out.extend(rows.iter().map(|&i| c[i]));
    }
    out
}

/// Solves `max g'x - x'Ax/2` subject to `1'x = 0` with a small ridge on `A`.
fn constrained_newton_direction(a: &DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let k = g.len();
    let scale = (0..k).map(|i| a[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let gv = DVector::from_column_slice(g);
    let ones = DVector::from_element(k, 1.0);
    let mut ridge = 1e-12 * scale;
    for _ in 0..8 {
        let mut ar = a.clone();
        for i in 0..k {
            ar[(i, i)] += ridge;
        }
        if let Some(ch) = ar.cholesky() {
            let u = ch.solve(&gv);
            let v = ch.solve(&ones);
            let nu = u.sum() / v.sum();
            let d = u - v * nu;
            if d.iter().all(|x| x.is_finite()) {
                return Some(d.iter().copied().collect());
            }
        }
        ridge *= 100.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::DensityKind;
    use approx::assert_abs_diff_eq;

    fn gk() -> DensityMatrix {
        DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.95, 0.1], vec![0.05, 0.9]])
            .unwrap()
    }

    #[test]
    fn goalkeepers_interior_fixed_point() {
        let b = CountVector::new(vec![1, 1]).unwrap();
        let r = solve_fixed_point(&gk(), &b, &SolveConfig::default(), None).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.pi_hat.weights()[0], 0.4 / 0.85, epsilon = 1e-9);
        assert_eq!(r.support, vec![0, 1]);
    }

    #[test]
    fn goalkeepers_with_dead_type() {
        let b = CountVector::new(vec![4, 96]).unwrap();
        let r = solve_fixed_point(&gk(), &b, &SolveConfig::default(), None).unwrap();
        assert!(r.converged);
        assert_eq!(r.support, vec![1]);
        assert!(r.certificate.stability_residual.unwrap() < 0.0);
    }

    #[test]
    fn budget_exhaustion_reports_best_iterate() {
        let b = CountVector::new(vec![1, 1]).unwrap();
        let cfg = SolveConfig { max_iterations: 1, ..Default::default() };
        let r = solve_fixed_point(&gk(), &b, &cfg, None).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn single_type_is_trivially_certified() {
        let f = DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.3], vec![0.7]]).unwrap();
        let b = CountVector::new(vec![2, 5]).unwrap();
        let r = solve_fixed_point(&f, &b, &SolveConfig::default(), None).unwrap();
        assert!(r.converged);
        assert_eq!(r.pi_hat.weights(), &[1.0]);
    }

    #[test]
    fn verify_stability_examples() {
        let beta = FrequencyVector::new(vec![0.5, 0.5]).unwrap();
        let v = Prior::vertex(2, 0).unwrap();
        let c = verify_stability(&gk(), &beta, &v, 1e-8, 1e-8).unwrap();
        assert!(c.coherence_residual < 1e-15);
        assert!(c.stability_residual.unwrap() > 0.0);
        assert!(!c.pass);
        let interior = Prior::new(vec![0.4 / 0.85, 0.45 / 0.85]).unwrap();
        let c = verify_stability(&gk(), &beta, &interior, 1e-8, 1e-8).unwrap();
        assert!(c.pass);
        assert_eq!(c.stability_residual, None);
    }

    #[test]
    fn prune_examples() {
        let p = Prior::new(vec![0.5, 0.5 - 1e-9, 1e-9]).unwrap();
        let q = prune_support(&p, 1e-6).unwrap();
        assert_eq!(q.weights()[2], 0.0);
        assert_abs_diff_eq!(q.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        let p = Prior::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(prune_support(&p, 1e-6).unwrap(), p);
        let tiny = Prior::uniform(2000).unwrap();
        assert!(matches!(prune_support(&tiny, 1e-3), Err(Error::Degenerate(_))));
        assert!(prune_support(&p, 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = SolveConfig { prune_threshold: 0.01, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SolveConfig { tol_fixed_point: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn result_json_round_trip() {
        let b = CountVector::new(vec![1, 1]).unwrap();
        let r = solve_fixed_point(&gk(), &b, &SolveConfig::default(), None).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: SolveResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back.pi_hat, r.pi_hat);
        assert_eq!(back.certificate, r.certificate);
    }
}
