//! Python bindings: density matrices, the fixed-point solver and its
//! certificate, identification and the callback-data pipeline.

use std::path::PathBuf;

use npeb_core::discrimination::{self, CallbackModel, Profile};
use npeb_core::identification::{check_assumption_discrete, IdentificationConfig};
use npeb_core::models::{self, Grid1D, Kernel, ModelSpec};
use npeb_core::{
    normalize_counts, CountVector, DensityKind, DensityMatrix, Prior, SolveConfig, SolveResult,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: npeb_core::Error) -> PyErr {
    match e {
        npeb_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(kind: &str) -> Result<DensityKind, String> {
    match kind {
        "discrete" => Ok(DensityKind::Discrete),
        "continuous" => Ok(DensityKind::Continuous),
        k => Err(format!("unknown density kind {k:?}")),
    }
}

fn parse_model(model: &str) -> Result<CallbackModel, String> {
    match model {
        "independent" => Ok(CallbackModel::Independent),
        "frechet" => Ok(CallbackModel::Frechet),
        m => Err(format!("unknown callback model {m:?}")),
    }
}

fn parse_profile(profile: &str) -> Result<Profile, String> {
    match profile {
        "desk" => Ok(Profile::Desk),
        "full" => Ok(Profile::Full),
        p => Err(format!("unknown profile {p:?}")),
    }
}

fn counts(c: Vec<u64>) -> PyResult<CountVector> {
    CountVector::new(c).map_err(to_py)
}

fn prior(w: Vec<f64>) -> PyResult<Prior> {
    Prior::new(w).map_err(to_py)
}

/// Outcome-by-type likelihood matrix.
#[pyclass(name = "DensityMatrix", module = "npeb", frozen)]
struct PyDensityMatrix {
    inner: DensityMatrix,
}

#[pymethods]
impl PyDensityMatrix {
    #[new]
    #[pyo3(signature = (columns, kind = "discrete"))]
    fn new(columns: Vec<Vec<f64>>, kind: &str) -> PyResult<Self> {
        let kind = parse_kind(kind).map_err(PyValueError::new_err)?;
        Ok(PyDensityMatrix { inner: DensityMatrix::from_columns(kind, columns).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (rows, kind = "discrete"))]
    fn from_rows(rows: Vec<Vec<f64>>, kind: &str) -> PyResult<Self> {
        let kind = parse_kind(kind).map_err(PyValueError::new_err)?;
        Ok(PyDensityMatrix { inner: DensityMatrix::from_rows(kind, &rows).map_err(to_py)? })
    }

    /// Binomial(shots, p) columns for each grid point `p`.
    #[staticmethod]
    fn binomial(shots: u32, grid: Vec<f64>) -> PyResult<Self> {
        let g = Grid1D::new(grid).map_err(to_py)?;
        let inner = models::build_f_discrete(&ModelSpec::BernoulliGk { shots }, &g).map_err(to_py)?;
        Ok(PyDensityMatrix { inner })
    }

    /// Bivariate callback model over `grid x grid`.
    #[staticmethod]
    #[pyo3(signature = (shots, grid, model = "frechet", seed = 0, samples_per_pair = 25))]
    fn bivariate(shots: u32, grid: Vec<f64>, model: &str, seed: u64, samples_per_pair: usize) -> PyResult<Self> {
        let g = Grid1D::new(grid).map_err(to_py)?;
        let model = parse_model(model).map_err(PyValueError::new_err)?;
        let sampler = models::FrechetSamplerConfig { seed, samples_per_pair, ..Default::default() };
        let inner = discrimination::build_callback_matrix(shots, model, &g, &sampler).map_err(to_py)?;
        Ok(PyDensityMatrix { inner })
    }

    /// Normal location densities evaluated at the observations.
    #[staticmethod]
    fn gaussian(obs: Vec<f64>, sigma: f64, grid: Vec<f64>) -> PyResult<Self> {
        let g = Grid1D::new(grid).map_err(to_py)?;
        let inner = models::build_f_continuous(&obs, &Kernel::Gaussian { sigma }, &g).map_err(to_py)?;
        Ok(PyDensityMatrix { inner })
    }

    #[getter]
    fn n_outcomes(&self) -> usize {
        self.inner.n_outcomes()
    }

    #[getter]
    fn n_types(&self) -> usize {
        self.inner.n_types()
    }

    fn column(&self, j: usize) -> PyResult<Vec<f64>> {
        if j >= self.inner.n_types() {
            return Err(PyValueError::new_err("column index out of range"));
        }
        Ok(self.inner.column(j).to_vec())
    }

    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        if i >= self.inner.n_outcomes() || j >= self.inner.n_types() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(i, j))
    }

    fn __repr__(&self) -> String {
        format!(
            "DensityMatrix({} outcomes x {} types, {:?})",
            self.inner.n_outcomes(),
            self.inner.n_types(),
            self.inner.kind()
        )
    }
}

#[pyclass(name = "SolveConfig", module = "npeb", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PySolveConfig {
    tol_fixed_point: f64,
    max_iterations: usize,
    prune_threshold: f64,
    prune_interval: usize,
    tol_coherence: f64,
    tol_stability: f64,
    refine: bool,
    record_trace: bool,
}

impl From<&PySolveConfig> for SolveConfig {
    fn from(c: &PySolveConfig) -> Self {
        SolveConfig {
            tol_fixed_point: c.tol_fixed_point,
            max_iterations: c.max_iterations,
            prune_threshold: c.prune_threshold,
            prune_interval: c.prune_interval,
            tol_coherence: c.tol_coherence,
            tol_stability: c.tol_stability,
            refine: c.refine,
            record_trace: c.record_trace,
            ..SolveConfig::default()
        }
    }
}

#[pymethods]
impl PySolveConfig {
    #[new]
    #[pyo3(signature = (max_iterations = None, tol_fixed_point = None, refine = None))]
    fn new(max_iterations: Option<usize>, tol_fixed_point: Option<f64>, refine: Option<bool>) -> Self {
        let d = SolveConfig::default();
        PySolveConfig {
            tol_fixed_point: tol_fixed_point.unwrap_or(d.tol_fixed_point),
            max_iterations: max_iterations.unwrap_or(d.max_iterations),
            prune_threshold: d.prune_threshold,
            prune_interval: d.prune_interval,
            tol_coherence: d.tol_coherence,
            tol_stability: d.tol_stability,
            refine: refine.unwrap_or(d.refine),
            record_trace: d.record_trace,
        }
    }
}

#[pyclass(name = "SolveResult", module = "npeb", frozen)]
struct PySolveResult {
    inner: SolveResult,
}

#[pymethods]
impl PySolveResult {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.pi_hat.weights().to_vec()
    }

    #[getter]
    fn support(&self) -> Vec<usize> {
        self.inner.support.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.log_likelihood
    }

    #[getter]
    fn kl(&self) -> f64 {
        self.inner.kl
    }

    #[getter]
    fn fixed_point_residual(&self) -> f64 {
        self.inner.fixed_point_residual
    }

    #[getter]
    fn certificate_pass(&self) -> bool {
        self.inner.certificate.pass
    }

    #[getter]
    fn coherence_residual(&self) -> f64 {
        self.inner.certificate.coherence_residual
    }

    /// Largest off-support discrepancy, or `None` with full support.
    #[getter]
    fn stability_residual(&self) -> Option<f64> {
        self.inner.certificate.stability_residual
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// `(iteration, log_likelihood, residual, support_size)` rows.
    #[getter]
    fn trace(&self) -> Vec<(usize, f64, f64, usize)> {
        self.inner
            .trace
            .iter()
            .map(|t| (t.iteration, t.log_likelihood, t.residual, t.support_size))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "SolveResult(converged={}, support={}, log_likelihood={:.6})",
            self.inner.converged,
            self.inner.support.len(),
            self.inner.log_likelihood
        )
    }
}

#[pyfunction]
#[pyo3(signature = (f, counts, config = None, init = None))]
fn solve_fixed_point(
    f: &PyDensityMatrix,
    counts: Vec<u64>,
    config: Option<&PySolveConfig>,
    init: Option<Vec<f64>>,
) -> PyResult<PySolveResult> {
    let cfg = config.map(SolveConfig::from).unwrap_or_default();
    let b = self::counts(counts)?;
    let pi0 = init.map(prior).transpose()?;
    let inner = npeb_core::solve_fixed_point(&f.inner, &b, &cfg, pi0.as_ref()).map_err(to_py)?;
    Ok(PySolveResult { inner })
}

#[pyfunction]
fn bayes_update(f: &PyDensityMatrix, counts: Vec<u64>, prior: Vec<f64>) -> PyResult<Vec<f64>> {
    let beta = normalize_counts(&self::counts(counts)?).map_err(to_py)?;
    let h = npeb_core::bayes_update(&f.inner, &beta, &self::prior(prior)?).map_err(to_py)?;
    Ok(h.into_weights())
}

#[pyfunction]
fn discrepancy(f: &PyDensityMatrix, counts: Vec<u64>, prior: Vec<f64>) -> PyResult<Vec<f64>> {
    let beta = normalize_counts(&self::counts(counts)?).map_err(to_py)?;
    npeb_core::discrepancy(&f.inner, &beta, &self::prior(prior)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (f, counts, prior, normalized = true))]
fn log_likelihood(f: &PyDensityMatrix, counts: Vec<u64>, prior: Vec<f64>, normalized: bool) -> PyResult<f64> {
    let (b, p) = (self::counts(counts)?, self::prior(prior)?);
    if normalized {
        npeb_core::log_likelihood_normalized(&f.inner, &b, &p).map_err(to_py)
    } else {
        npeb_core::log_likelihood(&f.inner, &b, &p).map_err(to_py)
    }
}

#[pyfunction]
fn mixture_marginal(f: &PyDensityMatrix, prior: Vec<f64>) -> PyResult<Vec<f64>> {
    npeb_core::mixture_marginal(&f.inner, &self::prior(prior)?).map_err(to_py)
}

#[pyfunction]
fn kl_divergence(counts: Vec<u64>, tau: Vec<f64>) -> PyResult<f64> {
    let beta = normalize_counts(&self::counts(counts)?).map_err(to_py)?;
    npeb_core::kl_divergence(&beta, &tau).map_err(to_py)
}

/// Returns `(pass, coherence_residual, stability_residual)`.
#[pyfunction]
#[pyo3(signature = (f, counts, prior, tol_coherence = 1e-8, tol_stability = 1e-8))]
fn verify_stability(
    f: &PyDensityMatrix,
    counts: Vec<u64>,
    prior: Vec<f64>,
    tol_coherence: f64,
    tol_stability: f64,
) -> PyResult<(bool, f64, Option<f64>)> {
    let beta = normalize_counts(&self::counts(counts)?).map_err(to_py)?;
    let c = npeb_core::verify_stability(&f.inner, &beta, &self::prior(prior)?, tol_coherence, tol_stability)
        .map_err(to_py)?;
    Ok((c.pass, c.coherence_residual, c.stability_residual))
}

/// Identification report as a JSON string.
#[pyfunction]
#[pyo3(signature = (f, counts, support = None, seed = 0))]
fn check_identification(f: &PyDensityMatrix, counts: Vec<u64>, support: Option<Vec<usize>>, seed: u64) -> PyResult<String> {
    let cfg = IdentificationConfig { seed, ..Default::default() };
    let r = check_assumption_discrete(&f.inner, &self::counts(counts)?, &cfg, support.as_deref()).map_err(to_py)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Returns `(p_value, statistic)` for a `c_f,c_m,count` CSV.
#[pyfunction]
#[pyo3(signature = (path, n_sim = 100_000, seed = 0))]
fn independence_test(path: PathBuf, n_sim: usize, seed: u64) -> PyResult<(f64, f64)> {
    let data = discrimination::ingest_callback_csv(&path).map_err(to_py)?;
    let r = discrimination::independence_test(&data, n_sim, seed).map_err(to_py)?;
    Ok((r.p_value, r.statistic))
}

/// Discrimination report for a `c_f,c_m,count` CSV as a JSON string.
#[pyfunction]
#[pyo3(signature = (path, model = "frechet", profile = "desk", seed = 0))]
fn estimate_discrimination(path: PathBuf, model: &str, profile: &str, seed: u64) -> PyResult<String> {
    let data = discrimination::ingest_callback_csv(&path).map_err(to_py)?;
    let model = parse_model(model).map_err(PyValueError::new_err)?;
    let profile = parse_profile(profile).map_err(PyValueError::new_err)?;
    let r = discrimination::estimate_discrimination(
        &data,
        model,
        &profile.grid().map_err(to_py)?,
        &profile.sampler(seed),
        &SolveConfig::default(),
        &IdentificationConfig::default(),
    )
    .map_err(to_py)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn npeb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDensityMatrix>()?;
    m.add_class::<PySolveConfig>()?;
    m.add_class::<PySolveResult>()?;
    m.add_function(wrap_pyfunction!(solve_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_update, m)?)?;
    m.add_function(wrap_pyfunction!(discrepancy, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(verify_stability, m)?)?;
    m.add_function(wrap_pyfunction!(check_identification, m)?)?;
    m.add_function(wrap_pyfunction!(independence_test, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_discrimination, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names() {
        assert_eq!(parse_kind("continuous"), Ok(DensityKind::Continuous));
        assert!(parse_kind("mixed").is_err());
        assert_eq!(parse_model("independent"), Ok(CallbackModel::Independent));
        assert_eq!(parse_profile("full"), Ok(Profile::Full));
        assert!(parse_profile("huge").is_err());
    }
}
