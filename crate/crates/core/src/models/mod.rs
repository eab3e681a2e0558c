//! Density matrices for the supported statistical models.

pub mod cache;
pub mod frechet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{DensityKind, DensityMatrix, TypeLabel};

pub use frechet::{
    frechet_sample_tables, round_marginal, FrechetSamplerConfig, IntTable, JointTable, MoveKind,
    TableChain, Target,
};

/// Strictly increasing type grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    points: Vec<f64>,
}

impl Grid1D {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("empty grid".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidValue("grid points must be strictly increasing".into()));
        }
        Ok(Grid1D { points })
    }

    /// `n` equally spaced points from `lo` to `hi` inclusive.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Self> {
        match n {
            0 => Err(Error::Degenerate("empty grid".into())),
            1 => Grid1D::new(vec![lo]),
            _ => {
                let h = (hi - lo) / (n - 1) as f64;
                Grid1D::new((0..n).map(|k| lo + h * k as f64).collect())
            }
        }
    }

    /// The points `k / (n + 1)`, `k = 1..=n`, in the open unit interval.
    pub fn uniform_open(n: usize) -> Result<Self> {
        let d = (n + 1) as f64;
        Grid1D::new((1..=n).map(|k| k as f64 / d).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether every point of `self` appears in `other` (within `tol`).
    pub fn is_subset_of(&self, other: &Grid1D, tol: f64) -> bool {
        self.points.iter().all(|&x| {
            let k = other.points.partition_point(|&y| y < x - tol);
            k < other.points.len() && (other.points[k] - x).abs() <= tol
        })
    }

    fn require_probabilities(&self) -> Result<()> {
        if self.points.iter().all(|&p| p > 0.0 && p < 1.0) {
            Ok(())
        } else {
            Err(Error::InvalidValue("probability grid must lie in (0, 1)".into()))
        }
    }
}

fn binomial_coefficient(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn binomial_pmf(l: u32, p: f64, c: u32) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidValue(format!("probability {p} outside (0, 1)")));
    }
    if c > l {
        return Err(Error::InvalidValue(format!("count {c} exceeds {l} trials")));
    }
    Ok(binomial_coefficient(l, c) * p.powi(c as i32) * (1.0 - p).powi((l - c) as i32))
}

/// The pmf over `0..=l`.
pub fn binomial_pmf_vec(l: u32, p: f64) -> Result<Vec<f64>> {
    (0..=l).map(|c| binomial_pmf(l, p, c)).collect()
}

/// Outcome `(c_a, c_b)` is stored at index `c_a * (l + 1) + c_b`.
pub fn bivariate_index(l: u32, c_a: u32, c_b: u32) -> usize {
    (c_a * (l + 1) + c_b) as usize
}

pub fn bivariate_outcome_labels(l: u32) -> Vec<String> {
    (0..=l)
        .flat_map(|a| (0..=l).map(move |b| format!("({a},{b})")))
        .collect()
}

/// Outer product of two binomial pmfs.
pub fn independent_bivariate_column(l: u32, p_a: f64, p_b: f64) -> Result<Vec<f64>> {
    let fa = binomial_pmf_vec(l, p_a)?;
    let fb = binomial_pmf_vec(l, p_b)?;
    Ok(fa.iter().flat_map(|&x| fb.iter().map(move |&y| x * y)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Binomial success counts out of `shots` attempts.
    BernoulliGk { shots: u32 },
    /// Two independent binomials sharing the grid for both probabilities.
    IndependentBivariate { shots: u32 },
    /// Joint tables sampled from the Frechet class of two binomial margins.
    FrechetBivariate { shots: u32, sampler: FrechetSamplerConfig },
}

pub fn build_f_discrete(model: &ModelSpec, grid: &Grid1D) -> Result<DensityMatrix> {
    grid.require_probabilities()?;
    let pts = grid.points();
    match model {
        ModelSpec::BernoulliGk { shots } => {
            let cols = pts
                .iter()
                .map(|&p| binomial_pmf_vec(*shots, p))
                .collect::<Result<Vec<_>>>()?;
            DensityMatrix::from_columns(DensityKind::Discrete, cols)?
                .with_outcome_labels((0..=*shots).map(|c| c.to_string()).collect())?
                .with_type_labels(pts.iter().map(|&p| TypeLabel::Scalar(p)).collect())
        }
        ModelSpec::IndependentBivariate { shots } => {
            let n = pts.len();
            let mut cols = Vec::with_capacity(n * n);
            let mut labels = Vec::with_capacity(n * n);
            for (ia, &a) in pts.iter().enumerate() {
                for (ib, &b) in pts.iter().enumerate() {
                    cols.push(independent_bivariate_column(*shots, a, b)?);
                    labels.push(TypeLabel::Pair { a, b, ia, ib });
                }
            }
            DensityMatrix::from_columns(DensityKind::Discrete, cols)?
                .with_outcome_labels(bivariate_outcome_labels(*shots))?
                .with_type_labels(labels)
        }
        ModelSpec::FrechetBivariate { shots, sampler } => {
            let n = pts.len();
            let pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|ia| (0..n).map(move |ib| (ia, ib))).collect();
            let per_pair: Vec<Vec<JointTable>> = pairs
                .par_iter()
                .map(|&(ia, ib)| {
                    let fa = binomial_pmf_vec(*shots, pts[ia])?;
                    let fb = binomial_pmf_vec(*shots, pts[ib])?;
                    let cfg = sampler.for_stream((ia * n + ib) as u64);
                    frechet_sample_tables(&fa, &fb, &cfg)
                })
                .collect::<Result<_>>()?;
            let cols: Vec<Vec<f64>> =
                per_pair.into_iter().flatten().map(JointTable::into_cells).collect();
            let labels = discrete_type_labels(model, grid)?;
            DensityMatrix::from_columns_nonnegative(DensityKind::Discrete, cols)?
                .with_outcome_labels(bivariate_outcome_labels(*shots))?
                .with_type_labels(labels)
        }
    }
}

/// Type labels of [`build_f_discrete`] without building the matrix; used to
/// relabel matrices loaded from the cache.
pub fn discrete_type_labels(model: &ModelSpec, grid: &Grid1D) -> Result<Vec<TypeLabel>> {
    grid.require_probabilities()?;
    let pts = grid.points();
    let pairs = || pts.iter().enumerate().flat_map(|(ia, &a)| pts.iter().enumerate().map(move |(ib, &b)| (ia, a, ib, b)));
    Ok(match model {
        ModelSpec::BernoulliGk { .. } => pts.iter().map(|&p| TypeLabel::Scalar(p)).collect(),
        ModelSpec::IndependentBivariate { .. } => {
            pairs().map(|(ia, a, ib, b)| TypeLabel::Pair { a, b, ia, ib }).collect()
        }
        ModelSpec::FrechetBivariate { shots, sampler } => {
            let mut out = Vec::with_capacity(pts.len() * pts.len() * sampler.samples_per_pair);
            for (ia, a, ib, b) in pairs() {
                let m = sampler.effective_units(&binomial_pmf_vec(*shots, a)?, &binomial_pmf_vec(*shots, b)?);
                for sample in 0..sampler.samples_per_pair {
                    out.push(TypeLabel::Table {
                        a,
                        b,
                        ia,
                        ib,
                        sample,
                        step: (sampler.burn_in + sampler.thin * (sample + 1)) as u64,
                        mass_units: m,
                    });
                }
            }
            out
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum Kernel {
    /// Normal location family with fixed scale.
    Gaussian { sigma: f64 },
}

impl Kernel {
    pub fn density(&self, x: f64, t: f64) -> f64 {
        match *self {
            Kernel::Gaussian { sigma } => {
                let z = (x - t) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Gaussian { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            Kernel::Gaussian { .. } => Err(Error::InvalidValue("sigma must be positive".into())),
        }
    }
}

/// Kernel evaluations `F[n][j] = p(x_n | t_j)`; one row per observation.
pub fn build_f_continuous(obs: &[f64], kernel: &Kernel, grid: &Grid1D) -> Result<DensityMatrix> {
    kernel.validate()?;
    if obs.is_empty() {
        return Err(Error::Degenerate("no observations".into()));
    }
    let cols: Vec<Vec<f64>> = grid
        .points()
        .iter()
        .map(|&t| obs.iter().map(|&x| kernel.density(x, t)).collect())
        .collect();
    DensityMatrix::from_columns(DensityKind::Continuous, cols)?
        .with_type_labels(grid.points().iter().map(|&t| TypeLabel::Scalar(t)).collect())
}
