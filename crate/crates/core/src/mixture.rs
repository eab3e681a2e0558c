//! Core data types and the pure operations on a finite mixture: the mixture
//! marginal, the posterior operator, the discrepancy function, the marginal
//! log-likelihood and the Kullback-Leibler divergence.
//!
//! The density matrix `F` is stored column-major: one contiguous column per
//! latent type. Every reduction runs over fixed-size column chunks folded in
//! chunk order, so results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries at or below this value are rejected by strictly positive matrices.
pub const MIN_ENTRY: f64 = 1e-300;

/// Tolerance for simplex membership and discrete column sums.
pub const SIMPLEX_TOL: f64 = 1e-12;

const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    /// Columns are probability mass functions over the full outcome space.
    Discrete,
    /// Entries are density values evaluated at the observations.
    Continuous,
}

/// Descriptor of a latent type (a column of the density matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeLabel {
    Index(usize),
    /// A scalar parameter, e.g. a save probability or a location.
    Scalar(f64),
    /// A pair of group parameters drawn from grids, with their grid indices.
    Pair { a: f64, b: f64, ia: usize, ib: usize },
    /// A sampled joint table for the marginal pair `(a, b)`; `sample` is the
    /// draw index within the chain and `step` the chain position it came from.
    Table {
        a: f64,
        b: f64,
        ia: usize,
        ib: usize,
        sample: usize,
        step: u64,
        mass_units: u64,
    },
}

impl TypeLabel {
    /// The scalar coordinate used for one-dimensional summaries.
    pub fn coordinate(&self) -> Option<f64> {
        match self {
            TypeLabel::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    /// Group parameters for bivariate types.
    pub fn pair(&self) -> Option<(f64, f64, usize, usize)> {
        match *self {
            TypeLabel::Pair { a, b, ia, ib } => Some((a, b, ia, ib)),
            TypeLabel::Table { a, b, ia, ib, .. } => Some((a, b, ia, ib)),
            _ => None,
        }
    }
}

/// The I x J matrix of conditional outcome probabilities (or densities).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    kind: DensityKind,
    strictly_positive: bool,
    outcome_labels: Vec<String>,
    type_labels: Vec<TypeLabel>,
}

impl DensityMatrix {
    /// Builds a matrix from its columns, requiring every entry to exceed
    /// [`MIN_ENTRY`].
    pub fn from_columns(kind: DensityKind, columns: Vec<Vec<f64>>) -> Result<Self> {
        Self::build(kind, columns, true)
    }

    /// Like [`DensityMatrix::from_columns`] but admits exact zeros. Sampled
    /// joint tables sit on the faces of their polytope and need this.
    pub fn from_columns_nonnegative(kind: DensityKind, columns: Vec<Vec<f64>>) -> Result<Self> {
        Self::build(kind, columns, false)
    }

    /// Row-major convenience constructor, mostly for small fixtures.
    pub fn from_rows(kind: DensityKind, rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        if n_rows == 0 {
            return Err(Error::Dimension("density matrix needs at least one row".into()));
        }
        let n_cols = rows[0].len();
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let columns = (0..n_cols)
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        Self::from_columns(kind, columns)
    }

    fn build(kind: DensityKind, columns: Vec<Vec<f64>>, strict: bool) -> Result<Self> {
        let cols = columns.len();
        if cols == 0 {
            return Err(Error::Dimension("density matrix needs at least one column".into()));
        }
        let rows = columns[0].len();
        if rows == 0 {
            return Err(Error::Dimension("density matrix needs at least one row".into()));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (j, col) in columns.into_iter().enumerate() {
            if col.len() != rows {
                return Err(Error::Dimension(format!(
                    "column {j} has {} entries, expected {rows}",
                    col.len()
                )));
            }
            data.extend(col);
        }
        let m = DensityMatrix {
            rows,
            cols,
            data,
            kind,
            strictly_positive: strict,
            outcome_labels: (0..rows).map(|i| i.to_string()).collect(),
            type_labels: (0..cols).map(TypeLabel::Index).collect(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for j in 0..self.cols {
            let col = self.column(j);
            for (i, &v) in col.iter().enumerate() {
                let ok = if self.strictly_positive {
                    v.is_finite() && v > MIN_ENTRY
                } else {
                    v.is_finite() && v >= 0.0
                };
                if !ok {
                    return Err(Error::InvalidValue(format!("entry ({i}, {j}) = {v}")));
                }
            }
            if self.kind == DensityKind::Discrete {
                let s: f64 = col.iter().sum();
                if (s - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::InvalidValue(format!(
                        "column {j} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_outcome_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::Dimension(format!(
                "{} outcome labels for {} rows",
                labels.len(),
                self.rows
            )));
        }
        self.outcome_labels = labels;
        Ok(self)
    }

    pub fn with_type_labels(mut self, labels: Vec<TypeLabel>) -> Result<Self> {
        if labels.len() != self.cols {
            return Err(Error::Dimension(format!(
                "{} type labels for {} columns",
                labels.len(),
                self.cols
            )));
        }
        self.type_labels = labels;
        Ok(self)
    }

    pub fn n_outcomes(&self) -> usize {
        self.rows
    }

    pub fn n_types(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> DensityKind {
        self.kind
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.strictly_positive
    }

    pub fn outcome_labels(&self) -> &[String] {
        &self.outcome_labels
    }

    pub fn type_labels(&self) -> &[TypeLabel] {
        &self.type_labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Column-major backing storage.
    pub fn as_column_major(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    /// Sub-matrix keeping the given columns (in the given order) and their labels.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        let mut labels = Vec::with_capacity(idx.len());
        for &j in idx {
            if j >= self.cols {
                return Err(Error::Dimension(format!("column {j} out of range")));
            }
            data.extend_from_slice(self.column(j));
            labels.push(self.type_labels[j].clone());
        }
        if idx.is_empty() {
            return Err(Error::Dimension("empty column selection".into()));
        }
        Ok(DensityMatrix {
            rows: self.rows,
            cols: idx.len(),
            data,
            kind: self.kind,
            strictly_positive: self.strictly_positive,
            outcome_labels: self.outcome_labels.clone(),
            type_labels: labels,
        })
    }

    /// Multiplies row `i` by `scale[i]`. The result is a continuous-kind
    /// matrix since columns no longer sum to one.
    pub fn scale_rows(&self, scale: &[f64]) -> Result<Self> {
        if scale.len() != self.rows {
            return Err(Error::Dimension("row scale length".into()));
        }
        if scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidValue("row scales must be positive".into()));
        }
        let mut out = self.clone();
        for col in out.data.chunks_mut(self.rows) {
            for (v, s) in col.iter_mut().zip(scale) {
                *v *= s;
            }
        }
        out.kind = DensityKind::Continuous;
        out.validate()?;
        Ok(out)
    }
}

/// Observation counts per outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountVector(Vec<u64>);

impl CountVector {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Dimension("empty count vector".into()));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Degenerate("all counts are zero".into()));
        }
        Ok(CountVector(counts))
    }

    /// One count per observation, as in the continuous-outcome case.
    pub fn ones(n: usize) -> Result<Self> {
        Self::new(vec![1; n])
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Indices of outcomes with a nonzero count.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] > 0).collect()
    }
}

/// Normalized frequencies, a point of the outcome simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector(Vec<f64>);

impl FrequencyVector {
    pub fn new(freqs: Vec<f64>) -> Result<Self> {
        check_simplex(&freqs, "frequency vector")?;
        Ok(FrequencyVector(freqs))
    }

    pub fn freqs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// sum_i beta_i ln beta_i with 0 ln 0 = 0.
    pub fn neg_entropy(&self) -> f64 {
        self.0.iter().filter(|&&b| b > 0.0).map(|&b| b * b.ln()).sum()
    }
}

/// A prior over the latent types: a point of the (J-1)-simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior(Vec<f64>);

impl Prior {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, "prior")?;
        Ok(Prior(weights))
    }

    pub fn uniform(n_types: usize) -> Result<Self> {
        if n_types == 0 {
            return Err(Error::Dimension("prior over zero types".into()));
        }
        Ok(Prior(vec![1.0 / n_types as f64; n_types]))
    }

    pub fn vertex(n_types: usize, j: usize) -> Result<Self> {
        if j >= n_types {
            return Err(Error::Dimension(format!("vertex {j} of a {n_types}-type simplex")));
        }
        let mut w = vec![0.0; n_types];
        w[j] = 1.0;
        Ok(Prior(w))
    }

    /// Wraps iterates produced internally, which sum to one up to rounding.
    pub(crate) fn from_iterate(weights: Vec<f64>) -> Self {
        Prior(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j] > 0.0).collect()
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.0
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Dimension(format!("empty {what}")));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidValue(format!("{what} entry {i} = {x}")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidValue(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// The I x J matrix of posterior type probabilities `h_ij`, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PosteriorMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn n_outcomes(&self) -> usize {
        self.rows
    }

    pub fn n_types(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }
}

// ---------------------------------------------------------------------------
// Deterministic kernels shared with the solver.

/// `out_i = sum_j w_j F_ij` over a column-major block with `rows` rows.
pub(crate) fn mat_vec(data: &[f64], rows: usize, w: &[f64]) -> Vec<f64> {
    debug_assert_eq!(data.len(), rows * w.len());
    let partials: Vec<Vec<f64>> = w
        .par_chunks(CHUNK)
        .zip(data.par_chunks(CHUNK * rows))
        .map(|(wc, block)| {
            let mut acc = vec![0.0; rows];
            for (&wj, col) in wc.iter().zip(block.chunks_exact(rows)) {
                if wj == 0.0 {
                    continue;
                }
                for (a, &f) in acc.iter_mut().zip(col) {
                    *a += wj * f;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; rows];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// `out_j = sum_i r_i F_ij` for every column.
pub(crate) fn col_dots(data: &[f64], rows: usize, r: &[f64]) -> Vec<f64> {
    debug_assert_eq!(r.len(), rows);
    data.par_chunks(rows)
        .with_min_len(CHUNK)
        .map(|col| col.iter().zip(r).map(|(f, x)| f * x).sum())
        .collect()
}

fn check_dims(f: &DensityMatrix, n_types: usize, n_outcomes: Option<usize>) -> Result<()> {
    if f.n_types() != n_types {
        return Err(Error::Dimension(format!(
            "prior has {n_types} types, density matrix has {}",
            f.n_types()
        )));
    }
    if let Some(n) = n_outcomes {
        if n != f.n_outcomes() {
            return Err(Error::Dimension(format!(
                "data has {n} outcomes, density matrix has {}",
                f.n_outcomes()
            )));
        }
    }
    Ok(())
}

/// Residual weights `beta_i / tau_i` with zero-frequency rows set to zero.
fn ratio_weights(beta: &[f64], tau: &[f64]) -> Result<Vec<f64>> {
    beta.iter()
        .zip(tau)
        .enumerate()
        .map(|(i, (&b, &t))| {
            if b == 0.0 {
                Ok(0.0)
            } else if t > 0.0 {
                Ok(b / t)
            } else {
                Err(Error::ZeroMarginal(i))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Operations.

pub fn normalize_counts(b: &CountVector) -> Result<FrequencyVector> {
    let total = b.total();
    if total == 0 {
        return Err(Error::Degenerate("all counts are zero".into()));
    }
    let t = total as f64;
    Ok(FrequencyVector(b.counts().iter().map(|&c| c as f64 / t).collect()))
}

/// `tau_i = sum_j F_ij pi_j`.
pub fn mixture_marginal(f: &DensityMatrix, pi: &Prior) -> Result<Vec<f64>> {
    check_dims(f, pi.len(), None)?;
    Ok(mat_vec(&f.data, f.rows, pi.weights()))
}

/// Bayes' rule applied row by row: `h_ij = F_ij pi_j / tau_i`.
pub fn posterior_matrix(f: &DensityMatrix, pi: &Prior) -> Result<PosteriorMatrix> {
    let tau = mixture_marginal(f, pi)?;
    if let Some(i) = tau.iter().position(|&t| t <= 0.0) {
        return Err(Error::ZeroMarginal(i));
    }
    let mut data = Vec::with_capacity(f.data.len());
    for (j, &p) in pi.weights().iter().enumerate() {
        let col = f.column(j);
        data.extend(col.iter().zip(&tau).map(|(&fij, &t)| fij * p / t));
    }
    Ok(PosteriorMatrix { rows: f.rows, cols: f.cols, data })
}

/// One application of the posterior belief operator,
/// `h_j(pi) = pi_j sum_i beta_i F_ij / tau_i`.
///
/// Faces of the simplex are invariant: a zero weight stays exactly zero.
pub fn bayes_update(f: &DensityMatrix, beta: &FrequencyVector, pi: &Prior) -> Result<Prior> {
    check_dims(f, pi.len(), Some(beta.len()))?;
    let tau = mixture_marginal(f, pi)?;
    let r = ratio_weights(beta.freqs(), &tau)?;
    let g = col_dots(&f.data, f.rows, &r);
    Ok(Prior(
        pi.weights().iter().zip(g).map(|(&p, gj)| p * gj).collect(),
    ))
}

/// Discrepancy `d_j(pi) = sum_i beta_i (F_ij / tau_i - 1)`, the gradient of
/// the normalized log-likelihood minus one.
pub fn discrepancy(f: &DensityMatrix, beta: &FrequencyVector, pi: &Prior) -> Result<Vec<f64>> {
    check_dims(f, pi.len(), Some(beta.len()))?;
    let tau = mixture_marginal(f, pi)?;
    discrepancy_from_marginal(f, beta, &tau)
}

/// Discrepancy given an already computed mixture marginal.
pub fn discrepancy_from_marginal(
    f: &DensityMatrix,
    beta: &FrequencyVector,
    tau: &[f64],
) -> Result<Vec<f64>> {
    if tau.len() != f.n_outcomes() || beta.len() != f.n_outcomes() {
        return Err(Error::Dimension("marginal / frequency length".into()));
    }
    let r = ratio_weights(beta.freqs(), tau)?;
    let bsum: f64 = beta.freqs().iter().sum();
    Ok(col_dots(&f.data, f.rows, &r).into_iter().map(|g| g - bsum).collect())
}

/// `L(pi) = sum_i b_i ln tau_i`. Returns negative infinity when an observed
/// outcome has zero mixture probability.
pub fn log_likelihood(f: &DensityMatrix, b: &CountVector, pi: &Prior) -> Result<f64> {
    check_dims(f, pi.len(), Some(b.len()))?;
    let tau = mixture_marginal(f, pi)?;
    let mut l = 0.0;
    for (&c, &t) in b.counts().iter().zip(&tau) {
        if c == 0 {
            continue;
        }
        if t <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        l += c as f64 * t.ln();
    }
    Ok(l)
}

/// `L(pi) / sum_i b_i`, the form whose gradient is `d + 1`.
pub fn log_likelihood_normalized(f: &DensityMatrix, b: &CountVector, pi: &Prior) -> Result<f64> {
    Ok(log_likelihood(f, b, pi)? / b.total() as f64)
}

/// `sum_i beta_i ln beta_i - sum_i beta_i ln tau_i` evaluated from the
/// marginal; the normalized log-likelihood of a frequency vector.
pub fn log_likelihood_from_marginal(beta: &FrequencyVector, tau: &[f64]) -> f64 {
    let mut l = 0.0;
    for (&b, &t) in beta.freqs().iter().zip(tau) {
        if b > 0.0 {
            if t <= 0.0 {
                return f64::NEG_INFINITY;
            }
            l += b * t.ln();
        }
    }
    l
}

/// `D_KL(beta || tau) = sum_i beta_i ln(beta_i / tau_i)` with `0 ln 0 = 0`.
pub fn kl_divergence(beta: &FrequencyVector, tau: &[f64]) -> Result<f64> {
    if tau.len() != beta.len() {
        return Err(Error::Dimension("KL arguments differ in length".into()));
    }
    if let Some((i, t)) = tau.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::InvalidValue(format!("tau[{i}] = {t}")));
    }
    let mut kl = 0.0;
    for (&b, &t) in beta.freqs().iter().zip(tau) {
        if b > 0.0 {
            if t == 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += b * (b / t).ln();
        }
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gk_rows() -> DensityMatrix {
        // Goalkeepers: outcome 0 = miss, outcome 1 = save.
        DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.95, 0.1], vec![0.05, 0.9]])
            .unwrap()
    }

    fn save_first() -> DensityMatrix {
        DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.05, 0.9], vec![0.95, 0.1]])
            .unwrap()
    }

    #[test]
    fn normalize_counts_examples() {
        let f = normalize_counts(&CountVector::new(vec![1, 1]).unwrap()).unwrap();
        assert_eq!(f.freqs(), &[0.5, 0.5]);
        let f = normalize_counts(&CountVector::new(vec![4, 96]).unwrap()).unwrap();
        assert_abs_diff_eq!(f.freqs()[0], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(f.freqs()[1], 0.96, epsilon = 1e-15);
        let b = CountVector::new(vec![1, 0, 0, 0, 2, 3, 1, 0, 0, 0, 1]).unwrap();
        let f = normalize_counts(&b).unwrap();
        for (x, c) in f.freqs().iter().zip(b.counts()) {
            assert_abs_diff_eq!(*x, *c as f64 / 8.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn all_zero_counts_rejected() {
        assert!(matches!(CountVector::new(vec![0, 0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mixture_marginal_examples() {
        let f = save_first();
        let tau = mixture_marginal(&f, &Prior::vertex(2, 0).unwrap()).unwrap();
        assert_eq!(tau, vec![0.05, 0.95]);
        let tau = mixture_marginal(&f, &Prior::new(vec![0.471, 0.529]).unwrap()).unwrap();
        assert_abs_diff_eq!(tau[0], 0.05 * 0.471 + 0.9 * 0.529, epsilon = 1e-15);
        assert_abs_diff_eq!(tau[0], 0.4997, epsilon = 1e-4);
        assert_abs_diff_eq!(tau[1], 0.5003, epsilon = 1e-4);
        let g = DensityMatrix::from_rows(
            DensityKind::Discrete,
            &[vec![0.2, 0.5, 0.7], vec![0.8, 0.5, 0.3]],
        )
        .unwrap();
        let tau = mixture_marginal(&g, &Prior::uniform(3).unwrap()).unwrap();
        assert_abs_diff_eq!(tau[0], (0.2 + 0.5 + 0.7) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tau[1], (0.8 + 0.5 + 0.3) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn mixture_marginal_dimension_mismatch() {
        let err = mixture_marginal(&gk_rows(), &Prior::uniform(3).unwrap());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn posterior_examples() {
        let f = save_first();
        let h = posterior_matrix(&f, &Prior::vertex(2, 1).unwrap()).unwrap();
        assert_eq!(h.column(1), &[1.0, 1.0]);
        let h = posterior_matrix(&f, &Prior::uniform(2).unwrap()).unwrap();
        assert_abs_diff_eq!(h.get(0, 0), 0.05 / 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(h.get(0, 0), 0.0526, epsilon = 1e-4);
        assert_abs_diff_eq!(h.get(0, 1), 0.9474, epsilon = 1e-4);
        let flat = DensityMatrix::from_rows(
            DensityKind::Discrete,
            &[vec![0.3, 0.3, 0.3], vec![0.7, 0.7, 0.7]],
        )
        .unwrap();
        let pi = Prior::new(vec![0.2, 0.5, 0.3]).unwrap();
        let h = posterior_matrix(&flat, &pi).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(h.get(i, j), pi.weights()[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn posterior_rejects_zero_marginal() {
        let f = DensityMatrix::from_columns_nonnegative(
            DensityKind::Discrete,
            vec![vec![0.0, 1.0], vec![0.5, 0.5]],
        )
        .unwrap();
        let err = posterior_matrix(&f, &Prior::vertex(2, 0).unwrap());
        assert!(matches!(err, Err(Error::ZeroMarginal(0))));
    }

    #[test]
    fn bayes_update_examples() {
        let f = gk_rows();
        let beta = FrequencyVector::new(vec![0.5, 0.5]).unwrap();
        for j in 0..2 {
            let v = Prior::vertex(2, j).unwrap();
            assert_eq!(bayes_update(&f, &beta, &v).unwrap(), v);
        }
        let p = bayes_update(&f, &beta, &Prior::new(vec![0.471, 0.529]).unwrap()).unwrap();
        assert_abs_diff_eq!(p.weights()[0], 0.471, epsilon = 1e-3);
        // Scalar evaluation of the update at (0.25, 0.75).
        let t_miss = 0.95 * 0.25 + 0.1 * 0.75;
        let t_save = 0.05 * 0.25 + 0.9 * 0.75;
        let h1 = 0.25 * (0.5 * 0.95 / t_miss + 0.5 * 0.05 / t_save);
        let p = bayes_update(&f, &beta, &Prior::new(vec![0.25, 0.75]).unwrap()).unwrap();
        assert_abs_diff_eq!(p.weights()[0], h1, epsilon = 1e-15);
        assert_abs_diff_eq!(p.weights()[0], 0.38909091, epsilon = 1e-8);
    }

    #[test]
    fn discrepancy_examples() {
        let f = gk_rows();
        let beta = FrequencyVector::new(vec![0.04, 0.96]).unwrap();
        let d = discrepancy(&f, &beta, &Prior::vertex(2, 1).unwrap()).unwrap();
        assert_abs_diff_eq!(d[0], 0.04 * 8.5 + 0.96 * (0.05 / 0.9 - 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(d[0], -0.567, epsilon = 1e-3);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-15);

        let beta = FrequencyVector::new(vec![0.5, 0.5]).unwrap();
        let interior = Prior::new(vec![0.4 / 0.85, 0.45 / 0.85]).unwrap();
        let d = discrepancy(&f, &beta, &interior).unwrap();
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-12);

        let flat = DensityMatrix::from_rows(
            DensityKind::Discrete,
            &[vec![0.3, 0.3], vec![0.7, 0.7]],
        )
        .unwrap();
        let d = discrepancy(&flat, &beta, &Prior::new(vec![0.9, 0.1]).unwrap()).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn log_likelihood_examples() {
        let one = DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.25], vec![0.75]])
            .unwrap();
        let b = CountVector::new(vec![3, 5]).unwrap();
        let l = log_likelihood(&one, &b, &Prior::uniform(1).unwrap()).unwrap();
        assert_abs_diff_eq!(l, 3.0 * 0.25f64.ln() + 5.0 * 0.75f64.ln(), epsilon = 1e-14);

        let f = gk_rows();
        let b = CountVector::new(vec![1, 1]).unwrap();
        let pi = Prior::new(vec![0.471, 0.529]).unwrap();
        let expect = (0.95 * 0.471 + 0.1 * 0.529f64).ln() + (0.05 * 0.471 + 0.9 * 0.529f64).ln();
        assert_abs_diff_eq!(log_likelihood(&f, &b, &pi).unwrap(), expect, epsilon = 1e-14);
        assert_abs_diff_eq!(
            log_likelihood_normalized(&f, &b, &pi).unwrap(),
            expect / 2.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn log_likelihood_sentinel() {
        let f = DensityMatrix::from_columns_nonnegative(
            DensityKind::Discrete,
            vec![vec![0.0, 1.0], vec![0.5, 0.5]],
        )
        .unwrap();
        let b = CountVector::new(vec![1, 1]).unwrap();
        let l = log_likelihood(&f, &b, &Prior::vertex(2, 0).unwrap()).unwrap();
        assert_eq!(l, f64::NEG_INFINITY);
    }

    #[test]
    fn kl_examples() {
        let beta = FrequencyVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&beta, &[0.3, 0.7]).unwrap(), 0.0);
        let beta = FrequencyVector::new(vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            kl_divergence(&beta, &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(kl_divergence(&beta, &[-0.5, 1.5]).is_err());
    }

    #[test]
    fn matrix_validation() {
        assert!(DensityMatrix::from_rows(DensityKind::Discrete, &[vec![0.5], vec![0.6]]).is_err());
        assert!(DensityMatrix::from_rows(DensityKind::Discrete, &[vec![1e-301], vec![1.0]])
            .is_err());
        assert!(DensityMatrix::from_rows(DensityKind::Continuous, &[vec![0.0], vec![2.0]])
            .is_err());
        assert!(DensityMatrix::from_rows(DensityKind::Continuous, &[vec![3.0], vec![2.0]]).is_ok());
        assert!(Prior::new(vec![0.5, 0.6]).is_err());
        assert!(FrequencyVector::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn kernels_are_chunk_stable() {
        // Wide enough to span several chunks.
        let j = 5 * CHUNK + 17;
        let cols: Vec<Vec<f64>> = (0..j)
            .map(|k| {
                let a = 0.1 + 0.8 * (k as f64 / j as f64);
                vec![a, 1.0 - a]
            })
            .collect();
        let f = DensityMatrix::from_columns(DensityKind::Discrete, cols).unwrap();
        let pi = Prior::uniform(j).unwrap();
        let a = mixture_marginal(&f, &pi).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| mixture_marginal(&f, &pi).unwrap());
        assert_eq!(a, b);
    }
}
