//! Brute-force references for the test suites. Nothing here calls the
//! solver or the mixture kernels; every quantity is recomputed directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{CountVector, DensityMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub argmax: Vec<f64>,
    /// Normalized log-likelihood at `argmax`.
    pub max_log_likelihood: f64,
    pub step: f64,
    pub evaluated: u64,
}

fn freqs(b: &CountVector) -> Vec<f64> {
    let n = b.total() as f64;
    b.counts().iter().map(|&c| c as f64 / n).collect()
}

fn loglik(f: &DensityMatrix, beta: &[f64], pi: &[f64]) -> f64 {
    let mut l = 0.0;
    for (i, &bi) in beta.iter().enumerate() {
        if bi == 0.0 {
            continue;
        }
        let tau: f64 = pi.iter().enumerate().map(|(j, &p)| f.get(i, j) * p).sum();
        l += if tau > 0.0 { bi * tau.ln() } else { f64::NEG_INFINITY };
    }
    l
}

/// Evaluates the likelihood on every lattice point of the simplex with
/// spacing `step`.
pub fn grid_search_simplex(f: &DensityMatrix, b: &CountVector, step: f64) -> Result<OracleResult> {
    let j = f.n_types();
    if j > 4 {
        return Err(Error::TooLarge(format!("grid search supports at most 4 types, got {j}")));
    }
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidValue("step must lie in (0, 1e-2]".into()));
    }
    if b.len() != f.n_outcomes() {
        return Err(Error::Dimension("counts and density rows differ".into()));
    }
    let n = (1.0 / step).round() as u64;
    let beta = freqs(b);
    let mut best = (f64::NEG_INFINITY, vec![0.0; j]);
    let mut evaluated = 0;
    let mut parts = vec![0u64; j];
    fn rec(
        k: usize,
        left: u64,
        n: u64,
        parts: &mut Vec<u64>,
        visit: &mut dyn FnMut(&[u64]),
    ) {
        if k + 1 == parts.len() {
            parts[k] = left;
            visit(parts);
            return;
        }
        for v in 0..=left {
            parts[k] = v;
            rec(k + 1, left - v, n, parts, visit);
        }
    }
    let mut visit = |p: &[u64]| {
        let pi: Vec<f64> = p.iter().map(|&x| x as f64 / n as f64).collect();
        let l = loglik(f, &beta, &pi);
        evaluated += 1;
        if l > best.0 {
            best = (l, pi);
        }
    };
    rec(0, n, n, &mut parts, &mut visit);
    Ok(OracleResult { argmax: best.1, max_log_likelihood: best.0, step, evaluated })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointsJ2 {
    pub points: Vec<[f64; 2]>,
    /// Stability of each point (off-support discrepancy nonpositive).
    pub stable: Vec<bool>,
    /// Identical columns: every prior is a fixed point.
    pub continuum: bool,
}

/// `d_1` at `(t, 1 - t)` and the posterior map, computed directly.
fn d_and_h(f: &DensityMatrix, beta: &[f64], t: f64) -> ([f64; 2], [f64; 2]) {
    let mut g = [0.0; 2];
    for (i, &bi) in beta.iter().enumerate() {
        if bi == 0.0 {
            continue;
        }
        let tau = f.get(i, 0) * t + f.get(i, 1) * (1.0 - t);
        g[0] += bi * f.get(i, 0) / tau;
        g[1] += bi * f.get(i, 1) / tau;
    }
    ([g[0] - 1.0, g[1] - 1.0], [t * g[0], (1.0 - t) * g[1]])
}

/// All fixed points of the posterior map for two types.
pub fn enumerate_fixed_points_j2(f: &DensityMatrix, b: &CountVector, tol: f64) -> Result<FixedPointsJ2> {
    if f.n_types() != 2 {
        return Err(Error::Dimension("exactly two types required".into()));
    }
    let beta = freqs(b);
    let identical = (0..f.n_outcomes()).all(|i| beta[i] == 0.0 || (f.get(i, 0) - f.get(i, 1)).abs() <= 1e-15);
    if identical {
        return Ok(FixedPointsJ2 {
            points: vec![[1.0, 0.0], [0.0, 1.0]],
            stable: vec![true, true],
            continuum: true,
        });
    }
    let mut points = vec![[1.0, 0.0]];
    let d1 = |t: f64| d_and_h(f, &beta, t).0[0];
    let n = 10_000;
    let mut prev = (1e-9, d1(1e-9));
    for k in 1..=n {
        let t = if k == n { 1.0 - 1e-9 } else { k as f64 / n as f64 };
        let cur = (t, d1(t));
        if cur.1 == 0.0 || prev.1.signum() != cur.1.signum() {
            let (mut lo, mut hi) = (prev.0, cur.0);
            let slo = prev.1.signum();
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if d1(mid).signum() == slo && d1(mid) != 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            let (_, h) = d_and_h(f, &beta, t);
            if (h[0] - t).abs() <= tol && (h[1] - (1.0 - t)).abs() <= tol {
                points.push([t, 1.0 - t]);
            }
        }
        prev = cur;
    }
    points.push([0.0, 1.0]);
    points.sort_by(|a, b| b[0].total_cmp(&a[0]));
    let stable = points
        .iter()
        .map(|p| {
            let (d, _) = d_and_h(f, &beta, p[0]);
            if p[0] == 1.0 {
                d[1] <= 0.0
            } else if p[0] == 0.0 {
                d[0] <= 0.0
            } else {
                true
            }
        })
        .collect();
    Ok(FixedPointsJ2 { points, stable, continuum: false })
}

/// Every nonnegative integer table with the given margins, row-major.
pub fn enumerate_frechet_tables(row: &[u64], col: &[u64], limit: usize) -> Result<Vec<Vec<u64>>> {
    if row.iter().sum::<u64>() != col.iter().sum::<u64>() {
        return Err(Error::InvalidValue("margins have different totals".into()));
    }
    let (r, c) = (row.len(), col.len());
    let mut out = Vec::new();
    let mut cells = vec![0u64; r * c];
    let mut col_left = col.to_vec();

    #[allow(clippy::too_many_arguments)]
    fn fill(
        i: usize,
        j: usize,
        row_left: u64,
        row: &[u64],
        c: usize,
        cells: &mut Vec<u64>,
        col_left: &mut Vec<u64>,
        out: &mut Vec<Vec<u64>>,
        limit: usize,
    ) -> Result<()> {
        if i == row.len() {
            if col_left.iter().all(|&x| x == 0) {
                if out.len() >= limit {
                    return Err(Error::TooLarge(format!("more than {limit} tables")));
                }
                out.push(cells.clone());
            }
            return Ok(());
        }
        if j + 1 == c {
            // The last cell of a row is forced.
            if row_left > col_left[j] {
                return Ok(());
            }
            cells[i * c + j] = row_left;
            col_left[j] -= row_left;
            let next = row.get(i + 1).copied().unwrap_or(0);
            let res = fill(i + 1, 0, next, row, c, cells, col_left, out, limit);
            col_left[j] += row_left;
            return res;
        }
        for v in 0..=row_left.min(col_left[j]) {
            cells[i * c + j] = v;
            col_left[j] -= v;
            let res = fill(i, j + 1, row_left - v, row, c, cells, col_left, out, limit);
            col_left[j] += v;
            res?;
        }
        Ok(())
    }

    fill(0, 0, row.first().copied().unwrap_or(0), row, c, &mut cells, &mut col_left, &mut out, limit)?;
    Ok(out)
}
