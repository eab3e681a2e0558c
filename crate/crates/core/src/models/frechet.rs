//! Sampling joint tables with fixed margins by 2x2 switch moves.
//!
//! Probability margins are lifted to integer tables in `M` mass units so
//! every move preserves the margins exactly. The chain starts at the rounded
//! independence table.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    /// `+1/-1/-1/+1` on the chosen 2x2 submatrix.
    Unit,
    /// `+t/-t/-t/+t` with `t` drawn over its whole feasible range.
    Line,
}

/// Stationary distribution of a table chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Uniform,
    /// Multivariate hypergeometric: `P(T) ∝ 1 / prod T_ij!`.
    Hypergeometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrechetSamplerConfig {
    pub mass_units: u64,
    /// Raise the unit count per margin pair (by powers of ten) until the
    /// smallest marginal cell holds at least `min_cell_units`.
    pub adaptive_units: bool,
    pub min_cell_units: u64,
    pub burn_in: usize,
    pub thin: usize,
    pub samples_per_pair: usize,
    pub seed: u64,
    pub stream: u64,
    pub move_kind: MoveKind,
}

impl Default for FrechetSamplerConfig {
    fn default() -> Self {
        FrechetSamplerConfig {
            mass_units: 10_000,
            adaptive_units: true,
            min_cell_units: 1000,
            burn_in: 5000,
            thin: 500,
            samples_per_pair: 25,
            seed: 0,
            stream: 0,
            move_kind: MoveKind::Line,
        }
    }
}

impl FrechetSamplerConfig {
    pub fn for_stream(&self, stream: u64) -> Self {
        FrechetSamplerConfig { stream, ..self.clone() }
    }

    fn validate(&self, cells: usize) -> Result<()> {
        if self.burn_in == 0 || self.thin == 0 || self.samples_per_pair == 0 {
            return Err(Error::InvalidValue("burn_in, thin and samples_per_pair must be at least 1".into()));
        }
        if self.mass_units < cells as u64 {
            return Err(Error::InvalidValue(format!(
                "mass_units {} below the table size {cells}",
                self.mass_units
            )));
        }
        Ok(())
    }

    /// Unit count actually used for the given margins.
    pub fn effective_units(&self, row: &[f64], col: &[f64]) -> u64 {
        let mut m = self.mass_units;
        if self.adaptive_units {
            let pmin = row.iter().chain(col).copied().filter(|&x| x > 0.0).fold(1.0, f64::min);
            while (pmin * m as f64) < self.min_cell_units as f64 && m < 1_000_000_000_000_000 {
                m *= 10;
            }
        }
        m
    }
}

/// Largest-remainder rounding of a pmf to integers summing to `m`.
pub fn round_marginal(p: &[f64], m: u64) -> Result<Vec<u64>> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || !(s > 0.0) {
        return Err(Error::InvalidValue("marginal must be a nonnegative pmf".into()));
    }
    let scaled: Vec<f64> = p.iter().map(|&x| x / s * m as f64).collect();
    let mut units: Vec<u64> = scaled.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = units.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(m.saturating_sub(assigned) as usize) {
        units[k] += 1;
    }
    if let Some(cell) = (0..p.len()).find(|&k| p[k] > 0.0 && units[k] == 0) {
        return Err(Error::InfeasibleRounding { cell, mass_units: m });
    }
    Ok(units)
}

/// Integer table with fixed margins, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntTable {
    rows: usize,
    cols: usize,
    cells: Vec<u64>,
}

impl IntTable {
    pub fn new(rows: usize, cols: usize, cells: Vec<u64>) -> Result<Self> {
        if rows == 0 || cols == 0 || cells.len() != rows * cols {
            return Err(Error::Dimension(format!("{} cells for a {rows}x{cols} table", cells.len())));
        }
        Ok(IntTable { rows, cols, cells })
    }

    /// Integer table near `r_i c_j / M` with the given margins exactly.
    pub fn independence(row: &[u64], col: &[u64]) -> Result<Self> {
        let total: u64 = row.iter().sum();
        if total != col.iter().sum::<u64>() {
            return Err(Error::InvalidValue("margins have different totals".into()));
        }
        if total == 0 {
            return Err(Error::Degenerate("empty margins".into()));
        }
        let (r, c) = (row.len(), col.len());
        let mut cells = vec![0u64; r * c];
        for i in 0..r {
            for j in 0..c {
                cells[i * c + j] = ((row[i] as u128 * col[j] as u128) / total as u128) as u64;
            }
        }
        // Northwest-corner fill of the remaining deficits; each deficit is
        // below the table width, so cells move by a few units at most.
        let mut dr: Vec<u64> = (0..r).map(|i| row[i] - cells[i * c..(i + 1) * c].iter().sum::<u64>()).collect();
        let mut dc: Vec<u64> = (0..c).map(|j| col[j] - (0..r).map(|i| cells[i * c + j]).sum::<u64>()).collect();
        let (mut i, mut j) = (0, 0);
        while i < r && j < c {
            let t = dr[i].min(dc[j]);
            cells[i * c + j] += t;
            dr[i] -= t;
            dc[j] -= t;
            if dr[i] == 0 {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntTable::new(r, c, cells)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[u64] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.cells[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.cells.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j)).sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }
}

/// Markov chain on the fiber of an integer table.
pub struct TableChain {
    table: IntTable,
    target: Target,
    kind: MoveKind,
    rng: ChaCha8Rng,
    live_rows: Vec<usize>,
    live_cols: Vec<usize>,
    steps: u64,
    #[cfg(debug_assertions)]
    margins: (Vec<u64>, Vec<u64>),
}

impl TableChain {
    pub fn new(table: IntTable, target: Target, kind: MoveKind, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let live_rows = table.row_sums().iter().enumerate().filter(|(_, &s)| s > 0).map(|(i, _)| i).collect();
        let live_cols = table.col_sums().iter().enumerate().filter(|(_, &s)| s > 0).map(|(j, _)| j).collect();
        TableChain {
            #[cfg(debug_assertions)]
            margins: (table.row_sums(), table.col_sums()),
            table,
            target,
            kind,
            rng,
            live_rows,
            live_cols,
            steps: 0,
        }
    }

    pub fn table(&self) -> &IntTable {
        &self.table
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn pick_two(rng: &mut ChaCha8Rng, from: &[usize]) -> (usize, usize) {
        let a = rng.random_range(0..from.len());
        let mut b = rng.random_range(0..from.len() - 1);
        if b >= a {
            b += 1;
        }
        (from[a], from[b])
    }

    /// One proposed switch move (possibly rejected or null).
    pub fn step(&mut self) {
        self.steps += 1;
        if self.live_rows.len() < 2 || self.live_cols.len() < 2 {
            return;
        }
        let (i, j) = Self::pick_two(&mut self.rng, &self.live_rows);
        let (k, l) = Self::pick_two(&mut self.rng, &self.live_cols);
        let c = self.table.cols;
        let (ik, il, jk, jl) = (i * c + k, i * c + l, j * c + k, j * c + l);
        let cells = &self.table.cells;
        let (a, b, cc, d) = (cells[ik], cells[il], cells[jk], cells[jl]);
        // Move by t: a+t, d+t, b-t, cc-t with t in [-min(a,d), min(b,cc)].
        let lo = a.min(d);
        let hi = b.min(cc);
        let t: i64 = match (self.kind, self.target) {
            (MoveKind::Unit, Target::Uniform) => {
                let up = self.rng.random_bool(0.5);
                if up && hi >= 1 {
                    1
                } else if !up && lo >= 1 {
                    -1
                } else {
                    0
                }
            }
            (MoveKind::Unit, Target::Hypergeometric) => {
                let up = self.rng.random_bool(0.5);
                let u: f64 = self.rng.random();
                if up && hi >= 1 {
                    let ratio = (b as f64 * cc as f64) / ((a + 1) as f64 * (d + 1) as f64);
                    if u < ratio { 1 } else { 0 }
                } else if !up && lo >= 1 {
                    let ratio = (a as f64 * d as f64) / ((b + 1) as f64 * (cc + 1) as f64);
                    if u < ratio { -1 } else { 0 }
                } else {
                    0
                }
            }
            (MoveKind::Line, Target::Uniform) => {
                self.rng.random_range(-(lo as i64)..=hi as i64)
            }
            (MoveKind::Line, Target::Hypergeometric) => {
                sample_hypergeometric_line(&mut self.rng, a, b, cc, d)
            }
        };
        if t != 0 {
            let cells = &mut self.table.cells;
            cells[ik] = (cells[ik] as i64 + t) as u64;
            cells[jl] = (cells[jl] as i64 + t) as u64;
            cells[il] = (cells[il] as i64 - t) as u64;
            cells[jk] = (cells[jk] as i64 - t) as u64;
            #[cfg(debug_assertions)]
            {
                debug_assert_eq!(self.table.row_sums(), self.margins.0);
                debug_assert_eq!(self.table.col_sums(), self.margins.1);
            }
        }
    }

    pub fn advance(&mut self, n: usize) {
        for _ in 0..n {
            self.step();
        }
    }
}

/// Exact draw of `t` from the hypergeometric conditional along a switch line.
fn sample_hypergeometric_line(rng: &mut ChaCha8Rng, a: u64, b: u64, c: u64, d: u64) -> i64 {
    let lo = -(a.min(d) as i64);
    let hi = b.min(c) as i64;
    if lo == hi {
        return 0;
    }
    // log w(t+1) - log w(t) = ln((b-t)(c-t)) - ln((a+t+1)(d+t+1))
    let n = (hi - lo + 1) as usize;
    let mut logw = Vec::with_capacity(n);
    let mut acc = 0.0;
    logw.push(acc);
    for t in lo..hi {
        acc += ((b as i64 - t) as f64).ln() + ((c as i64 - t) as f64).ln()
            - ((a as i64 + t + 1) as f64).ln()
            - ((d as i64 + t + 1) as f64).ln();
        logw.push(acc);
    }
    let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|x| (x - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return lo + k as i64;
        }
        u -= wk;
    }
    hi
}

/// One sampled joint distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub rows: usize,
    pub cols: usize,
    /// Row-major probabilities.
    pub cells: Vec<f64>,
    pub units: Vec<u64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub mass_units: u64,
    /// Chain step at which the table was recorded.
    pub step: u64,
}

impl JointTable {
    fn from_int(t: &IntTable, step: u64) -> Self {
        let m = t.total();
        let mf = m as f64;
        JointTable {
            rows: t.rows,
            cols: t.cols,
            cells: t.cells.iter().map(|&u| u as f64 / mf).collect(),
            units: t.cells.clone(),
            row_marginal: t.row_sums().iter().map(|&u| u as f64 / mf).collect(),
            col_marginal: t.col_sums().iter().map(|&u| u as f64 / mf).collect(),
            mass_units: m,
            step,
        }
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }
}

/// Samples `samples_per_pair` tables with the given margins.
pub fn frechet_sample_tables(
    row: &[f64],
    col: &[f64],
    cfg: &FrechetSamplerConfig,
) -> Result<Vec<JointTable>> {
    cfg.validate(row.len() * col.len())?;
    if row.iter().chain(col).any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidValue("margins must be strictly positive".into()));
    }
    let m = cfg.effective_units(row, col);
    let r = round_marginal(row, m)?;
    let c = round_marginal(col, m)?;
    let start = IntTable::independence(&r, &c)?;
    let mut chain = TableChain::new(start, Target::Uniform, cfg.move_kind, cfg.seed, cfg.stream);
    chain.advance(cfg.burn_in);
    let mut out = Vec::with_capacity(cfg.samples_per_pair);
    for _ in 0..cfg.samples_per_pair {
        chain.advance(cfg.thin);
        out.push(JointTable::from_int(chain.table(), chain.steps()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{binomial_pmf_vec, independent_bivariate_column};

    #[test]
    fn rounding_preserves_total() {
        let u = round_marginal(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 10).unwrap();
        assert_eq!(u.iter().sum::<u64>(), 10);
        assert_eq!(u, vec![4, 3, 3]);
        let e = round_marginal(&binomial_pmf_vec(4, 0.01).unwrap(), 10_000).unwrap_err();
        assert!(matches!(e, Error::InfeasibleRounding { cell: 3, .. }));
    }

    #[test]
    fn adaptive_units_cover_tails() {
        let cfg = FrechetSamplerConfig::default();
        let p = binomial_pmf_vec(4, 0.01).unwrap();
        let m = cfg.effective_units(&p, &p);
        assert!(m as f64 * 1e-8 >= 1000.0);
        let q = binomial_pmf_vec(4, 0.5).unwrap();
        assert_eq!(cfg.effective_units(&q, &q), 100_000);
    }

    #[test]
    fn independence_table_has_exact_margins() {
        let r = round_marginal(&binomial_pmf_vec(4, 0.3).unwrap(), 997).unwrap();
        let c = round_marginal(&binomial_pmf_vec(4, 0.6).unwrap(), 997).unwrap();
        let t = IntTable::independence(&r, &c).unwrap();
        assert_eq!(t.row_sums(), r);
        assert_eq!(t.col_sums(), c);
    }

    #[test]
    fn independence_point_matches_product_column() {
        let (pa, pb) = (0.3, 0.65);
        let fa = binomial_pmf_vec(4, pa).unwrap();
        let fb = binomial_pmf_vec(4, pb).unwrap();
        let m = 1_000_000;
        let t = IntTable::independence(&round_marginal(&fa, m).unwrap(), &round_marginal(&fb, m).unwrap()).unwrap();
        let col = independent_bivariate_column(4, pa, pb).unwrap();
        for (u, x) in t.cells().iter().zip(&col) {
            assert!((*u as f64 / m as f64 - x).abs() < 1e-4);
        }
    }

    #[test]
    fn two_by_two_segment() {
        for kind in [MoveKind::Unit, MoveKind::Line] {
            let cfg = FrechetSamplerConfig {
                mass_units: 100,
                adaptive_units: false,
                burn_in: 100,
                thin: 10,
                samples_per_pair: 4000,
                move_kind: kind,
                seed: 7,
                ..Default::default()
            };
            let tabs = frechet_sample_tables(&[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
            let mut lo: f64 = 1.0;
            let mut hi: f64 = 0.0;
            let mut mean = 0.0;
            for t in &tabs {
                assert_eq!(t.units[0] + t.units[1], 50);
                assert_eq!(t.units[0] + t.units[2], 50);
                lo = lo.min(t.cells[1]);
                hi = hi.max(t.cells[1]);
                mean += t.cells[1];
            }
            mean /= tabs.len() as f64;
            assert!(lo >= 0.0 && hi <= 0.5);
            assert!((mean - 0.25).abs() < 0.02, "{kind:?} mean {mean}");
        }
    }

    #[test]
    fn chain_is_reproducible() {
        let cfg = FrechetSamplerConfig { samples_per_pair: 5, ..Default::default() };
        let p = binomial_pmf_vec(4, 0.2).unwrap();
        let q = binomial_pmf_vec(4, 0.7).unwrap();
        let a = frechet_sample_tables(&p, &q, &cfg).unwrap();
        let b = frechet_sample_tables(&p, &q, &cfg).unwrap();
        assert_eq!(a, b);
        let c = frechet_sample_tables(&p, &q, &cfg.for_stream(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hypergeometric_line_matches_closed_form() {
        // 2x2 table with margins (2,2)/(2,2): P(off-diagonal = k) ∝ 1/(k!^2 (2-k)!^2).
        let start = IntTable::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        for kind in [MoveKind::Unit, MoveKind::Line] {
            let mut ch = TableChain::new(start.clone(), Target::Hypergeometric, kind, 3, 0);
            let mut freq = [0usize; 3];
            for _ in 0..60_000 {
                ch.advance(3);
                freq[ch.table().get(0, 1) as usize] += 1;
            }
            let w = [1.0 / 4.0, 1.0, 1.0 / 4.0];
            let tot: f64 = w.iter().sum();
            for k in 0..3 {
                let p = freq[k] as f64 / 60_000.0;
                assert!((p - w[k] / tot).abs() < 0.01, "{kind:?} {k} {p}");
            }
        }
    }

    #[test]
    fn zero_margins_restrict_the_chain() {
        let start = IntTable::new(3, 2, vec![2, 1, 0, 0, 1, 2]).unwrap();
        let mut ch = TableChain::new(start, Target::Uniform, MoveKind::Line, 1, 0);
        ch.advance(1000);
        assert_eq!(ch.table().get(1, 0) + ch.table().get(1, 1), 0);
        assert_eq!(ch.table().row_sums(), vec![3, 0, 3]);
    }
}
