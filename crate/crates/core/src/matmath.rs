//! Matching-matrix representation and the two feasibility projections.
//!
//! A [`MatchingMatrix`] carries a tag describing how its entries should be
//! read. Raw logits are exponentiated by the projections, nonnegative kinds
//! are read as weights or probabilities. Sinkhorn runs in the log domain on
//! the matrix padded to square with dummy rows or columns, then returns the
//! original block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Fill value for dummy rows/columns of nonnegative matrices, `exp(-10)`.
pub const DUMMY_FILL: f64 = 4.539_992_976_248_485e-5;
/// Fill value for dummy rows/columns of logit matrices, `ln(DUMMY_FILL)`.
pub const DUMMY_LOGIT: f64 = -10.0;
/// Marginal tolerance of doubly/row stochastic matrices.
pub const DS_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_SINKHORN_ITERS: usize = 100;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

// Sinkhorn stops early once every log row-sum is this close to zero.
const LOG_MARGINAL_STOP: f64 = 1e-13;

/// How the entries of a [`MatchingMatrix`] are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    /// Unnormalized real scores; projections exponentiate them.
    RawLogits,
    /// Unnormalized nonnegative scores. Zeros are floored at [`DUMMY_FILL`]
    /// before taking logs so every entry stays reachable.
    Weights,
    /// Rows and columns (of the square padded matrix) sum to one.
    DoublyStochastic,
    /// Every row sums to one.
    RowStochastic,
}

impl MatrixKind {
    pub fn is_nonnegative(self) -> bool {
        !matches!(self, MatrixKind::RawLogits)
    }
}

/// Dense `N x M` score or assignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingMatrix {
    entries: DMatrix<f64>,
    kind: MatrixKind,
}

impl MatchingMatrix {
    /// Wraps `entries` after checking finiteness (and nonnegativity for every
    /// kind except raw logits). Marginals are not checked here, see
    /// [`MatchingMatrix::validate`].
    pub fn new(entries: DMatrix<f64>, kind: MatrixKind) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(invalid("matching matrix has non-finite entries"));
        }
        if kind.is_nonnegative() && entries.iter().any(|&x| x < 0.0) {
            return Err(invalid(format!("{kind:?} matrix has negative entries")));
        }
        Ok(Self { entries, kind })
    }

    pub fn logits(entries: DMatrix<f64>) -> Result<Self> {
        Self::new(entries, MatrixKind::RawLogits)
    }

    pub fn weights(entries: DMatrix<f64>) -> Result<Self> {
        Self::new(entries, MatrixKind::Weights)
    }

    /// 0/1 matrix with ones at `pairs`. A full permutation is tagged doubly
    /// stochastic, anything else as weights.
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut entries = DMatrix::zeros(rows, cols);
        for &(i, j) in pairs {
            if i >= rows || j >= cols {
                return Err(invalid(format!("pair ({i}, {j}) outside {rows}x{cols}")));
            }
            entries[(i, j)] = 1.0;
        }
        let full =
            rows == cols && entries.row_iter().all(|r| r.sum() == 1.0) && entries.column_iter().all(|c| c.sum() == 1.0);
        let kind = if full {
            MatrixKind::DoublyStochastic
        } else {
            MatrixKind::Weights
        };
        Ok(Self { entries, kind })
    }

    pub(crate) fn from_parts_unchecked(entries: DMatrix<f64>, kind: MatrixKind) -> Self {
        Self { entries, kind }
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Same entries, different tag. Fails if the tag's sign constraint does
    /// not hold.
    pub fn with_kind(self, kind: MatrixKind) -> Result<Self> {
        Self::new(self.entries, kind)
    }

    /// Largest deviation from the kind's marginal constraints.
    ///
    /// For a non-square doubly stochastic matrix the shorter dimension was
    /// padded with dummies, so its sums only need to stay at or below one.
    pub fn marginal_violation(&self) -> f64 {
        let row_sums: Vec<f64> = self.entries.row_iter().map(|r| r.sum()).collect();
        let col_sums: Vec<f64> = self.entries.column_iter().map(|c| c.sum()).collect();
        let exact = |s: &[f64]| s.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
        let upper = |s: &[f64]| s.iter().map(|x| (x - 1.0).max(0.0)).fold(0.0, f64::max);
        match self.kind {
            MatrixKind::RawLogits | MatrixKind::Weights => 0.0,
            MatrixKind::RowStochastic => exact(&row_sums),
            MatrixKind::DoublyStochastic => {
                let (n, m) = self.shape();
                if n == m {
                    exact(&row_sums).max(exact(&col_sums))
                } else if n > m {
                    exact(&col_sums).max(upper(&row_sums))
                } else {
                    exact(&row_sums).max(upper(&col_sums))
                }
            }
        }
    }

    /// Checks every type invariant, marginals to within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        Self::new(self.entries.clone(), self.kind)?;
        let v = self.marginal_violation();
        if v > tol {
            return Err(invalid(format!(
                "{:?} marginal violation {v:e} exceeds {tol:e}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Top-left `rows x cols` block, keeping the kind.
    pub fn block(&self, rows: usize, cols: usize) -> Self {
        Self {
            entries: self.entries.view((0, 0), (rows, cols)).into_owned(),
            kind: self.kind,
        }
    }

    /// Row-wise argmax with ties broken toward the lower column index.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.entries
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Pads to `max(N, M)` square with dummy entries. Square input is returned
/// unchanged.
pub fn pad_dummy(m: &MatchingMatrix) -> MatchingMatrix {
    let (n, k) = m.shape();
    if n == k {
        return m.clone();
    }
    let size = n.max(k);
    let fill = if m.kind == MatrixKind::RawLogits {
        DUMMY_LOGIT
    } else {
        DUMMY_FILL
    };
    let mut padded = DMatrix::from_element(size, size, fill);
    padded.view_mut((0, 0), (n, k)).copy_from(&m.entries);
    MatchingMatrix {
        entries: padded,
        kind: m.kind,
    }
}

/// Pads a rectangular doubly stochastic block so that the dummy lines carry
/// exactly the mass missing from each short-side line; re-projecting an
/// already projected block is then a fixed point.
fn pad_with_deficit(m: &MatchingMatrix) -> MatchingMatrix {
    let (n, k) = m.shape();
    if n == k {
        return m.clone();
    }
    let size = n.max(k);
    let extra = (size - n.min(k)) as f64;
    let mut padded = DMatrix::zeros(size, size);
    padded.view_mut((0, 0), (n, k)).copy_from(&m.entries);
    if n < k {
        for j in 0..k {
            let fill = ((1.0 - m.entries.column(j).sum()) / extra).max(f64::MIN_POSITIVE);
            padded.view_mut((n, j), (size - n, 1)).fill(fill);
        }
    } else {
        for i in 0..n {
            let fill = ((1.0 - m.entries.row(i).sum()) / extra).max(f64::MIN_POSITIVE);
            padded.view_mut((i, k), (1, size - k)).fill(fill);
        }
    }
    MatchingMatrix {
        entries: padded,
        kind: m.kind,
    }
}

fn log_kernel(m: &MatchingMatrix, temperature: f64) -> DMatrix<f64> {
    match m.kind {
        MatrixKind::RawLogits => m.entries.map(|x| x / temperature),
        MatrixKind::Weights => m.entries.map(|x| x.max(DUMMY_FILL).ln() / temperature),
        MatrixKind::DoublyStochastic | MatrixKind::RowStochastic => m.entries.map(|x| x.ln() / temperature),
    }
}

fn check_projection_args(m: &MatchingMatrix, temperature: f64) -> Result<()> {
    if m.entries.iter().any(|x| !x.is_finite()) {
        return Err(invalid("projection input has non-finite entries"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(invalid("projection input is empty"));
    }
    Ok(())
}

/// Numerically stable `ln(sum(exp(x)))`. Returns `-inf` for an all `-inf`
/// (or empty) input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn projection onto the doubly stochastic set.
///
/// The input is padded to square, rows and columns are alternately
/// normalized for at most `iters` sweeps (stopping early once rows are
/// exact to ~1e-13), and the original `N x M` block is returned.
pub fn sinkhorn_project(m: &MatchingMatrix, iters: usize, temperature: f64) -> Result<MatchingMatrix> {
    check_projection_args(m, temperature)?;
    if iters == 0 {
        return Err(invalid("sinkhorn needs at least one iteration"));
    }
    let (n, k) = m.shape();
    let padded = if m.kind == MatrixKind::DoublyStochastic {
        pad_with_deficit(m)
    } else {
        pad_dummy(m)
    };
    let kernel = log_kernel(&padded, temperature);
    let size = kernel.nrows();
    let mut u = vec![0.0; size];
    let mut v = vec![0.0; size];
    let mut row_max = vec![0.0; size];
    let mut row_sum = vec![0.0; size];

    for iter in 0..iters {
        // Row pass, accumulated column by column for contiguous access.
        row_max.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        for (j, col) in kernel.column_iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                row_max[i] = row_max[i].max(x + v[j]);
            }
        }
        row_sum.iter_mut().for_each(|x| *x = 0.0);
        for (j, col) in kernel.column_iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                row_sum[i] += (x + v[j] - row_max[i]).exp();
            }
        }
        let mut worst = 0.0f64;
        for i in 0..size {
            let lse = row_max[i] + row_sum[i].ln();
            if !lse.is_finite() {
                return Err(Error::InvalidInput(format!("row {i} has no support")));
            }
            worst = worst.max((u[i] + lse).abs());
            u[i] = -lse;
        }
        if iter > 0 && worst < LOG_MARGINAL_STOP {
            break;
        }
        for (j, col) in kernel.column_iter().enumerate() {
            let lse = log_sum_exp(col.iter().zip(&u).map(|(&x, &ui)| x + ui));
            if !lse.is_finite() {
                return Err(Error::InvalidInput(format!("column {j} has no support")));
            }
            v[j] = -lse;
        }
    }

    let out = DMatrix::from_fn(n, k, |i, j| (kernel[(i, j)] + u[i] + v[j]).exp());
    Ok(MatchingMatrix::from_parts_unchecked(out, MatrixKind::DoublyStochastic))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_project(m: &MatchingMatrix, temperature: f64) -> Result<MatchingMatrix> {
    check_projection_args(m, temperature)?;
    let mut kernel = log_kernel(m, temperature);
    for (i, mut row) in kernel.row_iter_mut().enumerate() {
        let values: Vec<f64> = row.iter().copied().collect();
        let lse = log_sum_exp(values.iter().copied());
        if !lse.is_finite() {
            return Err(Error::InvalidInput(format!("row {i} has no support")));
        }
        row.iter_mut().for_each(|x| *x = (*x - lse).exp());
    }
    Ok(MatchingMatrix::from_parts_unchecked(kernel, MatrixKind::RowStochastic))
}
