//! Small dense/banded kernels shared by the solvers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// LU factorization of a square band matrix without pivoting.
///
/// Only used on matrices that are column diagonally dominant M-matrices
/// (implicit steps of conservative generators, pinned Neumann Laplacians),
/// for which elimination without pivoting is stable.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    // row-major, `2*bw + 1` slots per row, slot `bw` is the diagonal
    band: Vec<f64>,
}

impl BandedLu {
    pub fn new(n: usize, bw: usize) -> Self {
        Self { n, bw, band: vec![0.0; n * (2 * bw + 1)] }
    }

    #[inline]
    fn slot(&self, row: usize, col: usize) -> usize {
        debug_assert!(col + self.bw >= row && col <= row + self.bw);
        row * (2 * self.bw + 1) + (col + self.bw - row)
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        let s = self.slot(row, col);
        self.band[s] += value;
    }

    pub fn set_row_identity(&mut self, row: usize) {
        let start = row * (2 * self.bw + 1);
        self.band[start..start + 2 * self.bw + 1].fill(0.0);
        let s = self.slot(row, row);
        self.band[s] = 1.0;
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// In-place Doolittle elimination.
    pub fn factor(mut self) -> Result<Self> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.band[self.slot(k, k)];
            if !pivot.is_finite() || pivot.abs() < 1e-300 {
                return Err(Error::Numerical {
                    context: "banded LU",
                    detail: format!("zero pivot {pivot:e} at row {k}"),
                });
            }
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let sik = self.slot(i, k);
                let factor = self.band[sik] / pivot;
                if factor == 0.0 {
                    continue;
                }
                self.band[sik] = factor;
                for j in k + 1..=last {
                    let skj = self.slot(k, j);
                    let sij = self.slot(i, j);
                    self.band[sij] -= factor * self.band[skj];
                }
            }
        }
        Ok(self)
    }

    /// Solves `LU x = rhs` in place. Must be called on a factored matrix.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let first = i.saturating_sub(bw);
            let mut acc = x[i];
            for j in first..i {
                acc -= self.band[self.slot(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let last = (i + bw).min(n - 1);
            let mut acc = x[i];
            for j in i + 1..=last {
                acc -= self.band[self.slot(i, j)] * x[j];
            }
            x[i] = acc / self.band[self.slot(i, i)];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Matrix exponential (scaling and squaring with Padé approximants).
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
