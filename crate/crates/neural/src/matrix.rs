//! Dense row-major matrices with the handful of kernels recurrent cells need.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        self.matvec_rows_add(0..self.rows, x, out);
    }

    /// `out += self[rows] * x`, with `out` indexed relative to `rows.start`.
    pub fn matvec_rows_add(&self, rows: Range<usize>, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), rows.len());
        for (o, r) in out.iter_mut().zip(rows) {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += self^T * v`
    pub fn matvec_t_add(&self, v: &[f64], out: &mut [f64]) {
        self.matvec_t_rows_add(0..self.rows, v, out);
    }

    /// `out += self[rows]^T * v`, with `v` indexed relative to `rows.start`.
    pub fn matvec_t_rows_add(&self, rows: Range<usize>, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        debug_assert_eq!(v.len(), rows.len());
        for (&s, r) in v.iter().zip(rows) {
            if s != 0.0 {
                axpy(s, self.row(r), out);
            }
        }
    }

    /// `self += a * b^T`
    pub fn rank1_add(&mut self, a: &[f64], b: &[f64]) {
        self.rank1_rows_add(0..self.rows, a, b);
    }

    /// `self[rows] += a * b^T`
    pub fn rank1_rows_add(&mut self, rows: Range<usize>, a: &[f64], b: &[f64]) {
        debug_assert_eq!(b.len(), self.cols);
        debug_assert_eq!(a.len(), rows.len());
        let cols = self.cols;
        for (&s, r) in a.iter().zip(rows) {
            if s != 0.0 {
                axpy(s, b, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
