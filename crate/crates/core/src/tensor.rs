//! Minimal row-major `f32` matrix used for weights and activations.
//!
//! The fixture models are small (d <= a few hundred), so plain nested loops
//! with a fixed summation order are both fast enough and exactly
//! reproducible, which matters more here than raw throughput.

use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Copy of column `c`.
    pub fn col(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * x` where `self` is (rows x cols) and `x` has length `cols`.
    pub fn matvec(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0f32;
            for (w, v) in row.iter().zip(x.iter()) {
                acc += w * v;
            }
            *o = acc;
        }
    }

    /// Apply `self` to every row of `x`: out[t] = self * x[t].
    pub fn map_rows(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.cols, "map_rows width mismatch");
        let mut out = Matrix::zeros(x.rows, self.rows);
        for t in 0..x.rows {
            let (src, dst) = (x.row(t), t);
            let row_out = out.row_mut(dst);
            self.matvec(src, row_out);
        }
        out
    }

    /// Scale column `c` by `s` in place.
    pub fn scale_col(&mut self, c: usize, s: f32) {
        for r in 0..self.rows {
            self.data[r * self.cols + c] *= s;
        }
    }

    /// Scale row `r` by `s` in place.
    pub fn scale_row(&mut self, r: usize, s: f32) {
        for v in self.row_mut(r) {
            *v *= s;
        }
    }
}

/// Euclidean norm of a slice, accumulated in f64 for stability.
pub fn l2_norm(v: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for &x in v {
        acc += (x as f64) * (x as f64);
    }
    crate::math::sqrt(acc) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_small() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 1.0, 5.0, 1.0]);
        let x = [2.0, 4.0, 8.0];
        let mut out = [0.0; 2];
        w.matvec(&x, &mut out);
        assert_eq!(out, [34.0, 30.0]);
    }

    #[test]
    fn map_rows_matches_matvec() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = w.map_rows(&x);
        // Rows of identity pick out columns of w.
        assert_eq!(out.row(0), &[1.0, 3.0]);
        assert_eq!(out.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn l2_norm_three_four_five() {
        assert!((l2_norm(&[3.0, 4.0]) - 5.0).abs() < 1e-6);
    }
}
