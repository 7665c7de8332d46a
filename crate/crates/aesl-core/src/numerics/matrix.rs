//! Dense row-major f64 matrices with deterministic arithmetic.
//!
//! Every reduction runs in a fixed left-to-right order, so identical inputs
//! produce bitwise identical outputs. No BLAS, no threading, no SIMD
//! reassociation.

use crate::error::{AeslError, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn shape_err(
    op: &'static str,
    a: &Matrix,
    b_rows: usize,
    b_cols: usize,
) -> AeslError {
    AeslError::ShapeMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b_rows,
        right_cols: b_cols,
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AeslError::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(AeslError::invalid("ragged rows in matrix literal"));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    /// Entries drawn i.i.d. from N(0, 1).
    pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a 1x1 matrix.
    pub fn item(&self) -> Result<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(AeslError::NonScalarLoss {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.data[0])
    }

    /// Standard product with a fixed left-to-right summation per output cell.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self, other.rows, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for j in 0..other.cols {
                let mut acc = 0.0;
                for (k, &a) in a_row.iter().enumerate() {
                    acc += a * other.data[k * other.cols + j];
                }
                out_row[j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other.rows, other.cols));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", self, other.rows, other.cols));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds a 1xC bias row to every row of an NxC matrix.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(shape_err("add_row_broadcast", self, bias.rows, bias.cols));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Sums every entry, row major.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// 1xC vector of column sums.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    /// 1xC vector of column means.
    pub fn column_means(&self) -> Matrix {
        self.column_sums().scale(1.0 / self.rows as f64)
    }

    /// Subtracts the mean row (column-wise mean over rows) from every row.
    pub fn center_rows(&self) -> Matrix {
        let means = self.column_means();
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (v, m) in row.iter_mut().zip(&means.data) {
                *v -= m;
            }
        }
        out
    }

    /// Scales each row to unit Euclidean norm. Errors naming the first row
    /// whose norm is below `min_norm`.
    pub fn normalize_rows(&self, min_norm: f64) -> Result<Matrix> {
        let mut out = self.clone();
        for r in 0..out.rows {
            let norm = row_norm(self.row(r));
            if norm <= min_norm {
                return Err(AeslError::ZeroCenteredNorm { row: r });
            }
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
        Ok(out)
    }

    /// Max absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err("max_abs_diff", self, other.rows, other.cols));
        }
        let mut best = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            best = best.max((a - b).abs());
        }
        Ok(best)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err("vstack", self, other.rows, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Selects the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(idx));
        }
        out
    }

    /// Selects the listed columns, in order.
    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            for (j, &c) in indices.iter().enumerate() {
                out.data[r * indices.len() + j] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Pairwise centered-cosine similarity of the rows of `m`: rows are centered
/// by the mean row, scaled to unit norm, and multiplied into a Gram matrix.
/// Errors naming the first row that coincides with the mean.
pub fn centered_cosine_matrix(m: &Matrix) -> Result<Matrix> {
    let normed = m.center_rows().normalize_rows(1e-12)?;
    normed.matmul(&normed.transpose())
}

pub fn row_norm(row: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in row {
        acc += v * v;
    }
    acc.sqrt()
}

/// Squared Euclidean distance between two rows.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_is_noop() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]])
            .unwrap();
        let i = Matrix::identity(3);
        assert_eq!(i.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&i).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(2, 3);
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5], vec![0.0, 3.0]]).unwrap();
        assert_eq!(z.matmul(&m).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(err.contains("2x2"), "{err}");
    }

    #[test]
    fn matmul_is_deterministic_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::standard_normal(6, 5, &mut rng);
        let b = Matrix::standard_normal(5, 4, &mut rng);
        let c1 = a.matmul(&b).unwrap();
        let c2 = a.matmul(&b).unwrap();
        assert_eq!(c1.as_slice(), c2.as_slice());
    }

    #[test]
    fn center_rows_removes_mean() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let c = m.center_rows();
        let means = c.column_means();
        assert!(means.max_abs() < 1e-15);
    }

    use rand::SeedableRng;

    proptest! {
        #[test]
        fn matmul_associative_within_tolerance(seed in 0u64..64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::standard_normal(5, 5, &mut rng);
            let b = Matrix::standard_normal(5, 5, &mut rng);
            let c = Matrix::standard_normal(5, 5, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10);
        }

        #[test]
        fn transpose_is_involution(seed in 0u64..32) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::standard_normal(4, 7, &mut rng);
            prop_assert_eq!(a.transpose().transpose(), a);
        }
    }
}
