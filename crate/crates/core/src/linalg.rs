//! Minimal dense linear algebra: a row-major `f64` matrix and the handful of
//! operations the rest of the crate needs (products, Gaussian elimination,
//! a 1-norm condition estimate, least squares).
//!
//! Sizes here are tiny (designs with tens of rows, systems of a few dozen
//! unknowns), so naive triple loops are the right tool.

use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data; the length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Gathers the given rows into a new matrix (used for minibatching and
    /// partitioning).
    pub fn rows_subset(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * self`, the Gram matrix of the columns.
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                for j in 0..self.cols {
                    out.data[i * self.cols + j] += row[i] * row[j];
                }
            }
        }
        out
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimMismatch {
                context: "matrix-vector product",
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect())
    }

    /// `selfᵀ * v`.
    pub fn tmul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimMismatch {
                context: "transposed matrix-vector product",
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for j in 0..self.cols {
                out[j] += row[j] * v[i];
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `a * x = b` for square `a` by Gaussian elimination with partial
/// pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::DimMismatch {
            context: "solve: matrix must be square",
            expected: n,
            got: a.cols,
        });
    }
    if b.len() != n {
        return Err(Error::DimMismatch {
            context: "solve: right-hand side",
            expected: n,
            got: b.len(),
        });
    }
    let mut m = a.clone();
    let mut x: Vec<f64> = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if libm::fabs(m.get(r, col)) > libm::fabs(m.get(pivot, col)) {
                pivot = r;
            }
        }
        let p = m.get(pivot, col);
        if p == 0.0 || !p.is_finite() {
            return Err(Error::SingularSystem { context: "solve" });
        }
        if pivot != col {
            for j in 0..n {
                let tmp = m.get(col, j);
                m.set(col, j, m.get(pivot, j));
                m.set(pivot, j, tmp);
            }
            x.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = m.get(r, col) / m.get(col, col);
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m.get(r, j) - f * m.get(col, j);
                m.set(r, j, v);
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for j in col + 1..n {
            s -= m.get(col, j) * x[j];
        }
        x[col] = s / m.get(col, col);
    }
    Ok(x)
}

/// Inverse of a square matrix, column by column.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    let mut out = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = solve(a, &e)?;
        e[j] = 0.0;
        for i in 0..n {
            out.set(i, j, col[i]);
        }
    }
    Ok(out)
}

/// 1-norm condition estimate `‖A‖₁ · ‖A⁻¹‖₁`.
pub fn cond_1(a: &Matrix) -> Result<f64> {
    Ok(norm_1(a) * norm_1(&inverse(a)?))
}

fn norm_1(a: &Matrix) -> f64 {
    let mut best = 0.0_f64;
    for j in 0..a.cols {
        let mut s = 0.0;
        for i in 0..a.rows {
            s += libm::fabs(a.get(i, j));
        }
        best = best.max(s);
    }
    best
}

/// Least-squares solution of `min_w ‖y − X w‖²` via the normal equations.
pub fn least_squares(x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    solve(&x.gram(), &x.tmul_vec(y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solve_matches_hand_computed_2x2() {
        // 2x + y = 5, x + 3y = 10  =>  x = 1, y = 3
        let a = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let x = solve(&a, &[5.0, 10.0]).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = Matrix::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 5.0]).unwrap();
        let prod = a.matmul(&inverse(&a).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod.get(i, j), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn singular_system_is_rejected() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            solve(&a, &[1.0, 1.0]),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn identity_has_unit_condition_number() {
        assert_abs_diff_eq!(cond_1(&Matrix::identity(4)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn least_squares_recovers_noiseless_weights() {
        // y = X w* with more rows than unknowns; the solver must recover w*.
        let x = Matrix::from_vec(
            4,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0],
        )
        .unwrap();
        let w_true = [0.7, -1.3];
        let y: Vec<f64> = (0..4).map(|i| dot(x.row(i), &w_true)).collect();
        let w = least_squares(&x, &y).unwrap();
        assert_abs_diff_eq!(w[0], w_true[0], epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], w_true[1], epsilon = 1e-12);
    }

    #[test]
    fn rows_subset_gathers_in_order() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = m.rows_subset(&[2, 0]);
        assert_eq!(s.row(0), &[5.0, 6.0]);
        assert_eq!(s.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn gram_and_tmul_agree_with_direct_computation() {
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 1.0]).unwrap();
        let g = x.gram();
        // g[0][1] = Σ_r x[r][0] * x[r][1]
        assert_abs_diff_eq!(g.get(0, 1), 1.0 * 2.0 + (-1.0) * 0.5 + 3.0 * 1.0, epsilon = 1e-15);
        let v = x.tmul_vec(&[1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 3.5, epsilon = 1e-15);
    }
}
