//! Dense linear-algebra kernels used by the GMRF and inference code.
//!
//! The Cholesky factor is stored as the upper triangle `U = Lᵀ` in
//! column-major order so every inner product in the factorisation and the
//! triangular solves runs over contiguous memory.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, StjmError};

#[derive(Debug, Clone)]
pub struct DenseCholesky {
    n: usize,
    /// Column-major upper factor, `A = UᵀU`.
    u: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DenseCholesky {
    /// Factorises a symmetric positive definite matrix. Only the upper
    /// triangle of `a` is read.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(StjmError::InvalidDimension(format!(
                "Cholesky of non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let src = a.as_slice();
        let mut u = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..j {
                let (head, tail) = u.split_at_mut(j * n);
                let col_i = &head[i * n..i * n + i];
                let col_j = &tail[..i];
                let v = (src[j * n + i] - dot(col_i, col_j)) / head[i * n + i];
                tail[i] = v;
            }
            let col_j = &u[j * n..j * n + j];
            let d = src[j * n + j] - dot(col_j, col_j);
            if !(d > 0.0) || !d.is_finite() {
                return Err(StjmError::NotPositiveDefinite { pivot: j });
            }
            u[j * n + j] = d.sqrt();
        }
        Ok(Self { n, u })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.u[j * self.n..j * self.n + j]
    }

    #[inline]
    fn diag(&self, j: usize) -> f64 {
        self.u[j * self.n + j]
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for j in 0..self.n {
            let s = dot(self.col(j), &b[..j]);
            b[j] = (b[j] - s) / self.diag(j);
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let xj = y[j] / self.diag(j);
            y[j] = xj;
            if xj != 0.0 {
                for (yk, uk) in y[..j].iter_mut().zip(self.col(j)) {
                    *yk -= xj * uk;
                }
            }
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.n;
        for c in 0..x.ncols() {
            let col = &mut x.as_mut_slice()[c * n..(c + 1) * n];
            self.solve_in_place(col);
        }
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|j| self.diag(j).ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.n, self.n))
    }

    /// Lower factor `L` as a dense matrix.
    pub fn lower(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| if i >= j { self.u[i * n + j] } else { 0.0 })
    }
}

/// Rank of a symmetric matrix from its eigenvalues; values below
/// `rel_tol · max|λ|` count as zero.
pub fn symmetric_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return 0;
    }
    eig.eigenvalues
        .iter()
        .filter(|v| v.abs() > rel_tol * max)
        .count()
}

/// Numerical rank of a general matrix via its singular values.
pub fn matrix_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|v| **v > rel_tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 1.0 } else { 0.0 });
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn matches_nalgebra_factor_and_solve() {
        let a = spd(9);
        let ours = DenseCholesky::new(&a).unwrap();
        let theirs = a.clone().cholesky().unwrap();
        assert!((ours.lower() - theirs.l()).abs().max() < 1e-10);
        let b = DVector::from_fn(9, |i, _| i as f64 - 3.0);
        let x = ours.solve(&b);
        assert!((&a * x - b).abs().max() < 1e-9);
        let ld = theirs.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        assert!((ours.log_det() - ld).abs() < 1e-10);
    }

    #[test]
    fn reports_failing_pivot() {
        let mut a = DMatrix::identity(4, 4);
        a[(2, 2)] = -1.0;
        match DenseCholesky::new(&a) {
            Err(StjmError::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
