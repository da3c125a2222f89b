//! Small dense linear algebra: symmetric matrices, Cholesky factorization,
//! triangular solves, and 2x2 block helpers.
//!
//! The curvature matrices in this crate are at most a few hundred rows, so a
//! flat row-major layout with textbook kernels is all that is needed.

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Dense square matrix, row-major. Used for symmetric matrices; both
/// triangles are kept populated.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat<F> {
    n: usize,
    data: Vec<F>,
}

impl<F: Scalar> SymMat<F> {
    pub fn zeros(n: usize) -> Self {
        SymMat { n, data: vec![F::zero(); n * n] }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    /// Add `v` to entries (i, j) and (j, i).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.n + j] = self.data[i * self.n + j] + v;
        if i != j {
            self.data[j * self.n + i] = self.data[j * self.n + i] + v;
        }
    }

    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(x).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    }

    /// x' A x.
    pub fn quad_form(&self, x: &[F]) -> F {
        dot(&self.matvec(x), x)
    }

    /// Cholesky factorization A = L L'. Fails on non-SPD input.
    pub fn cholesky(&self) -> Result<Chol<F>> {
        let n = self.n;
        let mut l = vec![F::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.data[i * n + j];
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > F::zero()) || !s.is_finite() {
                        return Err(Error::IndefiniteCurvature);
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Chol { n, l })
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Chol<F> {
    n: usize,
    l: Vec<F>, // row-major, lower triangle populated
}

impl<F: Scalar> Chol<F> {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn diag(&self, i: usize) -> F {
        self.l[i * self.n + i]
    }

    /// Entry of the lower-triangular factor (zero above the diagonal).
    #[inline]
    pub fn l_entry(&self, i: usize, j: usize) -> F {
        if j <= i {
            self.l[i * self.n + j]
        } else {
            F::zero()
        }
    }

    /// log det A = 2 * sum log L_ii.
    pub fn log_det(&self) -> F {
        let mut s = F::zero();
        for i in 0..self.n {
            s = s + self.diag(i).ln();
        }
        s + s
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[F]) -> Vec<F> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // forward: L y = b
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        // backward: L' x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s = s - self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// Full inverse A^{-1}, column by column.
    pub fn inverse(&self) -> SymMat<F> {
        let n = self.n;
        let mut inv = SymMat::zeros(n);
        let mut e = vec![F::zero(); n];
        for j in 0..n {
            e[j] = F::one();
            let col = self.solve(&e);
            e[j] = F::zero();
            for i in 0..n {
                inv.data[i * n + j] = col[i];
            }
        }
        // symmetrize against roundoff
        let half = F::of(0.5);
        for i in 0..n {
            for j in 0..i {
                let v = (inv.data[i * n + j] + inv.data[j * n + i]) * half;
                inv.data[i * n + j] = v;
                inv.data[j * n + i] = v;
            }
        }
        inv
    }
}

// ---- 2x2 helpers for the (a, b) covariance blocks ----

pub type Mat2<F> = [[F; 2]; 2];

pub fn mat2_det<F: Scalar>(m: &Mat2<F>) -> F {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mat2_inv<F: Scalar>(m: &Mat2<F>) -> Result<Mat2<F>> {
    let det = mat2_det(m);
    if !(det > F::zero()) || !det.is_finite() {
        return Err(Error::IndefiniteCurvature);
    }
    Ok([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

pub fn mat2_mul<F: Scalar>(a: &Mat2<F>, b: &Mat2<F>) -> Mat2<F> {
    let mut c = [[F::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub fn mat2_trace<F: Scalar>(m: &Mat2<F>) -> F {
    m[0][0] + m[1][1]
}

pub fn mat2_scale<F: Scalar>(m: &Mat2<F>, s: F) -> Mat2<F> {
    [[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]]
}

/// x' M y for 2-vectors.
pub fn mat2_bilinear<F: Scalar>(m: &Mat2<F>, x: [F; 2], y: [F; 2]) -> F {
    x[0] * (m[0][0] * y[0] + m[0][1] * y[1]) + x[1] * (m[1][0] * y[0] + m[1][1] * y[1])
}

// ---- vector helpers ----

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm_inf<F: Scalar>(a: &[F]) -> F {
    a.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
}

pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> SymMat<f64> {
        // A = B B' + I for a fixed B, guaranteed SPD
        let b = [[1.0, 2.0, 0.0], [0.5, -1.0, 1.0], [0.0, 0.3, 2.0]];
        let mut a = SymMat::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..3 {
                    s += b[i][k] * b[j][k];
                }
                a.set(i, j, s);
            }
        }
        a
    }

    #[test]
    fn cholesky_solve_roundtrip() {
        let a = spd3();
        let ch = a.cholesky().unwrap();
        let x = vec![1.0, -2.0, 0.5];
        let b = a.matvec(&x);
        let x2 = ch.solve(&b);
        for (u, v) in x.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_det_matches_2x2_closed_form() {
        let mut a = SymMat::zeros(2);
        a.set(0, 0, 4.0);
        a.set(1, 1, 9.0);
        a.set(0, 1, 2.0);
        let ch = a.cholesky().unwrap();
        assert!((ch.log_det() - (4.0f64 * 9.0 - 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = spd3();
        let inv = a.cholesky().unwrap().inverse();
        for i in 0..3 {
            let col: Vec<f64> = (0..3).map(|k| inv.get(k, i)).collect();
            let ai = a.matvec(&col);
            for (k, v) in ai.iter().enumerate() {
                let want = if k == i { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12, "entry ({k},{i}) = {v}");
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = SymMat::zeros(2);
        a.set(0, 0, 1.0);
        a.set(1, 1, -1.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn mat2_inverse() {
        let m: Mat2<f64> = [[2.0, 0.5], [0.5, 1.0]];
        let inv = mat2_inv(&m).unwrap();
        let prod = mat2_mul(&m, &inv);
        assert!((prod[0][0] - 1.0).abs() < 1e-14);
        assert!((prod[1][1] - 1.0).abs() < 1e-14);
        assert!(prod[0][1].abs() < 1e-14);
    }
}
