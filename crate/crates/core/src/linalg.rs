//! Thin helpers over `faer` used by the power-flow, GP and optimizer code.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::{Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Jitter values tried in order when a kernel matrix is not numerically positive definite.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat<f64>,
}

impl Cholesky {
    pub fn new(a: MatRef<'_, f64>) -> Option<Self> {
        let llt = a.llt(Side::Lower).ok()?;
        let l = llt.L().to_owned();
        if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
            return None;
        }
        Some(Self { l })
    }

    /// Factor `a + jitter * I`, walking [`JITTER_LADDER`] until it succeeds.
    pub fn with_jitter(a: MatRef<'_, f64>) -> Result<(Self, f64)> {
        let n = a.nrows();
        for &jitter in JITTER_LADDER.iter() {
            let attempt = if jitter == 0.0 {
                Self::new(a)
            } else {
                let shifted = Mat::from_fn(n, n, |i, j| {
                    a[(i, j)] + if i == j { jitter } else { 0.0 }
                });
                Self::new(shifted.as_ref())
            };
            if let Some(c) = attempt {
                return Ok((c, jitter));
            }
        }
        Err(Error::Factorization(JITTER_LADDER.to_vec()))
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.l.as_ref()
    }

    pub fn into_l(self) -> Mat<f64> {
        self.l
    }

    pub fn from_l(l: Mat<f64>) -> Self {
        Self { l }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// `L⁻¹ B` in place.
    pub fn solve_lower_in_place(&self, b: &mut Mat<f64>) {
        solve_lower_triangular_in_place(self.l.as_ref(), b.as_mut(), Par::Seq);
    }

    /// `L⁻ᵀ B` in place.
    pub fn solve_upper_in_place(&self, b: &mut Mat<f64>) {
        solve_upper_triangular_in_place(self.l.transpose(), b.as_mut(), Par::Seq);
    }

    /// `A⁻¹ B`.
    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut x = b.to_owned();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col_mat(b);
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        mat_col(&x)
    }

    /// `L⁻¹ b`.
    pub fn half_solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col_mat(b);
        self.solve_lower_in_place(&mut x);
        mat_col(&x)
    }

    /// `L⁻ᵀ b`.
    pub fn half_solve_upper_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col_mat(b);
        self.solve_upper_in_place(&mut x);
        mat_col(&x)
    }

    pub fn inverse(&self) -> Mat<f64> {
        use faer::dyn_stack::{MemBuffer, MemStack};
        use faer::linalg::cholesky::llt::inverse;
        let n = self.dim();
        let mut out = Mat::<f64>::zeros(n, n);
        let mut buf = MemBuffer::new(inverse::inverse_scratch::<f64>(n, Par::Seq));
        inverse::inverse(out.as_mut(), self.l.as_ref(), Par::Seq, MemStack::new(&mut buf));
        // Only the lower triangle is written.
        for j in 0..n {
            for i in 0..j {
                out[(i, j)] = out[(j, i)];
            }
        }
        out
    }
}

/// Solve a general square system with partial pivoting; `None` when numerically singular.
pub fn lu_solve(a: MatRef<'_, f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.nrows();
    let lu = a.partial_piv_lu();
    let u = lu.U();
    let scale = (0..n).map(|i| u[(i, i)].abs()).fold(0.0, f64::max);
    if scale == 0.0 || (0..n).any(|i| u[(i, i)].abs() <= 1e-14 * scale || !u[(i, i)].is_finite()) {
        return None;
    }
    let x = lu.solve(col_mat(b));
    let x = mat_col(&x);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// LU solve without a conditioning test (interior-point systems are legitimately badly scaled);
/// `None` only if the result is not finite.
pub fn lu_solve_any(a: MatRef<'_, f64>, b: &[f64]) -> Option<Vec<f64>> {
    let x = mat_col(&a.partial_piv_lu().solve(col_mat(b)));
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Inverse of a general square matrix via LU.
pub fn lu_inverse(a: MatRef<'_, f64>) -> Mat<f64> {
    a.partial_piv_lu().inverse()
}

pub fn col_mat(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn mat_col(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

pub fn mat_from_rows(rows: &[Vec<f64>], ncols: usize) -> Mat<f64> {
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn row(m: MatRef<'_, f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

pub fn mat_t_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)] * x[i]).sum())
        .collect()
}

pub fn mat_to_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row(m, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 });
        let c = Cholesky::new(a.as_ref()).unwrap();
        let x = c.solve_vec(&[1.0, 2.0, 3.0]);
        let back = mat_vec(a.as_ref(), &x);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-12);
        }
        let inv = c.inverse();
        let eye = &a * &inv;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jitter_ladder_rescues_singular_psd() {
        let a = Mat::from_fn(2, 2, |_, _| 1.0);
        let (_, jitter) = Cholesky::with_jitter(a.as_ref()).unwrap();
        assert!(jitter > 0.0);
        let neg = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(matches!(
            Cholesky::with_jitter(neg.as_ref()),
            Err(Error::Factorization(_))
        ));
    }

    #[test]
    fn lu_detects_singularity() {
        let a = Mat::from_fn(2, 2, |i, _| i as f64 + 1.0);
        assert!(lu_solve(a.as_ref(), &[1.0, 1.0]).is_none());
        let b = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 1.0 });
        let x = lu_solve(b.as_ref(), &[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }
}
