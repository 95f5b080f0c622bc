//! Dense convex QP by Mehrotra predictor-corrector interior point:
//!
//! ```text
//! min ½ xᵀH x + cᵀx   s.t.   E x = f,   G x ≥ h
//! ```

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::lu_solve_any;

#[derive(Debug, Clone)]
pub struct Qp {
    pub h: Mat<f64>,
    pub c: Vec<f64>,
    pub e: Mat<f64>,
    pub f: Vec<f64>,
    pub g: Mat<f64>,
    pub lo: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Equality multipliers.
    pub y: Vec<f64>,
    /// Inequality multipliers (≥ 0).
    pub z: Vec<f64>,
    pub iterations: usize,
}

const MAX_ITER: usize = 200;
const TOL: f64 = 1e-11;

fn mul(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

fn mul_t(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)] * x[i]).sum())
        .collect()
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0f64, f64::min)
}

impl Qp {
    pub fn solve(&self) -> Result<QpSolution> {
        let n = self.c.len();
        let p = self.f.len();
        let q = self.lo.len();
        assert_eq!(self.h.nrows(), n);
        assert_eq!(self.e.nrows(), p);
        assert_eq!(self.g.nrows(), q);

        let mut x = vec![0.0; n];
        let mut y = vec![0.0; p];
        let gx = mul(&self.g, &x);
        let mut s: Vec<f64> = gx.iter().zip(&self.lo).map(|(a, b)| (a - b).max(1.0)).collect();
        let mut z = vec![1.0; q];
        // Dual residuals and complementarity are measured against the cost scale; multipliers grow with it.
        let mu_tol = TOL * (1.0 + self.c.iter().fold(0.0f64, |m, v| m.max(v.abs())));

        for it in 0..MAX_ITER {
            let hx = mul(&self.h, &x);
            let ety = mul_t(&self.e, &y);
            let gtz = mul_t(&self.g, &z);
            let r_d: Vec<f64> = (0..n).map(|i| hx[i] + self.c[i] - ety[i] - gtz[i]).collect();
            let ex = mul(&self.e, &x);
            let r_e: Vec<f64> = (0..p).map(|i| ex[i] - self.f[i]).collect();
            let gx = mul(&self.g, &x);
            let r_i: Vec<f64> = (0..q).map(|i| gx[i] - s[i] - self.lo[i]).collect();
            let mu = if q > 0 {
                s.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / q as f64
            } else {
                0.0
            };
            let dual_ok = r_d.iter().all(|v| v.abs() <= mu_tol);
            let eq_ok = (0..p).all(|i| r_e[i].abs() <= TOL * (1.0 + self.f[i].abs()));
            let in_ok = (0..q).all(|i| r_i[i].abs() <= TOL * (1.0 + self.lo[i].abs()));
            if dual_ok && eq_ok && in_ok && mu <= mu_tol {
                return Ok(QpSolution { x, y, z, iterations: it });
            }

            // Reduced KKT matrix [[H + GᵀDG, −Eᵀ], [E, 0]].
            let dim = n + p;
            let mut k = Mat::<f64>::zeros(dim, dim);
            for j in 0..n {
                for i in 0..n {
                    k[(i, j)] = self.h[(i, j)];
                }
            }
            for r in 0..q {
                let d = z[r] / s[r];
                for j in 0..n {
                    let gj = self.g[(r, j)];
                    if gj == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        k[(i, j)] += d * self.g[(r, i)] * gj;
                    }
                }
            }
            for r in 0..p {
                for j in 0..n {
                    k[(n + r, j)] = self.e[(r, j)];
                    k[(j, n + r)] = -self.e[(r, j)];
                }
            }

            let newton = |r_c: &[f64]| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
                let w: Vec<f64> = (0..q).map(|i| (r_c[i] - z[i] * r_i[i]) / s[i]).collect();
                let gtw = mul_t(&self.g, &w);
                let mut rhs: Vec<f64> = (0..n).map(|i| -r_d[i] + gtw[i]).collect();
                rhs.extend(r_e.iter().map(|v| -v));
                let sol = lu_solve_any(k.as_ref(), &rhs)?;
                let dx = sol[..n].to_vec();
                let dy = sol[n..].to_vec();
                let gdx = mul(&self.g, &dx);
                let ds: Vec<f64> = (0..q).map(|i| gdx[i] + r_i[i]).collect();
                let dz: Vec<f64> = (0..q).map(|i| (r_c[i] - z[i] * ds[i]) / s[i]).collect();
                Some((dx, dy, ds, dz))
            };

            let r_aff: Vec<f64> = (0..q).map(|i| -s[i] * z[i]).collect();
            let (_, _, ds_a, dz_a) =
                newton(&r_aff).ok_or_else(|| Error::Qp("singular KKT system".into()))?;
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
            let mu_aff = if q > 0 {
                (0..q)
                    .map(|i| (s[i] + a_aff * ds_a[i]) * (z[i] + a_aff * dz_a[i]))
                    .sum::<f64>()
                    / q as f64
            } else {
                0.0
            };
            let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
            let r_c: Vec<f64> = (0..q)
                .map(|i| -s[i] * z[i] - ds_a[i] * dz_a[i] + sigma * mu)
                .collect();
            let (dx, dy, ds, dz) =
                newton(&r_c).ok_or_else(|| Error::Qp("singular KKT system".into()))?;
            let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
            for i in 0..n {
                x[i] += alpha * dx[i];
            }
            for i in 0..p {
                y[i] += alpha * dy[i];
            }
            for i in 0..q {
                s[i] = (s[i] + alpha * ds[i]).max(1e-300);
                z[i] = (z[i] + alpha * dz[i]).max(1e-300);
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Qp("non-finite iterate".into()));
            }
        }
        Err(Error::Qp(format!("no convergence in {MAX_ITER} iterations")))
    }
}
