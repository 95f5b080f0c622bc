//! Gaussian-process regression with an ARD squared-exponential kernel.
//!
//! Both the exact and the sparse variational model reduce, for prediction, to the same form:
//! a set of centers `c_i` with weights `w`, and a matrix `C` such that
//!
//! ```text
//! mean(x) = Σ_i w_i k(x, c_i)
//! var(x)  = σ_f² − k(x)ᵀ C k(x)
//! ```
//!
//! which is what [`Posterior`] stores.

mod exact;
mod sparse;

pub use exact::{fit, log_marginal_likelihood, nlml_and_grad, GpModel};
pub use sparse::{elbo, elbo_and_grad, fit_sparse, fit_sparse_from, kmeans_pp, SparseGpModel};

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{col_mat, Cholesky};
use crate::optim::lbfgs::LbfgsOptions;

/// Box for every log-hyperparameter.
pub const LOG_BOUND: f64 = 10.0;
/// Smallest admissible noise variance.
pub const NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn new(signal_var: f64, lengthscales: Vec<f64>, noise_var: f64) -> Self {
        Self {
            signal_var,
            lengthscales,
            noise_var,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[ln σ_f², ln ℓ_1, …, ln ℓ_D, ln σ_n²]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.signal_var.ln());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            signal_var: v[0].exp(),
            lengthscales: v[1..=d].iter().map(|l| l.exp()).collect(),
            noise_var: v[d + 1].exp().max(NOISE_FLOOR),
        }
    }

    /// Lower and upper bounds of the log vector; the noise variance is bounded below by
    /// [`NOISE_FLOOR`] instead of the common box.
    pub fn log_bounds(dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![-LOG_BOUND; dim + 2];
        lo[dim + 1] = NOISE_FLOOR.ln();
        (lo, vec![LOG_BOUND; dim + 2])
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Dimension(format!(
                "kernel has {} lengthscales, inputs have {dim} columns",
                self.dim()
            )));
        }
        let ok = self.signal_var >= 0.0
            && self.noise_var >= 0.0
            && self.signal_var.is_finite()
            && self.noise_var.is_finite()
            && self.lengthscales.iter().all(|l| *l > 0.0);
        if !ok {
            return Err(Error::InvalidArgument("kernel hyperparameters out of range".into()));
        }
        Ok(())
    }
}

/// `σ_f² · exp(−½ Σ_d (x_d − x'_d)² / ℓ_d²)`.
pub fn kernel(x: &[f64], x2: &[f64], params: &KernelParams) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(&params.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    params.signal_var * (-0.5 * r2).exp()
}

/// Rows of `a` divided elementwise by the lengthscales, packed row-major.
fn scaled_rows(a: MatRef<'_, f64>, inv: &[f64]) -> Vec<f64> {
    let d = inv.len();
    let mut out = vec![0.0; a.nrows() * d];
    for k in 0..d {
        for i in 0..a.nrows() {
            out[i * d + k] = a[(i, k)] * inv[k];
        }
    }
    out
}

/// Cross-covariance `K(a, b)` between the rows of `a` and `b`.
pub fn kernel_matrix(a: MatRef<'_, f64>, b: MatRef<'_, f64>, params: &KernelParams) -> Mat<f64> {
    let d = params.dim();
    let inv: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / l).collect();
    let sa = scaled_rows(a, &inv);
    let sb = scaled_rows(b, &inv);
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = Mat::<f64>::zeros(na, nb);
    for j in 0..nb {
        let bj = &sb[j * d..(j + 1) * d];
        let col = out.col_as_slice_mut(j);
        for (i, v) in col.iter_mut().enumerate() {
            let ai = &sa[i * d..(i + 1) * d];
            let r2: f64 = ai.iter().zip(bj).map(|(p, q)| (p - q) * (p - q)).sum();
            *v = params.signal_var * (-0.5 * r2).exp();
        }
    }
    out
}

fn check_inputs(x: MatRef<'_, f64>, y: &[f64], params: &KernelParams) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("GP needs at least one training point"));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} inputs, {} targets", x.nrows(), y.len())));
    }
    params.validate(x.ncols())
}

/// Optimizer settings shared by the exact and sparse trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            max_iter: 200,
        }
    }
}

impl FitOptions {
    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iter: self.max_iter,
            ..LbfgsOptions::default()
        }
    }
}

/// Starting log-hyperparameters: restart 0 is a fixed heuristic, later restarts are random.
fn initial_log_params<R: rand::Rng>(restart: usize, dim: usize, y: &[f64], rng: &mut R) -> Vec<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6);
    let ell0 = (dim as f64).sqrt().max(1.0);
    let (lo, hi) = KernelParams::log_bounds(dim);
    let mut v = Vec::with_capacity(dim + 2);
    if restart == 0 {
        v.push(var.ln());
        v.extend(std::iter::repeat_n(ell0.ln(), dim));
        v.push((1e-2 * var).ln());
    } else {
        v.push(var.ln() + rng.random_range(-2.0..2.0));
        for _ in 0..dim {
            v.push(ell0.ln() + rng.random_range(-2.0..2.5));
        }
        v.push((var * 10f64.powf(rng.random_range(-6.0..-1.0))).ln());
    }
    v.iter().zip(lo.iter().zip(&hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect()
}

/// Latent posterior in the center/weight form described in the module docs.
#[derive(Debug, Clone)]
pub struct Posterior {
    params: KernelParams,
    centers: Mat<f64>,
    weights: Vec<f64>,
    /// Exact: factor of `K + σ_n²I`. Sparse: factor of `K_mm`.
    outer: Cholesky,
    /// Sparse only: factor of `B = I + A Aᵀ`, giving `C = L⁻ᵀ (I − B⁻¹) L⁻¹`.
    inner: Option<Cholesky>,
}

/// Value and first/second derivatives of the posterior at one point.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub mean: f64,
    pub grad: Vec<f64>,
    pub var: f64,
    pub var_grad: Vec<f64>,
    /// Hessian of the mean, row-major `D × D`.
    pub hessian: Vec<f64>,
}

impl Posterior {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn centers(&self) -> MatRef<'_, f64> {
        self.centers.as_ref()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "query has {} entries, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn kvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.centers.nrows())
            .map(|i| {
                let r2: f64 = (0..self.dim())
                    .map(|d| ((self.centers[(i, d)] - x[d]) / self.params.lengthscales[d]).powi(2))
                    .sum();
                self.params.signal_var * (-0.5 * r2).exp()
            })
            .collect()
    }

    /// `C k`.
    fn c_times(&self, k: &[f64]) -> (Vec<f64>, f64) {
        let u = self.outer.half_solve_vec(k);
        let mut quad: f64 = u.iter().map(|v| v * v).sum();
        let t = match &self.inner {
            None => u,
            Some(lb) => {
                let w = lb.half_solve_vec(&u);
                quad -= w.iter().map(|v| v * v).sum::<f64>();
                let back = lb.half_solve_upper_vec(&w);
                u.iter().zip(&back).map(|(a, b)| a - b).collect()
            }
        };
        (self.outer.half_solve_upper_vec(&t), quad)
    }

    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(crate::linalg::dot(&self.kvec(x), &self.weights))
    }

    /// Posterior mean and latent (noise-free) variance.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check(x)?;
        let k = self.kvec(x);
        let mean = crate::linalg::dot(&k, &self.weights);
        let u = self.outer.half_solve_vec(&k);
        let mut quad: f64 = u.iter().map(|v| v * v).sum();
        if let Some(lb) = &self.inner {
            quad -= lb.half_solve_vec(&u).iter().map(|v| v * v).sum::<f64>();
        }
        Ok((mean, (self.params.signal_var - quad).max(0.0)))
    }

    pub fn mean_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let k = self.kvec(x);
        let mut g = vec![0.0; self.dim()];
        for (i, ki) in k.iter().enumerate() {
            let a = self.weights[i] * ki;
            for (d, gd) in g.iter_mut().enumerate() {
                *gd += a * (self.centers[(i, d)] - x[d]) / self.params.lengthscales[d].powi(2);
            }
        }
        Ok(g)
    }

    pub fn mean_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let k = self.kvec(x);
        let inv_l2: Vec<f64> = self.params.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let mut mean = 0.0;
        let mut g = vec![0.0; self.dim()];
        for (i, ki) in k.iter().enumerate() {
            let a = self.weights[i] * ki;
            mean += a;
            for (d, gd) in g.iter_mut().enumerate() {
                *gd += a * (self.centers[(i, d)] - x[d]) * inv_l2[d];
            }
        }
        Ok((mean, g))
    }

    /// Mean, variance and their derivatives (mean Hessian included) in one pass.
    pub fn eval(&self, x: &[f64]) -> Result<PointEval> {
        self.check(x)?;
        let dim = self.dim();
        let k = self.kvec(x);
        let inv_l2: Vec<f64> = self.params.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let (ck, quad) = self.c_times(&k);
        let mut mean = 0.0;
        let mut grad = vec![0.0; dim];
        let mut var_grad = vec![0.0; dim];
        let mut hessian = vec![0.0; dim * dim];
        let mut delta = vec![0.0; dim];
        for (i, ki) in k.iter().enumerate() {
            for d in 0..dim {
                delta[d] = (self.centers[(i, d)] - x[d]) * inv_l2[d];
            }
            let a = self.weights[i] * ki;
            mean += a;
            let b = -2.0 * ck[i] * ki;
            for d in 0..dim {
                grad[d] += a * delta[d];
                var_grad[d] += b * delta[d];
                for e in 0..dim {
                    hessian[d * dim + e] += a * delta[d] * delta[e];
                }
                hessian[d * dim + d] -= a * inv_l2[d];
            }
        }
        Ok(PointEval {
            mean,
            grad,
            var: (self.params.signal_var - quad).max(0.0),
            var_grad,
            hessian,
        })
    }

    /// Means and variances for the rows of `xs`, evaluated in blocks with matrix solves.
    pub fn predict_batch(&self, xs: MatRef<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if xs.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "queries have {} columns, model expects {}",
                xs.ncols(),
                self.dim()
            )));
        }
        const BLOCK: usize = 512;
        let n = xs.nrows();
        let mut means = Vec::with_capacity(n);
        let mut vars = Vec::with_capacity(n);
        let w = col_mat(&self.weights);
        let mut start = 0;
        while start < n {
            let rows = BLOCK.min(n - start);
            let block = xs.subrows(start, rows);
            let mut k = kernel_matrix(self.centers.as_ref(), block, &self.params);
            let m = k.transpose() * &w;
            self.outer.solve_lower_in_place(&mut k);
            let mut quad: Vec<f64> = (0..rows)
                .map(|j| (0..k.nrows()).map(|i| k[(i, j)] * k[(i, j)]).sum())
                .collect();
            if let Some(lb) = &self.inner {
                lb.solve_lower_in_place(&mut k);
                for (j, q) in quad.iter_mut().enumerate() {
                    *q -= (0..k.nrows()).map(|i| k[(i, j)] * k[(i, j)]).sum::<f64>();
                }
            }
            means.extend((0..rows).map(|j| m[(j, 0)]));
            vars.extend(quad.iter().map(|q| (self.params.signal_var - q).max(0.0)));
            start += rows;
        }
        Ok((means, vars))
    }
}
