use std::f64::consts::PI;

use faer::{Mat, MatRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, initial_log_params, kernel_matrix, FitOptions, KernelParams, Posterior};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::optim::lbfgs;

/// Exact GP regression model.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub posterior: Posterior,
    pub y_train: Vec<f64>,
    /// Negative log marginal likelihood at the stored hyperparameters.
    pub nlml: f64,
}

fn factor(x: MatRef<'_, f64>, params: &KernelParams) -> Result<(Mat<f64>, Cholesky)> {
    let k = kernel_matrix(x, x, params);
    let mut ky = k.clone();
    for i in 0..ky.nrows() {
        ky[(i, i)] += params.noise_var;
    }
    let (chol, _) = Cholesky::with_jitter(ky.as_ref())?;
    Ok((k, chol))
}

fn nlml_from(chol: &Cholesky, y: &[f64]) -> (f64, Vec<f64>) {
    let alpha = chol.solve_vec(y);
    let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let n = y.len() as f64;
    (0.5 * fit + 0.5 * chol.log_det() + 0.5 * n * (2.0 * PI).ln(), alpha)
}

/// Log marginal likelihood `log N(y | 0, K + σ_n²I)`.
pub fn log_marginal_likelihood(x: MatRef<'_, f64>, y: &[f64], params: &KernelParams) -> Result<f64> {
    check_inputs(x, y, params)?;
    let (_, chol) = factor(x, params)?;
    Ok(-nlml_from(&chol, y).0)
}

/// Negative log marginal likelihood and its gradient with respect to
/// `[ln σ_f², ln ℓ_1, …, ln ℓ_D, ln σ_n²]`.
pub fn nlml_and_grad(x: MatRef<'_, f64>, y: &[f64], params: &KernelParams) -> Result<(f64, Vec<f64>)> {
    check_inputs(x, y, params)?;
    let n = x.nrows();
    let dim = x.ncols();
    let (k, chol) = factor(x, params)?;
    let (value, alpha) = nlml_from(&chol, y);

    // W = (K + σ_n²I)⁻¹ − ααᵀ; ∂NLML/∂θ = ½ tr(W ∂K/∂θ).
    let kinv = chol.inverse();
    let inv_l2: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let xs: Vec<Vec<f64>> = (0..dim).map(|d| (0..n).map(|i| x[(i, d)]).collect()).collect();
    let mut g_signal = 0.0;
    let mut g_len = vec![0.0; dim];
    let mut trace_w = 0.0;
    let mut wk = vec![0.0; n];
    for j in 0..n {
        let kinv_j = kinv.col_as_slice(j);
        let k_j = k.col_as_slice(j);
        let wjj = kinv_j[j] - alpha[j] * alpha[j];
        trace_w += wjj;
        g_signal += wjj * k_j[j];
        for i in 0..j {
            wk[i] = 2.0 * (kinv_j[i] - alpha[i] * alpha[j]) * k_j[i];
            g_signal += wk[i];
        }
        for d in 0..dim {
            let xd = &xs[d];
            let xj = xd[j];
            let acc: f64 = wk[..j]
                .iter()
                .zip(&xd[..j])
                .map(|(w, xi)| w * (xi - xj) * (xi - xj))
                .sum();
            g_len[d] += acc * inv_l2[d];
        }
    }
    let mut grad = Vec::with_capacity(dim + 2);
    grad.push(0.5 * g_signal);
    grad.extend(g_len.iter().map(|g| 0.5 * g));
    grad.push(0.5 * params.noise_var * trace_w);
    Ok((value, grad))
}

impl GpModel {
    /// Condition on `(x, y)` at fixed hyperparameters.
    pub fn new(x: MatRef<'_, f64>, y: &[f64], params: KernelParams) -> Result<Self> {
        check_inputs(x, y, &params)?;
        let (_, chol) = factor(x, &params)?;
        let (nlml, alpha) = nlml_from(&chol, y);
        Ok(Self {
            posterior: Posterior {
                params,
                centers: x.to_owned(),
                weights: alpha,
                outer: chol,
                inner: None,
            },
            y_train: y.to_vec(),
            nlml,
        })
    }

    pub fn params(&self) -> &KernelParams {
        self.posterior.params()
    }

    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.posterior.predict(x)
    }

    pub fn predict_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.posterior.mean_grad(x)
    }
}

/// Multi-start L-BFGS minimization of the NLML in log-hyperparameter space.
///
/// Restart 0 starts from a data-scaled heuristic, the others from seeded random draws. The
/// lowest NLML wins; ties keep the earlier restart.
pub fn fit(x: MatRef<'_, f64>, y: &[f64], opts: &FitOptions) -> Result<GpModel> {
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let dim = x.ncols();
    check_inputs(x, y, &KernelParams::new(1.0, vec![1.0; dim], 1.0))?;
    let (lo, hi) = KernelParams::log_bounds(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..opts.restarts {
        let start = initial_log_params(r, dim, y, &mut rng);
        let objective = |v: &[f64]| nlml_and_grad(x, y, &KernelParams::from_log(v)).ok();
        if let Some(m) = lbfgs::minimize(objective, &start, &lo, &hi, opts.lbfgs()) {
            if best.as_ref().is_none_or(|(f, _)| m.f < *f) {
                best = Some((m.f, m.x));
            }
        }
    }
    let (_, v) = best.ok_or(Error::TrainingFailed)?;
    GpModel::new(x, y, KernelParams::from_log(&v))
}
