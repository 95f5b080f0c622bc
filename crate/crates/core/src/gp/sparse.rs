//! Sparse variational GP with the collapsed bound
//! `F = log N(y | 0, Q_nn + σ_n²I) − tr(K_nn − Q_nn) / (2σ_n²)`, `Q_nn = K_nm K_mm⁻¹ K_mn`.
//!
//! With `L = chol(K_mm)`, `A = L⁻¹K_mn/σ_n`, `B = I + AAᵀ` everything is `O(nm²)`.

use std::f64::consts::PI;

use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_inputs, initial_log_params, kernel_matrix, FitOptions, KernelParams, Posterior};
use crate::error::{Error, Result};
use crate::linalg::{col_mat, mat_col, Cholesky};
use crate::optim::lbfgs;

#[derive(Debug, Clone)]
pub struct SparseGpModel {
    /// Centers are the inducing inputs.
    pub posterior: Posterior,
    pub elbo: f64,
}

impl SparseGpModel {
    pub fn params(&self) -> &KernelParams {
        self.posterior.params()
    }

    pub fn inducing(&self) -> MatRef<'_, f64> {
        self.posterior.centers()
    }

    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.posterior.predict(x)
    }

    pub fn predict_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.posterior.mean_grad(x)
    }
}

struct Terms {
    elbo: f64,
    kmm: Mat<f64>,
    kmn: Mat<f64>,
    l: Cholesky,
    lb: Cholesky,
    a: Mat<f64>,
    /// `B⁻¹ A y`.
    beta: Vec<f64>,
}

fn scale(m: &mut Mat<f64>, s: f64) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            m[(i, j)] *= s;
        }
    }
}

fn check_inducing(x: MatRef<'_, f64>, z: MatRef<'_, f64>) -> Result<()> {
    if z.nrows() == 0 || z.nrows() > x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ m ≤ n inducing points, got m = {} for n = {}",
            z.nrows(),
            x.nrows()
        )));
    }
    if z.ncols() != x.ncols() {
        return Err(Error::Dimension("inducing inputs and data differ in width".into()));
    }
    Ok(())
}

fn terms(x: MatRef<'_, f64>, y: &[f64], params: &KernelParams, z: MatRef<'_, f64>) -> Result<Terms> {
    check_inputs(x, y, params)?;
    check_inducing(x, z)?;
    let n = x.nrows() as f64;
    let m = z.nrows();
    let s2 = params.noise_var;
    let sigma = s2.sqrt();
    let kmm = kernel_matrix(z, z, params);
    let kmn = kernel_matrix(z, x, params);
    let (l, _) = Cholesky::with_jitter(kmm.as_ref())?;
    let mut a = kmn.clone();
    l.solve_lower_in_place(&mut a);
    scale(&mut a, 1.0 / sigma);
    let mut b = &a * a.transpose();
    let trace_aat: f64 = (0..m).map(|i| b[(i, i)]).sum();
    for i in 0..m {
        b[(i, i)] += 1.0;
    }
    let (lb, _) = Cholesky::with_jitter(b.as_ref())?;
    let ay = mat_col(&(&a * col_mat(y)));
    let c = lb.half_solve_vec(&ay);
    let cc: f64 = c.iter().map(|v| v * v).sum::<f64>() / s2;
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let elbo = -0.5 * n * (2.0 * PI).ln() - 0.5 * lb.log_det() - 0.5 * n * s2.ln() - 0.5 * yy / s2
        + 0.5 * cc
        - 0.5 * n * params.signal_var / s2
        + 0.5 * trace_aat;
    let beta = lb.solve_vec(&ay);
    Ok(Terms {
        elbo,
        kmm,
        kmn,
        l,
        lb,
        a,
        beta,
    })
}

/// Collapsed evidence lower bound.
pub fn elbo(x: MatRef<'_, f64>, y: &[f64], params: &KernelParams, z: MatRef<'_, f64>) -> Result<f64> {
    Ok(terms(x, y, params, z)?.elbo)
}

/// ELBO with its gradient in `[ln σ_f², ln ℓ, ln σ_n²]` and in the inducing inputs (`m × D`).
pub fn elbo_and_grad(
    x: MatRef<'_, f64>,
    y: &[f64],
    params: &KernelParams,
    z: MatRef<'_, f64>,
) -> Result<(f64, Vec<f64>, Mat<f64>)> {
    let t = terms(x, y, params, z)?;
    let n = x.nrows();
    let m = z.nrows();
    let dim = x.ncols();
    let s2 = params.noise_var;
    let sigma = s2.sqrt();
    let sf = params.signal_var;

    // α = (K_nn-approx + σ²I)⁻¹ y = (y − Aᵀβ)/σ².
    let atb = mat_col(&(t.a.transpose() * col_mat(&t.beta)));
    let alpha: Vec<f64> = y.iter().zip(&atb).map(|(yi, v)| (yi - v) / s2).collect();
    let binv = t.lb.inverse();

    // ∂F/∂K_mn = σ⁻¹ L⁻ᵀ [(I − B⁻¹) A + β αᵀ].
    let mut gmn = &t.a - &binv * &t.a;
    for j in 0..n {
        for i in 0..m {
            gmn[(i, j)] += t.beta[i] * alpha[j];
        }
    }
    t.l.solve_upper_in_place(&mut gmn);
    scale(&mut gmn, 1.0 / sigma);

    // ∂F/∂K_mm = −½ L⁻ᵀ [B − 2I + B⁻¹ + ββᵀ/σ²] L⁻¹.
    let aat = &t.a * t.a.transpose();
    let mut inner = Mat::from_fn(m, m, |i, j| {
        aat[(i, j)] + binv[(i, j)] + t.beta[i] * t.beta[j] / s2 - if i == j { 1.0 } else { 0.0 }
    });
    t.l.solve_upper_in_place(&mut inner);
    let mut inner_t = inner.transpose().to_owned();
    t.l.solve_upper_in_place(&mut inner_t);
    let gmm = Mat::from_fn(m, m, |i, j| -0.5 * inner_t[(i, j)]);

    let trace_aat: f64 = (0..m).map(|i| aat[(i, i)]).sum();
    let trace_binv: f64 = (0..m).map(|i| binv[(i, i)]).sum();
    let aa: f64 = alpha.iter().map(|v| v * v).sum();
    let d_s2 = -0.5 * (n as f64 - m as f64 + trace_binv) / s2 + 0.5 * aa
        + (n as f64 * sf - s2 * trace_aat) / (2.0 * s2 * s2);

    let inv_l2: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut g_signal = -(n as f64) * sf / (2.0 * s2);
    let mut g_len = vec![0.0; dim];
    let mut gz = Mat::<f64>::zeros(m, dim);
    for j in 0..n {
        for i in 0..m {
            let w = gmn[(i, j)] * t.kmn[(i, j)];
            g_signal += w;
            for d in 0..dim {
                let diff = z[(i, d)] - x[(j, d)];
                g_len[d] += w * diff * diff * inv_l2[d];
                gz[(i, d)] -= w * diff * inv_l2[d];
            }
        }
    }
    for j in 0..m {
        for i in 0..m {
            let w = gmm[(i, j)] * t.kmm[(i, j)];
            g_signal += w;
            if i == j {
                continue;
            }
            for d in 0..dim {
                let diff = z[(i, d)] - z[(j, d)];
                g_len[d] += w * diff * diff * inv_l2[d];
                gz[(i, d)] -= 2.0 * w * diff * inv_l2[d];
            }
        }
    }
    let mut grad = Vec::with_capacity(dim + 2);
    grad.push(g_signal);
    grad.extend(g_len);
    grad.push(s2 * d_s2);
    Ok((t.elbo, grad, gz))
}

impl SparseGpModel {
    /// Variational posterior at fixed hyperparameters and inducing inputs.
    pub fn new(x: MatRef<'_, f64>, y: &[f64], params: KernelParams, z: MatRef<'_, f64>) -> Result<Self> {
        let t = terms(x, y, &params, z)?;
        // w = σ⁻¹ L⁻ᵀ B⁻¹ A y.
        let sigma = params.noise_var.sqrt();
        let mut w = t.l.half_solve_upper_vec(&t.beta);
        w.iter_mut().for_each(|v| *v /= sigma);
        Ok(Self {
            posterior: Posterior {
                params,
                centers: z.to_owned(),
                weights: w,
                outer: t.l,
                inner: Some(t.lb),
            },
            elbo: t.elbo,
        })
    }
}

/// k-means++ seeding: `m` distinct rows of `x`, each drawn with probability proportional to its
/// squared distance from the rows already chosen.
pub fn kmeans_pp<R: Rng>(x: MatRef<'_, f64>, m: usize, rng: &mut R) -> Mat<f64> {
    let n = x.nrows();
    let dim = x.ncols();
    let m = m.min(n);
    let dist2 = |a: usize, b: usize| -> f64 { (0..dim).map(|d| (x[(a, d)] - x[(b, d)]).powi(2)).sum() };
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| dist2(i, chosen[0])).collect();
    while chosen.len() < m {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, b) in best.iter().enumerate() {
                if *b > 0.0 && u < *b {
                    pick = i;
                    break;
                }
                u -= b;
            }
            if best[pick] == 0.0 {
                (0..n).rev().find(|&i| best[i] > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for i in 0..n {
            best[i] = best[i].min(dist2(i, next));
        }
    }
    Mat::from_fn(m, dim, |i, d| x[(chosen[i], d)])
}

fn pack(log_params: &[f64], z: MatRef<'_, f64>) -> Vec<f64> {
    let mut v = log_params.to_vec();
    for i in 0..z.nrows() {
        for d in 0..z.ncols() {
            v.push(z[(i, d)]);
        }
    }
    v
}

fn unpack(v: &[f64], m: usize, dim: usize) -> (KernelParams, Mat<f64>) {
    let p = KernelParams::from_log(&v[..dim + 2]);
    let z = Mat::from_fn(m, dim, |i, d| v[dim + 2 + i * dim + d]);
    (p, z)
}

fn optimize(
    x: MatRef<'_, f64>,
    y: &[f64],
    log_params: &[f64],
    z: MatRef<'_, f64>,
    opts: &FitOptions,
) -> Option<lbfgs::Minimum> {
    let m = z.nrows();
    let dim = x.ncols();
    let (mut lo, mut hi) = KernelParams::log_bounds(dim);
    lo.resize(dim + 2 + m * dim, f64::NEG_INFINITY);
    hi.resize(dim + 2 + m * dim, f64::INFINITY);
    let objective = |v: &[f64]| {
        let (p, zz) = unpack(v, m, dim);
        let (f, g, gz) = elbo_and_grad(x, y, &p, zz.as_ref()).ok()?;
        let mut grad: Vec<f64> = g.iter().map(|v| -v).collect();
        for i in 0..m {
            for d in 0..dim {
                grad.push(-gz[(i, d)]);
            }
        }
        Some((-f, grad))
    };
    lbfgs::minimize(objective, &pack(log_params, z), &lo, &hi, opts.lbfgs())
}

/// Jointly optimize hyperparameters and `m` inducing inputs (k-means++ initialized), multi-start.
pub fn fit_sparse(x: MatRef<'_, f64>, y: &[f64], m: usize, opts: &FitOptions) -> Result<SparseGpModel> {
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let dim = x.ncols();
    check_inputs(x, y, &KernelParams::new(1.0, vec![1.0; dim], 1.0))?;
    if m == 0 || m > x.nrows() {
        return Err(Error::InvalidArgument(format!("need 1 ≤ m ≤ n, got m = {m}, n = {}", x.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..opts.restarts {
        let start = initial_log_params(r, dim, y, &mut rng);
        let z0 = kmeans_pp(x, m, &mut rng);
        if let Some(res) = optimize(x, y, &start, z0.as_ref(), opts) {
            if best.as_ref().is_none_or(|(f, _)| res.f < *f) {
                best = Some((res.f, res.x));
            }
        }
    }
    let (_, v) = best.ok_or(Error::TrainingFailed)?;
    let (p, z) = unpack(&v, m, dim);
    SparseGpModel::new(x, y, p, z.as_ref())
}

/// Single optimization run from given hyperparameters and inducing inputs.
pub fn fit_sparse_from(
    x: MatRef<'_, f64>,
    y: &[f64],
    params: &KernelParams,
    z: MatRef<'_, f64>,
    opts: &FitOptions,
) -> Result<SparseGpModel> {
    check_inputs(x, y, params)?;
    check_inducing(x, z)?;
    let res = optimize(x, y, &params.to_log(), z, opts).ok_or(Error::TrainingFailed)?;
    let (p, zz) = unpack(&res.x, z.nrows(), x.ncols());
    SparseGpModel::new(x, y, p, zz.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit, log_marginal_likelihood, GpModel};
    use rand_distr::StandardNormal;

    fn instance(n: usize, dim: usize, seed: u64) -> (Mat<f64>, Vec<f64>, KernelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let p = KernelParams::new(
            rng.random_range(0.5..2.0),
            (0..dim).map(|_| rng.random_range(0.5..2.0)).collect(),
            rng.random_range(0.05..0.3),
        );
        (x, y, p)
    }

    #[test]
    fn full_inducing_set_recovers_exact_gp() {
        let (x, y, p) = instance(12, 2, 1);
        let lml = log_marginal_likelihood(x.as_ref(), &y, &p).unwrap();
        let f = elbo(x.as_ref(), &y, &p, x.as_ref()).unwrap();
        assert!((f - lml).abs() < 1e-6, "{f} vs {lml}");
        let exact = GpModel::new(x.as_ref(), &y, p.clone()).unwrap();
        let sparse = SparseGpModel::new(x.as_ref(), &y, p, x.as_ref()).unwrap();
        for q in [[0.1, 0.2], [-1.5, 0.7], [3.0, -2.0]] {
            let (me, ve) = exact.predict(&q).unwrap();
            let (ms, vs) = sparse.predict(&q).unwrap();
            assert!((me - ms).abs() < 1e-6 && (ve - vs).abs() < 1e-6);
        }
    }

    #[test]
    fn single_inducing_point_is_strictly_looser() {
        let x = Mat::from_fn(10, 1, |i, _| i as f64 * 1.5);
        let y: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let p = KernelParams::new(1.0, vec![1.0], 0.1);
        let z = Mat::from_fn(1, 1, |_, _| 6.0);
        let f = elbo(x.as_ref(), &y, &p, z.as_ref()).unwrap();
        let lml = log_marginal_likelihood(x.as_ref(), &y, &p).unwrap();
        assert!(f < lml - 1e-3);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (x, y, p) = instance(15, 2, seed + 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = kmeans_pp(x.as_ref(), 4, &mut rng);
            let (_, g, gz) = elbo_and_grad(x.as_ref(), &y, &p, z.as_ref()).unwrap();
            let v = p.to_log();
            let h = 1e-5;
            for k in 0..v.len() {
                let mut a = v.clone();
                let mut b = v.clone();
                a[k] += h;
                b[k] -= h;
                let fa = elbo(x.as_ref(), &y, &KernelParams::from_log(&a), z.as_ref()).unwrap();
                let fb = elbo(x.as_ref(), &y, &KernelParams::from_log(&b), z.as_ref()).unwrap();
                let fd = (fa - fb) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "seed {seed} k {k}: {fd} vs {}", g[k]);
            }
            for i in 0..4 {
                for d in 0..2 {
                    let mut za = z.clone();
                    let mut zb = z.clone();
                    za[(i, d)] += h;
                    zb[(i, d)] -= h;
                    let fa = elbo(x.as_ref(), &y, &p, za.as_ref()).unwrap();
                    let fb = elbo(x.as_ref(), &y, &p, zb.as_ref()).unwrap();
                    let fd = (fa - fb) / (2.0 * h);
                    assert!((fd - gz[(i, d)]).abs() <= 1e-4 * fd.abs().max(1e-3), "z[{i},{d}]: {fd} vs {}", gz[(i, d)]);
                }
            }
        }
    }

    #[test]
    fn sparse_gradient_matches_finite_differences() {
        let (x, y, p) = instance(20, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = kmeans_pp(x.as_ref(), 5, &mut rng);
        let m = SparseGpModel::new(x.as_ref(), &y, p, z.as_ref()).unwrap();
        let q = [0.3, -0.2, 0.5];
        let g = m.predict_grad(&q).unwrap();
        let h = 1e-6;
        for d in 0..3 {
            let mut a = q;
            let mut b = q;
            a[d] += h;
            b[d] -= h;
            let fd = (m.predict(&a).unwrap().0 - m.predict(&b).unwrap().0) / (2.0 * h);
            assert!((fd - g[d]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
        let ev = m.posterior.eval(&q).unwrap();
        for d in 0..3 {
            let mut a = q;
            let mut b = q;
            a[d] += h;
            b[d] -= h;
            let fd = (m.predict(&a).unwrap().1 - m.predict(&b).unwrap().1) / (2.0 * h);
            assert!((fd - ev.var_grad[d]).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn kmeans_pp_picks_distinct_rows() {
        let x = Mat::from_fn(30, 2, |i, j| ((i / 3) as f64) + j as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = kmeans_pp(x.as_ref(), 10, &mut rng);
        let mut rows: Vec<(i64, i64)> = (0..10).map(|i| (z[(i, 0)] as i64, z[(i, 1)] as i64)).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 10);
    }

    #[test]
    fn smooth_function_accuracy_against_exact() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = |t: f64| (2.0 * t).sin() + 0.3 * t;
        let x = Mat::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let y: Vec<f64> = (0..n).map(|i| f(x[(i, 0)]) + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
        let opts = FitOptions { restarts: 1, seed: 3, max_iter: 200 };
        let exact = fit(x.as_ref(), &y, &opts).unwrap();
        let sparse = fit_sparse(x.as_ref(), &y, 15, &opts).unwrap();
        let test: Vec<f64> = (0..100).map(|i| -2.9 + 5.8 * i as f64 / 99.0).collect();
        let rmse = |pred: &dyn Fn(f64) -> f64| {
            (test.iter().map(|t| (pred(*t) - f(*t)).powi(2)).sum::<f64>() / test.len() as f64).sqrt()
        };
        let re = rmse(&|t| exact.predict(&[t]).unwrap().0);
        let rs = rmse(&|t| sparse.predict(&[t]).unwrap().0);
        assert!(rs <= 2.0 * re, "sparse {rs} exact {re}");
    }

    #[test]
    fn adding_inducing_points_never_lowers_the_bound() {
        let (x, y, p) = instance(30, 2, 21);
        let opts = FitOptions { restarts: 1, seed: 0, max_iter: 60 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = kmeans_pp(x.as_ref(), 3, &mut rng);
        let small = fit_sparse_from(x.as_ref(), &y, &p, z.as_ref(), &opts).unwrap();
        let extra = kmeans_pp(x.as_ref(), 2, &mut rng);
        let zz = Mat::from_fn(5, 2, |i, d| if i < 3 { small.inducing()[(i, d)] } else { extra[(i - 3, d)] });
        let big = fit_sparse_from(x.as_ref(), &y, small.params(), zz.as_ref(), &opts).unwrap();
        assert!(big.elbo >= small.elbo - 1e-8);
    }

    #[test]
    fn rejects_bad_inducing_count() {
        let (x, y, p) = instance(5, 2, 1);
        let z = Mat::from_fn(6, 2, |_, _| 0.0);
        assert!(elbo(x.as_ref(), &y, &p, z.as_ref()).is_err());
        assert!(fit_sparse(x.as_ref(), &y, 0, &FitOptions::default()).is_err());
    }
}
