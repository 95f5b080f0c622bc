//! Line-search SQP with a damped BFGS Hessian, elastic (ℓ∞) QP subproblems and a second-order
//! correction against the Maratos effect.
//!
//! One elastic variable is shared by all nonlinear constraints, so the QP size does not grow with
//! the constraint count (scenario problems have thousands of rows and a handful of unknowns).
//!
//! ```text
//! min f(x)   s.t.   c(x) ≥ 0,   E x = e,   lower ≤ x ≤ upper
//! ```

use faer::Mat;

use crate::error::Result;
use crate::optim::qp::Qp;

/// Objective and constraint values at a point, with first derivatives.
#[derive(Debug, Clone)]
pub struct NlpEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    /// Rows are constraint gradients.
    pub jac: Mat<f64>,
}

pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Linear equalities `E x = e`.
    fn equalities(&self) -> (Mat<f64>, Vec<f64>);
    fn eval(&self, x: &[f64]) -> Result<NlpEval>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpOptions {
    pub max_iter: usize,
    /// KKT stationarity / complementarity tolerance (objective units).
    pub kkt_tol: f64,
    /// Maximum constraint violation accepted at a solution.
    pub feas_tol: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            kkt_tol: 1e-8,
            feas_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub c: Vec<f64>,
    /// Multipliers of `c(x) ≥ 0`.
    pub lambda: Vec<f64>,
    pub status: SqpStatus,
    pub iterations: usize,
    pub kkt: f64,
    pub max_violation: f64,
}

fn max_violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0f64, |m, v| m.max(-v))
}

struct Subproblem {
    d: Vec<f64>,
    lambda: Vec<f64>,
    elastic: f64,
}

fn solve_subproblem(
    b: &Mat<f64>,
    grad: &[f64],
    c: &[f64],
    jac: &Mat<f64>,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
    eq: &(Mat<f64>, Vec<f64>),
    rho: f64,
) -> Result<Subproblem> {
    let n = x.len();
    let m = c.len();
    let nv = n + 1;
    let h = Mat::from_fn(nv, nv, |i, j| {
        if i < n && j < n {
            b[(i, j)]
        } else if i == j {
            1e-10
        } else {
            0.0
        }
    });
    let mut cvec = grad.to_vec();
    cvec.push(rho);

    let (e_mat, e_rhs) = eq;
    let ex = crate::linalg::mat_vec(e_mat.as_ref(), x);
    let e = Mat::from_fn(e_mat.nrows(), nv, |i, j| if j < n { e_mat[(i, j)] } else { 0.0 });
    let f: Vec<f64> = e_rhs.iter().zip(&ex).map(|(r, v)| r - v).collect();

    let finite_lo: Vec<usize> = (0..n).filter(|&i| lower[i].is_finite()).collect();
    let finite_hi: Vec<usize> = (0..n).filter(|&i| upper[i].is_finite()).collect();
    let q = m + 1 + finite_lo.len() + finite_hi.len();
    let mut g = Mat::<f64>::zeros(q, nv);
    let mut lo = Vec::with_capacity(q);
    for i in 0..m {
        for j in 0..n {
            g[(i, j)] = jac[(i, j)];
        }
        g[(i, n)] = 1.0;
        lo.push(-c[i]);
    }
    g[(m, n)] = 1.0;
    lo.push(0.0);
    let mut r = m + 1;
    for &i in &finite_lo {
        g[(r, i)] = 1.0;
        lo.push(lower[i] - x[i]);
        r += 1;
    }
    for &i in &finite_hi {
        g[(r, i)] = -1.0;
        lo.push(x[i] - upper[i]);
        r += 1;
    }
    let sol = Qp { h, c: cvec, e, f, g, lo }.solve()?;
    Ok(Subproblem {
        d: sol.x[..n].to_vec(),
        lambda: sol.z[..m].to_vec(),
        elastic: sol.x[n].max(0.0),
    })
}

fn lagrangian_grad(ev: &NlpEval, lambda: &[f64]) -> Vec<f64> {
    let jtl = crate::linalg::mat_t_vec(ev.jac.as_ref(), lambda);
    ev.grad.iter().zip(&jtl).map(|(g, j)| g - j).collect()
}

fn bfgs_update(b: &mut Mat<f64>, s: &[f64], y: &[f64]) {
    let n = s.len();
    let bs = crate::linalg::mat_vec(b.as_ref(), s);
    let sbs: f64 = s.iter().zip(&bs).map(|(a, c)| a * c).sum();
    let sy: f64 = s.iter().zip(y).map(|(a, c)| a * c).sum();
    if !(sbs > 1e-300) {
        return;
    }
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r: Vec<f64> = (0..n).map(|i| theta * y[i] + (1.0 - theta) * bs[i]).collect();
    let sr: f64 = s.iter().zip(&r).map(|(a, c)| a * c).sum();
    if !(sr > 1e-300) {
        return;
    }
    for j in 0..n {
        for i in 0..n {
            b[(i, j)] += r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
        }
    }
}

/// Solve from `x0`; the start must satisfy the linear equalities.
pub fn solve<P: NlpProblem>(problem: &P, x0: &[f64], opts: SqpOptions) -> Result<SqpResult> {
    let n = problem.dim();
    let (lower, upper) = problem.bounds();
    let eq = problem.equalities();
    let mut x: Vec<f64> = x0.iter().zip(lower.iter().zip(&upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect();
    let mut ev = problem.eval(&x)?;
    let m = ev.c.len();
    let mut b = Mat::<f64>::identity(n, n);
    let mut rho = 10.0f64;
    let mut lambda = vec![0.0; m];
    let mut kkt = f64::INFINITY;

    let merit = |ev: &NlpEval, rho: f64| ev.f + rho * max_violation(&ev.c);
    let mut failures = 0usize;
    let mut iterations = opts.max_iter;

    for it in 0..opts.max_iter {
        let mut sub = solve_subproblem(&b, &ev.grad, &ev.c, &ev.jac, &x, &lower, &upper, &eq, rho)?;
        // Raise the penalty only while doing so buys linearized feasibility.
        while sub.elastic > 1e-9 && rho < 1e8 {
            // A subproblem that fails at a larger penalty is ill-conditioned, not informative.
            let Ok(next) = solve_subproblem(&b, &ev.grad, &ev.c, &ev.jac, &x, &lower, &upper, &eq, 10.0 * rho) else {
                break;
            };
            if next.elastic > 0.9 * sub.elastic {
                break;
            }
            rho *= 10.0;
            sub = next;
        }
        if sub.elastic <= 1e-9 {
            // The ℓ∞ penalty is exact once ρ exceeds the ℓ1 norm of the multipliers.
            let lam_sum: f64 = sub.lambda.iter().map(|v| v.max(0.0)).sum();
            if rho < 2.0 * lam_sum {
                rho = 2.0 * lam_sum;
            }
        }
        lambda.clone_from(&sub.lambda);

        let bd = crate::linalg::mat_vec(b.as_ref(), &sub.d);
        let comp = ev
            .c
            .iter()
            .zip(&lambda)
            .fold(0.0f64, |a, (c, l)| a.max((c * l).abs()));
        kkt = crate::linalg::norm_inf(&bd).max(comp);
        let viol = max_violation(&ev.c);
        let step_norm = crate::linalg::norm_inf(&sub.d);
        if (kkt <= opts.kkt_tol || step_norm <= 1e-12) && viol <= opts.feas_tol {
            return Ok(SqpResult {
                f: ev.f,
                c: ev.c,
                x,
                lambda,
                status: SqpStatus::Optimal,
                iterations: it,
                kkt,
                max_violation: viol,
            });
        }
        if step_norm <= 1e-12 && sub.elastic > 1e-9 {
            return Ok(SqpResult {
                f: ev.f,
                c: ev.c,
                x,
                lambda,
                status: SqpStatus::Infeasible,
                iterations: it,
                kkt,
                max_violation: viol,
            });
        }

        let phi0 = merit(&ev, rho);
        // Near a solution the predicted decrease drops below the round-off in the merit value.
        let noise = 8.0 * f64::EPSILON * (1.0 + phi0.abs());
        let lin_viol: f64 = {
            let jd = crate::linalg::mat_vec(ev.jac.as_ref(), &sub.d);
            ev.c.iter().zip(&jd).fold(0.0f64, |a, (c, j)| a.max(-(c + j)))
        };
        let gd: f64 = ev.grad.iter().zip(&sub.d).map(|(g, d)| g * d).sum();
        let dphi = gd - rho * (max_violation(&ev.c) - lin_viol);

        let try_point = |d: &[f64], t: f64| -> Option<(Vec<f64>, NlpEval)> {
            let xt: Vec<f64> = x
                .iter()
                .zip(d)
                .zip(lower.iter().zip(&upper))
                .map(|((xi, di), (l, u))| (xi + t * di).clamp(*l, *u))
                .collect();
            problem.eval(&xt).ok().map(|e| (xt, e))
        };

        let mut accepted: Option<(Vec<f64>, NlpEval)> = None;
        if let Some((xt, et)) = try_point(&sub.d, 1.0) {
            if merit(&et, rho) <= phi0 + noise + 1e-4 * dphi.min(0.0) {
                accepted = Some((xt, et));
            } else {
                // Second-order correction: re-linearize the constraints at the trial point.
                let jd = crate::linalg::mat_vec(ev.jac.as_ref(), &sub.d);
                let c_soc: Vec<f64> = et.c.iter().zip(&jd).map(|(c, j)| c - j).collect();
                if let Ok(soc) =
                    solve_subproblem(&b, &ev.grad, &c_soc, &ev.jac, &x, &lower, &upper, &eq, rho)
                {
                    if let Some((xs, es)) = try_point(&soc.d, 1.0) {
                        if merit(&es, rho) <= phi0 + noise + 1e-4 * dphi.min(0.0) {
                            accepted = Some((xs, es));
                        }
                    }
                }
            }
        }
        if accepted.is_none() {
            let mut t = 0.5;
            while t > 1e-10 {
                if let Some((xt, et)) = try_point(&sub.d, t) {
                    if merit(&et, rho) <= phi0 + noise + 1e-4 * t * dphi.min(0.0) {
                        accepted = Some((xt, et));
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        let Some((xn, en)) = accepted else {
            // No progress along the direction: restart the curvature model.
            // A second failure from a fresh model means the merit is flat to evaluation noise.
            failures += 1;
            if step_norm <= 1e-9 || failures >= 2 {
                iterations = it + 1;
                break;
            }
            b = Mat::identity(n, n);
            continue;
        };
        failures = 0;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, c)| a - c).collect();
        let g_old = lagrangian_grad(&ev, &lambda);
        let g_new = lagrangian_grad(&en, &lambda);
        let y: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, c)| a - c).collect();
        bfgs_update(&mut b, &s, &y);
        x = xn;
        ev = en;
    }
    let viol = max_violation(&ev.c);
    Ok(SqpResult {
        f: ev.f,
        c: ev.c,
        x,
        lambda,
        status: if viol <= opts.feas_tol {
            SqpStatus::MaxIter
        } else {
            SqpStatus::Infeasible
        },
        iterations,
        kkt,
        max_violation: viol,
    })
}
