//! Limited-memory BFGS with simple box projection and Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease `(f_k − f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)` falls below this.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            memory: 10,
            grad_tol: 1e-8,
            f_tol: 2.2e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| {
            if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` over the box `[lower, upper]`.
///
/// `f` returns `None` where the objective is undefined; such points are rejected by the line
/// search. Returns `None` if the starting point itself is undefined.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: LbfgsOptions,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n);
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        f(x).filter(|(v, g)| v.is_finite() && g.iter().all(|gi| gi.is_finite()))
    };
    let mut evaluations = 0;
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = eval(&x, &mut evaluations)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let pg = projected_gradient(&x, &g, lower, upper);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !history.is_empty();
            let mut d: Vec<f64> = if use_memory {
                two_loop(&pg, &history)
            } else {
                pg.iter().map(|v| -v).collect()
            };
            for i in 0..n {
                if pg[i] == 0.0 {
                    d[i] = 0.0;
                }
            }
            let slope = dot(&pg, &d);
            if !(slope < 0.0) {
                history.clear();
                continue;
            }
            let mut t = if use_memory {
                1.0
            } else {
                (1.0 / d.iter().fold(0.0f64, |m, v| m.max(v.abs()))).min(1.0)
            };
            for _ in 0..40 {
                let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                project(&mut xt, lower, upper);
                let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| *s == 0.0) {
                    break;
                }
                if let Some((ft, gt)) = eval(&xt, &mut evaluations) {
                    if ft <= fx + 1e-4 * dot(&g, &step) {
                        accepted = Some((xt, ft, gt, step));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            history.clear();
        }

        let Some((xn, fnew, gn, s)) = accepted else {
            break;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = (fx - fnew) / fx.abs().max(fnew.abs()).max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if decrease <= opts.f_tol {
            converged = true;
            break;
        }
    }
    Some(Minimum {
        x,
        f: fx,
        grad: g,
        iterations,
        evaluations,
        converged,
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let (s, y, _) = history.back().expect("non-empty history");
    let gamma = dot(s, y) / dot(y, y);
    for qi in &mut q {
        *qi *= gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
