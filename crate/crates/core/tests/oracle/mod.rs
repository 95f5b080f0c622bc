//! Reference implementations written independently of the library: Gauss–Seidel AC power flow,
//! dense-formula GP regression and central finite differences.
#![allow(dead_code)]

use gpccopf_core::grid::{BusKind, GridCase};
use num_complex::Complex64;

/// Admittance matrix assembled from the π model of each branch.
pub fn ybus(case: &GridCase) -> Vec<Vec<Complex64>> {
    let n = case.buses.len();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in &case.branches {
        let ys = Complex64::new(br.r, br.x).inv();
        let bc = Complex64::new(0.0, 0.5 * br.b_charging);
        let a = br.tap_ratio;
        let (i, j) = (br.from_bus, br.to_bus);
        y[i][i] += (ys + bc) / (a * a);
        y[j][j] += ys + bc;
        y[i][j] -= ys / a;
        y[j][i] -= ys / a;
    }
    for (i, b) in case.buses.iter().enumerate() {
        y[i][i] += Complex64::new(b.g_shunt, b.b_shunt);
    }
    y
}

pub struct GsResult {
    pub v: Vec<Complex64>,
    pub iterations: usize,
    pub mismatch: f64,
}

/// Complex power injected at every bus for voltages `v`.
pub fn injections(y: &[Vec<Complex64>], v: &[Complex64]) -> Vec<Complex64> {
    (0..v.len())
        .map(|i| {
            let cur: Complex64 = (0..v.len()).map(|k| y[i][k] * v[k]).sum();
            v[i] * cur.conj()
        })
        .collect()
}

/// Gauss–Seidel with scheduled active injections `p` (slack entry ignored), reactive loads and
/// voltage setpoints from the case.
pub fn gauss_seidel(case: &GridCase, p: &[f64], tol: f64, max_iter: usize) -> GsResult {
    let y = ybus(case);
    let n = case.buses.len();
    let mut v: Vec<Complex64> = case
        .buses
        .iter()
        .map(|b| match b.kind {
            BusKind::Pq => Complex64::new(1.0, 0.0),
            _ => Complex64::new(b.v_setpoint, 0.0),
        })
        .collect();
    let q_sched: Vec<f64> = case.buses.iter().map(|b| -b.q_load).collect();
    let mismatch = |v: &[Complex64]| {
        let s = injections(&y, v);
        (0..n)
            .filter_map(|i| match case.buses[i].kind {
                BusKind::Slack => None,
                BusKind::Pv => Some((s[i].re - p[i]).abs()),
                BusKind::Pq => Some((s[i].re - p[i]).abs().max((s[i].im - q_sched[i]).abs())),
            })
            .fold(0.0, f64::max)
    };
    for it in 0..max_iter {
        for i in 0..n {
            let kind = case.buses[i].kind;
            if kind == BusKind::Slack {
                continue;
            }
            let others: Complex64 = (0..n).filter(|&k| k != i).map(|k| y[i][k] * v[k]).sum();
            let q = if kind == BusKind::Pv {
                let cur = others + y[i][i] * v[i];
                -(v[i].conj() * cur).im
            } else {
                q_sched[i]
            };
            let s = Complex64::new(p[i], q);
            let mut vi = ((s / v[i]).conj() - others) / y[i][i];
            if kind == BusKind::Pv {
                vi = vi / vi.norm() * case.buses[i].v_setpoint;
            }
            v[i] = vi;
        }
        let m = mismatch(&v);
        if m < tol {
            return GsResult { v, iterations: it + 1, mismatch: m };
        }
    }
    let m = mismatch(&v);
    GsResult { v, iterations: max_iter, mismatch: m }
}

/// Solve `a x = b` by Gauss–Jordan elimination with partial pivoting.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, v)| {
        let mut row = r.clone();
        row.push(*v);
        row
    }).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        for k in c..=n {
            m[c][k] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.iter().map(|r| r[n]).collect()
}

/// `ln |det a|` by Gaussian elimination with partial pivoting.
pub fn log_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        acc += m[c][c].abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    acc
}

pub fn se_kernel(a: &[f64], b: &[f64], sf2: f64, ell: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for d in 0..a.len() {
        r2 += ((a[d] - b[d]) / ell[d]).powi(2);
    }
    sf2 * (-0.5 * r2).exp()
}

/// Textbook GP posterior mean and latent variance at `xs`.
pub fn gp_predict(x: &[Vec<f64>], y: &[f64], sf2: f64, ell: &[f64], sn2: f64, xs: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = se_kernel(&x[i], &x[j], sf2, ell) + if i == j { sn2 } else { 0.0 };
        }
    }
    let ks: Vec<f64> = x.iter().map(|xi| se_kernel(xi, xs, sf2, ell)).collect();
    let alpha = solve_dense(&k, y);
    let v = solve_dense(&k, &ks);
    let mean = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let var = sf2 - ks.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (mean, var)
}

/// `−log N(y | 0, K + σ_n² I)` from the dense formula.
pub fn gp_nlml(x: &[Vec<f64>], y: &[f64], sf2: f64, ell: &[f64], sn2: f64) -> f64 {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = se_kernel(&x[i], &x[j], sf2, ell) + if i == j { sn2 } else { 0.0 };
        }
    }
    let alpha = solve_dense(&k, y);
    let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    0.5 * fit + 0.5 * log_det(&k) + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Central differences of `f` at `x` with step `h`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Closed-form state of a slack bus at `1∠0` feeding a load `p + jq` over a series reactance `x`:
/// `V² = u` with `u² + (2qx − 1)u + x²(p² + q²) = 0` (larger root), `V sinθ = −p x`.
pub fn two_bus_state(p: f64, q: f64, x: f64) -> (f64, f64) {
    let b = 2.0 * q * x - 1.0;
    let c = x * x * (p * p + q * q);
    let u = 0.5 * (-b + (b * b - 4.0 * c).sqrt());
    let v = u.sqrt();
    (v, (-p * x / v).asin())
}
