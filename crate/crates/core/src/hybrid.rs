//! Hybrid surrogate: an OLS model of the DC outputs plus one GP per output on the AC − DC
//! residuals, and first-order (TA1) propagation of input uncertainty through it.
//!
//! Everything is trained in standardized coordinates; the public prediction methods work in
//! physical units and carry the chain rule through the standardizers.

use faer::linalg::solvers::SolveLstsq;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccopf::DispatchDecision;
use crate::dataset::{Dataset, InputLayout, Standardizer, UncertaintySpec};
use crate::error::{Error, Result};
use crate::gp::{fit, fit_sparse, FitOptions, GpModel, KernelParams, Posterior, SparseGpModel};
use crate::grid::GridCase;
use crate::linalg::{mat_from_rows, Cholesky};

/// Ridge weight used when the OLS design is rank deficient.
pub const RIDGE: f64 = 1e-8;

/// Affine map `y = W x + b` (outputs × inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    /// True when the ridge fallback was used.
    pub ridge: bool,
}

impl LinearModel {
    pub fn n_inputs(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn n_outputs(&self) -> usize {
        self.b.len()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

fn column_is_constant(rows: &[Vec<f64>], k: usize) -> bool {
    let first = rows[0][k];
    rows.iter().all(|r| r[k] == first)
}

/// Ordinary least squares per output column, with an intercept.
///
/// Constant input columns are collinear with the intercept and get zero coefficients; constant
/// output columns get a zero row and the constant as intercept. A design that is still rank
/// deficient falls back to ridge regression with weight [`RIDGE`].
pub fn fit_linear(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<LinearModel> {
    if x.is_empty() {
        return Err(Error::Empty("linear fit needs at least one row"));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} input rows, {} output rows", x.len(), y.len())));
    }
    let n = x.len();
    let d = x[0].len();
    let p = y[0].len();
    if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("ragged rows in linear fit".into()));
    }
    let active: Vec<usize> = (0..d).filter(|&k| !column_is_constant(x, k)).collect();
    let varying: Vec<usize> = (0..p).filter(|&j| !column_is_constant(y, j)).collect();

    let mut w = vec![vec![0.0; d]; p];
    let mut b: Vec<f64> = (0..p).map(|j| y[0][j]).collect();
    if varying.is_empty() {
        return Ok(LinearModel { w, b, ridge: false });
    }

    let cols = active.len() + 1;
    let a = Mat::from_fn(n, cols, |i, c| if c < active.len() { x[i][active[c]] } else { 1.0 });
    let rhs = Mat::from_fn(n, varying.len(), |i, c| y[i][varying[c]]);

    let full_rank = n >= cols && {
        let qr = a.qr();
        let r = qr.thin_R();
        let scale = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        (0..cols).all(|i| r[(i, i)].abs() > 1e-10 * scale)
    };
    let (coef, ridge) = if full_rank {
        (a.qr().solve_lstsq(&rhs), false)
    } else {
        // (AᵀA + λI) c = Aᵀy; the intercept is penalized too, which is harmless at λ = 1e−8.
        let mut ata = a.transpose() * &a;
        for i in 0..cols {
            ata[(i, i)] += RIDGE;
        }
        let chol = Cholesky::new(ata.as_ref()).ok_or(Error::RankDeficient)?;
        let aty = a.transpose() * &rhs;
        (chol.solve_mat(aty.as_ref()), true)
    };
    for (c, &j) in varying.iter().enumerate() {
        for (k, &col) in active.iter().enumerate() {
            w[j][col] = coef[(k, c)];
        }
        b[j] = coef[(active.len(), c)];
    }
    if w.iter().flatten().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient);
    }
    Ok(LinearModel { w, b, ridge })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpMode {
    Exact,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridOptions {
    pub mode: GpMode,
    /// Inducing points per output (sparse mode).
    pub inducing: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            mode: GpMode::Exact,
            inducing: 100,
            restarts: 3,
            max_iter: 200,
            seed: 0,
        }
    }
}

impl HybridOptions {
    fn fit_options(&self, output: usize) -> FitOptions {
        FitOptions {
            restarts: self.restarts,
            seed: self
                .seed
                .wrapping_add((output as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            max_iter: self.max_iter,
        }
    }
}

/// Trained residual GP of one output, in the form needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputGp {
    pub params: KernelParams,
    /// Standardized residual targets at the shared training inputs.
    pub targets: Vec<f64>,
    /// Inducing inputs (sparse mode).
    pub inducing: Option<Vec<Vec<f64>>>,
    /// NLML (exact) or negative ELBO (sparse) at the optimum.
    pub objective: f64,
}

/// Physical-unit prediction for one output with derivatives in the physical inputs.
#[derive(Debug, Clone)]
pub struct OutputEval {
    pub mean: f64,
    pub grad: Vec<f64>,
    /// GP posterior variance of the residual.
    pub var: f64,
    pub var_grad: Vec<f64>,
    /// Hessian of the mean, row-major `D × D`.
    pub hessian: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridModel {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub x_std: Standardizer,
    pub dc_std: Standardizer,
    pub r_std: Standardizer,
    /// Standardized inputs to standardized DC outputs.
    pub linear: LinearModel,
    pub mode: GpMode,
    /// Standardized training inputs shared by every output GP.
    pub train_x: Vec<Vec<f64>>,
    pub gps: Vec<Option<OutputGp>>,
    /// Hash of the case the training data came from (empty when unknown).
    #[serde(default)]
    pub case_hash: String,
    #[serde(skip)]
    posteriors: Vec<Option<Posterior>>,
}

fn build_posterior(mode: GpMode, x: &Mat<f64>, gp: &OutputGp) -> Result<Posterior> {
    match (mode, &gp.inducing) {
        (GpMode::Exact, _) => Ok(GpModel::new(x.as_ref(), &gp.targets, gp.params.clone())?.posterior),
        (GpMode::Sparse, Some(z)) => {
            let z = mat_from_rows(z, x.ncols());
            Ok(SparseGpModel::new(x.as_ref(), &gp.targets, gp.params.clone(), z.as_ref())?.posterior)
        }
        (GpMode::Sparse, None) => Err(Error::Format("sparse output GP without inducing inputs".into())),
    }
}

/// Train the linear model on the DC outputs and one residual GP per non-constant output.
///
/// Each output uses its own derived seed, so the result does not depend on thread scheduling.
pub fn fit_hybrid(train: &Dataset, opts: &HybridOptions) -> Result<HybridModel> {
    if train.samples.len() < 2 {
        return Err(Error::Empty("hybrid training needs at least two samples"));
    }
    let xs: Vec<Vec<f64>> = train.samples.iter().map(|s| s.x.clone()).collect();
    let ydc: Vec<Vec<f64>> = train.samples.iter().map(|s| s.y_dc.clone()).collect();
    let res: Vec<Vec<f64>> = train.samples.iter().map(|s| s.r.clone()).collect();
    let x_std = Standardizer::fit(&xs)?;
    let dc_std = Standardizer::fit(&ydc)?;
    let r_std = Standardizer::fit(&res)?;
    let train_x = x_std.apply_rows(&xs);
    let linear = fit_linear(&train_x, &dc_std.apply_rows(&ydc))?;
    let rz = r_std.apply_rows(&res);

    let dim = x_std.dim();
    let xm = mat_from_rows(&train_x, dim);
    let n_out = r_std.dim();
    let fitted: Vec<Result<Option<(OutputGp, Posterior)>>> = (0..n_out)
        .into_par_iter()
        .map(|j| {
            if r_std.constant[j] {
                return Ok(None);
            }
            let y: Vec<f64> = rz.iter().map(|r| r[j]).collect();
            let fo = opts.fit_options(j);
            let (gp, post) = match opts.mode {
                GpMode::Exact => {
                    let m = fit(xm.as_ref(), &y, &fo)?;
                    let gp = OutputGp {
                        params: m.params().clone(),
                        targets: y,
                        inducing: None,
                        objective: m.nlml,
                    };
                    (gp, m.posterior)
                }
                GpMode::Sparse => {
                    let m = fit_sparse(xm.as_ref(), &y, opts.inducing.min(y.len()), &fo)?;
                    let z = crate::linalg::mat_to_rows(m.inducing());
                    let gp = OutputGp {
                        params: m.params().clone(),
                        targets: y,
                        inducing: Some(z),
                        objective: -m.elbo,
                    };
                    (gp, m.posterior)
                }
            };
            Ok(Some((gp, post)))
        })
        .collect();
    let mut gps = Vec::with_capacity(n_out);
    let mut posteriors = Vec::with_capacity(n_out);
    for f in fitted {
        match f? {
            Some((g, p)) => {
                gps.push(Some(g));
                posteriors.push(Some(p));
            }
            None => {
                gps.push(None);
                posteriors.push(None);
            }
        }
    }
    Ok(HybridModel {
        input_names: train.input_names.clone(),
        output_names: train.output_names.clone(),
        x_std,
        dc_std,
        r_std,
        linear,
        mode: opts.mode,
        train_x,
        gps,
        case_hash: String::new(),
        posteriors,
    })
}

impl HybridModel {
    pub fn n_inputs(&self) -> usize {
        self.x_std.dim()
    }

    pub fn n_outputs(&self) -> usize {
        self.dc_std.dim()
    }

    /// Recreate the cached factorizations (after deserialization).
    pub fn rebuild(&mut self) -> Result<()> {
        let x = mat_from_rows(&self.train_x, self.n_inputs());
        let mode = self.mode;
        self.posteriors = self
            .gps
            .par_iter()
            .map(|g| g.as_ref().map(|g| build_posterior(mode, &x, g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: Self = serde_json::from_str(text)?;
        if m.gps.len() != m.n_outputs() || m.linear.n_outputs() != m.n_outputs() {
            return Err(Error::Format("output count differs between model blocks".into()));
        }
        m.rebuild()?;
        Ok(m)
    }

    /// The same model with every GP contribution removed.
    pub fn without_gp(&self) -> Self {
        let mut m = self.clone();
        m.gps = vec![None; m.gps.len()];
        m.posteriors = vec![None; m.gps.len()];
        // With no residual GP the residual defaults to its training mean; drop that too.
        m.r_std.mean = vec![0.0; m.r_std.mean.len()];
        m
    }

    pub fn has_gp(&self, j: usize) -> bool {
        self.posteriors.get(j).is_some_and(Option::is_some)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(Error::Dimension(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.n_inputs()
            )));
        }
        Ok(())
    }

    /// d(standardized x_k)/d(x_k).
    fn input_scale(&self) -> Vec<f64> {
        self.x_std
            .std
            .iter()
            .zip(&self.x_std.constant)
            .map(|(s, c)| if *c { 0.0 } else { 1.0 / s })
            .collect()
    }

    /// Physical-space gradient of the linear part, one row per output.
    pub fn linear_jacobian(&self) -> Vec<Vec<f64>> {
        let sx = self.input_scale();
        self.linear
            .w
            .iter()
            .zip(&self.dc_std.std)
            .map(|(row, s)| row.iter().zip(&sx).map(|(w, d)| s * w * d).collect())
            .collect()
    }

    /// DC-model (linear) prediction of every output.
    pub fn predict_linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.dc_std.invert(&self.linear.predict(&self.x_std.apply(x))))
    }

    /// Mean and GP variance of every output.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        let lin = self.predict_linear(x)?;
        let xs = self.x_std.apply(x);
        lin.iter()
            .enumerate()
            .map(|(j, l)| {
                let s = self.r_std.std[j];
                match &self.posteriors[j] {
                    Some(p) => {
                        let (m, v) = p.predict(&xs)?;
                        Ok((l + self.r_std.mean[j] + s * m, s * s * v))
                    }
                    None => Ok((l + self.r_std.mean[j], 0.0)),
                }
            })
            .collect()
    }

    /// Mean of every output, skipping the variance solves.
    pub fn predict_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let lin = self.predict_linear(x)?;
        let xs = self.x_std.apply(x);
        lin.iter()
            .enumerate()
            .map(|(j, l)| {
                let base = l + self.r_std.mean[j];
                match &self.posteriors[j] {
                    Some(p) => Ok(base + self.r_std.std[j] * p.mean(&xs)?),
                    None => Ok(base),
                }
            })
            .collect()
    }

    /// Mean of output `j` and its gradient in physical inputs.
    pub fn mean_and_grad(&self, j: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let xs = self.x_std.apply(x);
        let sx = self.input_scale();
        let lin = self.dc_std.invert(&self.linear.predict(&xs))[j];
        let s = self.r_std.std[j];
        let mut grad: Vec<f64> = self.linear.w[j]
            .iter()
            .zip(&sx)
            .map(|(w, d)| self.dc_std.std[j] * w * d)
            .collect();
        let mut mean = lin + self.r_std.mean[j];
        if let Some(p) = &self.posteriors[j] {
            let (m, g) = p.mean_and_grad(&xs)?;
            mean += s * m;
            for k in 0..grad.len() {
                grad[k] += s * g[k] * sx[k];
            }
        }
        Ok((mean, grad))
    }

    /// Mean, GP variance and their physical-input derivatives for output `j`.
    pub fn eval_output(&self, j: usize, x: &[f64]) -> Result<OutputEval> {
        let (mean, grad) = self.mean_and_grad(j, x)?;
        let dim = self.n_inputs();
        let mut out = OutputEval {
            mean,
            grad,
            var: 0.0,
            var_grad: vec![0.0; dim],
            hessian: vec![0.0; dim * dim],
        };
        if let Some(p) = &self.posteriors[j] {
            let xs = self.x_std.apply(x);
            let sx = self.input_scale();
            let s = self.r_std.std[j];
            let e = p.eval(&xs)?;
            out.var = s * s * e.var;
            for a in 0..dim {
                out.var_grad[a] = s * s * e.var_grad[a] * sx[a];
                for b in 0..dim {
                    out.hessian[a * dim + b] = s * e.hessian[a * dim + b] * sx[a] * sx[b];
                }
            }
        }
        Ok(out)
    }
}

/// Gaussian input moments induced by a dispatch decision and the uncertainty spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDistribution {
    pub mu_x: Vec<f64>,
    /// Row-major `D × D`.
    pub sigma_x: Vec<Vec<f64>>,
}

/// Linear response `∂x/∂ω` (D × U): generators move by `−α_g Σω`, uncertain inputs by `ω`.
pub fn response_matrix(layout: &InputLayout, alpha: &[f64]) -> Vec<Vec<f64>> {
    let ng = layout.n_generators();
    let u = layout.uncertain_buses.len();
    let mut j = vec![vec![0.0; u]; layout.dim()];
    for (g, row) in j.iter_mut().take(ng).enumerate() {
        row.iter_mut().for_each(|v| *v = -alpha[g]);
    }
    for k in 0..u {
        j[ng + k][k] = 1.0;
    }
    j
}

pub fn build_input_distribution(
    case: &GridCase,
    layout: &InputLayout,
    decision: &DispatchDecision,
    spec: &UncertaintySpec,
) -> Result<InputDistribution> {
    decision.validate(layout)?;
    if spec.sigma.len() != layout.uncertain_buses.len() {
        return Err(Error::Dimension(format!(
            "{} sigmas for {} uncertain inputs",
            spec.sigma.len(),
            layout.uncertain_buses.len()
        )));
    }
    let mut mu_x = decision.p_g.clone();
    mu_x.extend(layout.nominal_uncertain(case));
    let j = response_matrix(layout, &decision.alpha);
    let d = layout.dim();
    let var: Vec<f64> = spec.sigma.iter().map(|s| s * s).collect();
    let sigma_x = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| (0..var.len()).map(|k| j[a][k] * var[k] * j[b][k]).sum())
                .collect()
        })
        .collect();
    Ok(InputDistribution { mu_x, sigma_x })
}

/// Output moments from TA1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// First-order Taylor propagation: `μ_j = f_j(μ_x)`, `σ_j² = v_j(μ_x) + ∇f_jᵀ Σ_x ∇f_j`.
pub fn ta1_propagate(model: &HybridModel, dist: &InputDistribution) -> Result<Propagation> {
    let d = model.n_inputs();
    if dist.mu_x.len() != d || dist.sigma_x.len() != d || dist.sigma_x.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("input distribution does not match the model".into()));
    }
    let xs = model.x_std.apply(&dist.mu_x);
    let mut mean = Vec::with_capacity(model.n_outputs());
    let mut var = Vec::with_capacity(model.n_outputs());
    for j in 0..model.n_outputs() {
        let (m, g) = model.mean_and_grad(j, &dist.mu_x)?;
        let gp_var = match &model.posteriors[j] {
            Some(p) => model.r_std.std[j].powi(2) * p.predict(&xs)?.1,
            None => 0.0,
        };
        let prop: f64 = (0..d)
            .map(|a| g[a] * (0..d).map(|b| dist.sigma_x[a][b] * g[b]).sum::<f64>())
            .sum();
        mean.push(m);
        var.push(gp_var + prop.max(0.0));
    }
    Ok(Propagation { mean, var })
}
