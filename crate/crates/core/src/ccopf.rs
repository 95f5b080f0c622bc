//! Chance-constrained economic dispatch on the hybrid surrogate.
//!
//! Unknowns are the non-slack setpoints `p_g` and the participation factors `α` (slack last).
//! Output constraints are tightened by `z·σ` with `z = Φ⁻¹(1 − ε)` and `σ` from TA1; the
//! generator limits have exact Gaussian margins because their response is linear in `ω`.
//! The scenario baseline reuses the same problem with `z = 0` plus hard constraints on the
//! surrogate mean at each sampled `ω`.

use std::time::Instant;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::dataset::{InputLayout, UncertaintySpec};
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::hybrid::{build_input_distribution, ta1_propagate, HybridModel};
use crate::optim::sqp::{self, NlpEval, NlpProblem, SqpOptions, SqpStatus};
use crate::powerflow::OutputLayout;

/// Floor added under the square root of output variances.
pub const SIGMA_FLOOR: f64 = 1e-16;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational approximation refined by one Halley step.
pub fn quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile needs 0 < p < 1, got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    };
    let x = if p < P_LOW {
        tail(p)
    } else if p > 1.0 - P_LOW {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = if x > 0.0 {
        // Upper-tail form avoids cancellation in Φ(x) − p.
        (1.0 - p) - 0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
    } else {
        normal_cdf(x) - p
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Generator setpoints and participation factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchDecision {
    /// Setpoints of the non-slack generators, in [`InputLayout::generators`] order (pu).
    pub p_g: Vec<f64>,
    /// Participation factors of the same generators followed by the slack generator.
    pub alpha: Vec<f64>,
}

impl DispatchDecision {
    pub fn validate(&self, layout: &InputLayout) -> Result<()> {
        let ng = layout.n_generators();
        if self.p_g.len() != ng || self.alpha.len() != ng + 1 {
            return Err(Error::Dimension(format!(
                "decision has {} setpoints and {} factors, expected {ng} and {}",
                self.p_g.len(),
                self.alpha.len(),
                ng + 1
            )));
        }
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-8 || self.alpha.iter().any(|a| *a < -1e-10 || !a.is_finite()) {
            return Err(Error::Participation(format!(
                "factors must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(())
    }

    /// Case setpoints clamped to limits, equal participation.
    pub fn nominal(case: &GridCase, layout: &InputLayout) -> Self {
        let ng = layout.n_generators();
        Self {
            p_g: layout
                .generators
                .iter()
                .map(|&g| {
                    let gen = &case.generators[g];
                    gen.p_nominal.clamp(gen.p_min, gen.p_max)
                })
                .collect(),
            alpha: vec![1.0 / (ng + 1) as f64; ng + 1],
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        self.p_g.iter().chain(&self.alpha).copied().collect()
    }

    fn from_vec(v: &[f64], ng: usize) -> Self {
        Self {
            p_g: v[..ng].to_vec(),
            alpha: v[ng..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcConfig {
    /// Violation probability allowed per constraint; `0.5` gives the deterministic problem.
    pub epsilon: f64,
    pub max_iter: usize,
    /// KKT tolerance on the normalized objective.
    pub kkt_tol: f64,
    pub feas_tol: f64,
}

impl Default for CcConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.025,
            max_iter: 300,
            kkt_tol: 1e-5,
            feas_tol: 1e-9,
        }
    }
}

impl CcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 0.5], got {}", self.epsilon)));
        }
        if self.max_iter == 0 || !(self.kkt_tol > 0.0) || !(self.feas_tol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn deterministic(&self) -> Self {
        Self { epsilon: 0.5, ..*self }
    }

    fn z(&self) -> Result<f64> {
        if self.epsilon == 0.5 {
            Ok(0.0)
        } else {
            quantile(1.0 - self.epsilon)
        }
    }

    fn sqp(&self) -> SqpOptions {
        SqpOptions {
            max_iter: self.max_iter,
            kkt_tol: self.kkt_tol,
            feas_tol: self.feas_tol,
        }
    }
}

/// Expected generation cost under the Gaussian imbalance `Ω = −Σω`.
///
/// Non-slack generators: `c2 p² + c1 p + c0 + c2 α² Var(Ω)`; slack: `c2 (μ² + σ²) + c1 μ + c0`
/// with the surrogate's slack moments.
pub fn expected_cost(
    case: &GridCase,
    layout: &InputLayout,
    decision: &DispatchDecision,
    spec: &UncertaintySpec,
    mu_slack: f64,
    var_slack: f64,
) -> f64 {
    let var_omega = spec.total_variance();
    let mut cost = 0.0;
    for (k, &g) in layout.generators.iter().enumerate() {
        let c = case.generators[g].cost;
        let (p, a) = (decision.p_g[k], decision.alpha[k]);
        cost += c.c2 * p * p + c.c1 * p + c.c0 + c.c2 * a * a * var_omega;
    }
    let c = case.generators[case.slack_generator()].cost;
    cost + c.c2 * (mu_slack * mu_slack + var_slack) + c.c1 * mu_slack + c.c0
}

/// One reformulated constraint; `value ≥ 0` means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub name: String,
    pub value: f64,
}

/// Everything the dispatch problems need about a case and its trained surrogate.
#[derive(Debug, Clone)]
pub struct DispatchContext<'a> {
    pub case: &'a GridCase,
    pub model: &'a HybridModel,
    pub spec: &'a UncertaintySpec,
    pub inputs: InputLayout,
    pub outputs: OutputLayout,
    pub limits: Vec<(f64, f64)>,
    output_names: Vec<String>,
}

impl<'a> DispatchContext<'a> {
    pub fn new(case: &'a GridCase, model: &'a HybridModel, spec: &'a UncertaintySpec) -> Result<Self> {
        let inputs = InputLayout::new(case, spec)?;
        let outputs = OutputLayout::new(case)?;
        if model.input_names != inputs.names(case) {
            return Err(Error::Dimension(format!(
                "model inputs {:?} do not match case inputs {:?}",
                model.input_names,
                inputs.names(case)
            )));
        }
        let output_names = outputs.names(case);
        if model.output_names != output_names {
            return Err(Error::Dimension("model outputs do not match the case".into()));
        }
        let limits = outputs.limits(case);
        Ok(Self {
            case,
            model,
            spec,
            inputs,
            outputs,
            limits,
            output_names,
        })
    }

    fn n_gen(&self) -> usize {
        self.inputs.n_generators()
    }

    fn gen_name(&self, k: usize) -> String {
        let g = &self.case.generators[self.inputs.generators[k]];
        format!("P:bus{}", self.case.buses[g.bus].id)
    }

    fn mu_x(&self, p: &[f64]) -> Vec<f64> {
        let mut x = p.to_vec();
        x.extend(self.inputs.nominal_uncertain(self.case));
        x
    }

    /// Surrogate input under the realization `ω` with the decision's response.
    pub fn scenario_input(&self, decision: &DispatchDecision, omega: &[f64]) -> Vec<f64> {
        let total: f64 = -omega.iter().sum::<f64>();
        let mut x: Vec<f64> = decision
            .p_g
            .iter()
            .zip(&decision.alpha)
            .map(|(p, a)| p + a * total)
            .collect();
        x.extend(
            self.inputs
                .nominal_uncertain(self.case)
                .iter()
                .zip(omega)
                .map(|(n, w)| n + w),
        );
        x
    }
}

/// TA1 moments of one output with derivatives in the decision vector `[p; α]`.
struct Moments {
    mean: f64,
    var: f64,
    dmean: Vec<f64>,
    dvar: Vec<f64>,
}

fn output_moments(ctx: &DispatchContext, x: &[f64], alpha: &[f64], j: usize) -> Result<Moments> {
    let ng = ctx.n_gen();
    let d = x.len();
    let nv = 2 * ng + 1;
    let e = ctx.model.eval_output(j, x)?;
    let g = &e.grad;
    let h = |a: usize, b: usize| e.hessian[a * d + b];
    let mut var = e.var;
    let mut dmean = vec![0.0; nv];
    let mut dvar = vec![0.0; nv];
    dmean[..ng].copy_from_slice(&g[..ng]);
    dvar[..ng].copy_from_slice(&e.var_grad[..ng]);
    // Σ_x = J Σ_ω Jᵀ, so ∇fᵀ Σ_x ∇f = Σ_k σ_k² u_k² with u = Jᵀ∇f.
    let ag: f64 = (0..ng).map(|q| alpha[q] * g[q]).sum();
    for (k, s) in ctx.spec.sigma.iter().enumerate() {
        let s2 = s * s;
        let u = g[ng + k] - ag;
        var += s2 * u * u;
        for q in 0..ng {
            let du = h(ng + k, q) - (0..ng).map(|r| alpha[r] * h(r, q)).sum::<f64>();
            dvar[q] += 2.0 * s2 * u * du;
            dvar[ng + q] -= 2.0 * s2 * u * g[q];
        }
    }
    Ok(Moments {
        mean: e.mean,
        var,
        dmean,
        dvar,
    })
}

/// Full evaluation of a dispatch problem at `[p; α]`.
struct Evaluated {
    cost: f64,
    cost_grad: Vec<f64>,
    names: Vec<String>,
    c: Vec<f64>,
    jac: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn evaluate(ctx: &DispatchContext, v: &[f64], z: f64, scenarios: &[Vec<f64>], names: bool) -> Result<Evaluated> {
    let ng = ctx.n_gen();
    let nv = 2 * ng + 1;
    let p = &v[..ng];
    let alpha = &v[ng..];
    let x = ctx.mu_x(p);
    let n_out = ctx.model.n_outputs();
    let var_omega = ctx.spec.total_variance();
    let sd_omega = var_omega.sqrt();

    let moments: Vec<Moments> = (0..n_out)
        .map(|j| output_moments(ctx, &x, alpha, j))
        .collect::<Result<_>>()?;

    let mut cost = 0.0;
    let mut cost_grad = vec![0.0; nv];
    for (k, &g) in ctx.inputs.generators.iter().enumerate() {
        let c = ctx.case.generators[g].cost;
        cost += c.c2 * p[k] * p[k] + c.c1 * p[k] + c.c0 + c.c2 * alpha[k] * alpha[k] * var_omega;
        cost_grad[k] += 2.0 * c.c2 * p[k] + c.c1;
        cost_grad[ng + k] += 2.0 * c.c2 * alpha[k] * var_omega;
    }
    let s = &moments[ctx.outputs.slack_index()];
    let c = ctx.case.generators[ctx.case.slack_generator()].cost;
    cost += c.c2 * (s.mean * s.mean + s.var) + c.c1 * s.mean + c.c0;
    for i in 0..nv {
        cost_grad[i] += (2.0 * c.c2 * s.mean + c.c1) * s.dmean[i] + c.c2 * s.dvar[i];
    }

    let mut out = Evaluated {
        cost,
        cost_grad,
        names: Vec::new(),
        c: Vec::new(),
        jac: Vec::new(),
        mean: moments.iter().map(|m| m.mean).collect(),
        var: moments.iter().map(|m| m.var).collect(),
    };
    let push = |out: &mut Evaluated, name: &dyn Fn() -> String, value: f64, grad: Vec<f64>| {
        if names {
            out.names.push(name());
        }
        out.c.push(value);
        out.jac.push(grad);
    };

    for (j, m) in moments.iter().enumerate() {
        let (lo, hi) = ctx.limits[j];
        let sd = (m.var + SIGMA_FLOOR).sqrt();
        let dsd: Vec<f64> = m.dvar.iter().map(|d| d / (2.0 * sd)).collect();
        if hi.is_finite() {
            let grad = (0..nv).map(|i| -m.dmean[i] - z * dsd[i]).collect();
            push(&mut out, &|| format!("{}:hi", ctx.output_names[j]), hi - m.mean - z * sd, grad);
        }
        if lo.is_finite() {
            let grad = (0..nv).map(|i| m.dmean[i] - z * dsd[i]).collect();
            push(&mut out, &|| format!("{}:lo", ctx.output_names[j]), m.mean - z * sd - lo, grad);
        }
    }
    for (k, &g) in ctx.inputs.generators.iter().enumerate() {
        let gen = &ctx.case.generators[g];
        let mut grad = vec![0.0; nv];
        grad[k] = -1.0;
        grad[ng + k] = -z * sd_omega;
        push(&mut out, &|| format!("{}:hi", ctx.gen_name(k)), gen.p_max - p[k] - z * sd_omega * alpha[k], grad);
        let mut grad = vec![0.0; nv];
        grad[k] = 1.0;
        grad[ng + k] = -z * sd_omega;
        push(&mut out, &|| format!("{}:lo", ctx.gen_name(k)), p[k] - z * sd_omega * alpha[k] - gen.p_min, grad);
    }

    let decision = DispatchDecision::from_vec(v, ng);
    for (si, omega) in scenarios.iter().enumerate() {
        let total: f64 = -omega.iter().sum::<f64>();
        let xs = ctx.scenario_input(&decision, omega);
        for j in 0..n_out {
            let (lo, hi) = ctx.limits[j];
            if !lo.is_finite() && !hi.is_finite() {
                continue;
            }
            let (mean, g) = ctx.model.mean_and_grad(j, &xs)?;
            let mut dmean = vec![0.0; nv];
            for q in 0..ng {
                dmean[q] = g[q];
                dmean[ng + q] = g[q] * total;
            }
            if hi.is_finite() {
                let grad = dmean.iter().map(|d| -d).collect();
                push(&mut out, &|| format!("{}:hi@{si}", ctx.output_names[j]), hi - mean, grad);
            }
            if lo.is_finite() {
                push(&mut out, &|| format!("{}:lo@{si}", ctx.output_names[j]), mean - lo, dmean.clone());
            }
        }
        for (k, &g) in ctx.inputs.generators.iter().enumerate() {
            let gen = &ctx.case.generators[g];
            let pk = p[k] + alpha[k] * total;
            let mut grad = vec![0.0; nv];
            grad[k] = -1.0;
            grad[ng + k] = -total;
            push(&mut out, &|| format!("{}:hi@{si}", ctx.gen_name(k)), gen.p_max - pk, grad);
            let mut grad = vec![0.0; nv];
            grad[k] = 1.0;
            grad[ng + k] = total;
            push(&mut out, &|| format!("{}:lo@{si}", ctx.gen_name(k)), pk - gen.p_min, grad);
        }
    }
    Ok(out)
}

struct DispatchNlp<'c, 'a> {
    ctx: &'c DispatchContext<'a>,
    z: f64,
    scenarios: &'c [Vec<f64>],
    /// Objective normalization, fixed at the start point.
    scale: f64,
}

impl NlpProblem for DispatchNlp<'_, '_> {
    fn dim(&self) -> usize {
        2 * self.ctx.n_gen() + 1
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let ng = self.ctx.n_gen();
        let mut lo: Vec<f64> = self.ctx.inputs.generators.iter().map(|&g| self.ctx.case.generators[g].p_min).collect();
        let mut hi: Vec<f64> = self.ctx.inputs.generators.iter().map(|&g| self.ctx.case.generators[g].p_max).collect();
        lo.extend(std::iter::repeat_n(0.0, ng + 1));
        hi.extend(std::iter::repeat_n(1.0, ng + 1));
        (lo, hi)
    }

    fn equalities(&self) -> (Mat<f64>, Vec<f64>) {
        let ng = self.ctx.n_gen();
        (Mat::from_fn(1, 2 * ng + 1, |_, j| if j >= ng { 1.0 } else { 0.0 }), vec![1.0])
    }

    fn eval(&self, x: &[f64]) -> Result<NlpEval> {
        let e = evaluate(self.ctx, x, self.z, self.scenarios, false)?;
        let nv = self.dim();
        Ok(NlpEval {
            f: e.cost * self.scale,
            grad: e.cost_grad.iter().map(|g| g * self.scale).collect(),
            jac: Mat::from_fn(e.c.len(), nv, |i, j| e.jac[i][j]),
            c: e.c,
        })
    }
}

/// Result of a dispatch solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcSolution {
    pub decision: DispatchDecision,
    pub expected_cost: f64,
    pub epsilon: f64,
    /// Number of hard scenario constraints sets (scenario baseline only).
    pub scenarios: usize,
    pub output_names: Vec<String>,
    pub mu_y: Vec<f64>,
    pub sigma_y: Vec<f64>,
    /// TA1 margins at `epsilon` (mean margins for the scenario baseline).
    pub margins: Vec<Margin>,
    pub status: SqpStatus,
    pub iterations: usize,
    pub kkt: f64,
    pub max_violation: f64,
    /// Most violated constraints when the solve is not optimal.
    pub violated: Vec<Margin>,
    pub wall_time_s: f64,
}

fn run(
    ctx: &DispatchContext,
    config: &CcConfig,
    z: f64,
    scenarios: &[Vec<f64>],
    start: &DispatchDecision,
) -> Result<CcSolution> {
    config.validate()?;
    start.validate(&ctx.inputs)?;
    let t0 = Instant::now();
    let ng = ctx.n_gen();
    let x0 = start.to_vec();
    let f0 = evaluate(ctx, &x0, z, scenarios, false)?.cost;
    let nlp = DispatchNlp {
        ctx,
        z,
        scenarios,
        scale: 1.0 / f0.abs().max(1.0),
    };
    let res = sqp::solve(&nlp, &x0, config.sqp())?;
    let mut v = res.x.clone();
    // Exact renormalization of α (the QP keeps Σα = 1 only to round-off).
    let sum: f64 = v[ng..].iter().map(|a| a.max(0.0)).sum();
    for a in v[ng..].iter_mut() {
        *a = a.max(0.0) / sum;
    }
    let e = evaluate(ctx, &v, z, scenarios, true)?;
    let n_base = base_count(ctx);
    let mut violated: Vec<Margin> = Vec::new();
    if res.status != SqpStatus::Optimal {
        let mut all: Vec<Margin> = e
            .names
            .iter()
            .zip(&e.c)
            .filter(|(_, c)| **c < 0.0)
            .map(|(n, c)| Margin { name: n.clone(), value: *c })
            .collect();
        all.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.name.cmp(&b.name)));
        all.truncate(10);
        violated = all;
    }
    Ok(CcSolution {
        decision: DispatchDecision::from_vec(&v, ng),
        expected_cost: e.cost,
        epsilon: config.epsilon,
        scenarios: scenarios.len(),
        output_names: ctx.output_names.clone(),
        sigma_y: e.var.iter().map(|v| v.max(0.0).sqrt()).collect(),
        mu_y: e.mean,
        margins: e
            .names
            .iter()
            .zip(&e.c)
            .take(n_base)
            .map(|(n, c)| Margin { name: n.clone(), value: *c })
            .collect(),
        status: res.status,
        iterations: res.iterations,
        kkt: res.kkt,
        max_violation: res.max_violation,
        violated,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// Number of base (non-scenario) constraints.
fn base_count(ctx: &DispatchContext) -> usize {
    let outputs: usize = ctx
        .limits
        .iter()
        .map(|(lo, hi)| lo.is_finite() as usize + hi.is_finite() as usize)
        .sum();
    outputs + 2 * ctx.n_gen()
}

/// Deterministic OPF on the surrogate (`ε = 0.5`, so `z = 0`), from the case setpoints.
pub fn solve_deterministic(ctx: &DispatchContext, config: &CcConfig) -> Result<CcSolution> {
    let det = config.deterministic();
    run(ctx, &det, 0.0, &[], &DispatchDecision::nominal(ctx.case, &ctx.inputs))
}

/// Chance-constrained dispatch. Without a start, the deterministic optimum with uniform
/// participation is used.
pub fn solve(ctx: &DispatchContext, config: &CcConfig, start: Option<&DispatchDecision>) -> Result<CcSolution> {
    config.validate()?;
    let start = match start {
        Some(s) => s.clone(),
        None => {
            let det = solve_deterministic(ctx, config)?;
            let ng = ctx.n_gen();
            DispatchDecision {
                p_g: det.decision.p_g,
                alpha: vec![1.0 / (ng + 1) as f64; ng + 1],
            }
        }
    };
    run(ctx, config, config.z()?, &[], &start)
}

/// Dispatch with hard surrogate-mean constraints at each scenario in `omegas` plus the base case.
pub fn solve_scenarios(
    ctx: &DispatchContext,
    config: &CcConfig,
    omegas: &[Vec<f64>],
    start: Option<&DispatchDecision>,
) -> Result<CcSolution> {
    let det = config.deterministic();
    let start = match start {
        Some(s) => s.clone(),
        None => {
            let d = solve_deterministic(ctx, config)?;
            let ng = ctx.n_gen();
            DispatchDecision {
                p_g: d.decision.p_g,
                alpha: vec![1.0 / (ng + 1) as f64; ng + 1],
            }
        }
    };
    run(ctx, &det, 0.0, omegas, &start)
}

/// Reformulated margins recomputed from scratch through [`ta1_propagate`].
pub fn constraint_margins(ctx: &DispatchContext, decision: &DispatchDecision, epsilon: f64) -> Result<Vec<Margin>> {
    let z = CcConfig { epsilon, ..CcConfig::default() }.z()?;
    let dist = build_input_distribution(ctx.case, &ctx.inputs, decision, ctx.spec)?;
    let prop = ta1_propagate(ctx.model, &dist)?;
    let mut out = Vec::new();
    for j in 0..ctx.model.n_outputs() {
        let (lo, hi) = ctx.limits[j];
        let sd = (prop.var[j] + SIGMA_FLOOR).sqrt();
        if hi.is_finite() {
            out.push(Margin {
                name: format!("{}:hi", ctx.output_names[j]),
                value: hi - prop.mean[j] - z * sd,
            });
        }
        if lo.is_finite() {
            out.push(Margin {
                name: format!("{}:lo", ctx.output_names[j]),
                value: prop.mean[j] - z * sd - lo,
            });
        }
    }
    let sd_omega = ctx.spec.total_variance().sqrt();
    for (k, &g) in ctx.inputs.generators.iter().enumerate() {
        let gen = &ctx.case.generators[g];
        let (p, a) = (decision.p_g[k], decision.alpha[k]);
        out.push(Margin {
            name: format!("{}:hi", ctx.gen_name(k)),
            value: gen.p_max - p - z * sd_omega * a,
        });
        out.push(Margin {
            name: format!("{}:lo", ctx.gen_name(k)),
            value: p - z * sd_omega * a - gen.p_min,
        });
    }
    Ok(out)
}
