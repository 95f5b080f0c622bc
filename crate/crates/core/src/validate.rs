//! Ex-post validation: Monte-Carlo replay through full AC power flow, the scenario-approach
//! baseline, and the cost / failure / CPU comparison across methods.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccopf::{solve, solve_deterministic, solve_scenarios, CcConfig, CcSolution, DispatchContext, DispatchDecision};
use crate::dataset::{InputLayout, UncertaintySpec};
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::hash::{case_hash, json_hash};
use crate::hybrid::HybridModel;
use crate::optim::sqp::SqpStatus;
use crate::powerflow::{AcSolver, OutputLayout, PfInput, PfOptions};

/// Violations smaller than this (pu) are ignored by default.
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRate {
    pub name: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n_samples: usize,
    /// Fraction of samples violating any limit or failing to converge.
    pub failure_probability: f64,
    pub rates: Vec<ConstraintRate>,
    pub divergences: usize,
    pub seed: u64,
    pub tol: f64,
    pub wall_time_s: f64,
}

impl McReport {
    pub fn rate(&self, name: &str) -> Option<f64> {
        self.rates.iter().find(|r| r.name == name).map(|r| r.rate)
    }

    /// Binomial standard error of the failure estimate.
    pub fn standard_error(&self) -> f64 {
        let p = self.failure_probability;
        (p * (1.0 - p) / self.n_samples as f64).sqrt()
    }
}

/// Realized generator outputs and surrogate-style input vector for one deviation `ω`.
pub fn realized_input(case: &GridCase, layout: &InputLayout, decision: &DispatchDecision, omega: &[f64]) -> Vec<f64> {
    let total = -omega.iter().sum::<f64>();
    let mut x: Vec<f64> = decision
        .p_g
        .iter()
        .zip(&decision.alpha)
        .map(|(p, a)| p + a * total)
        .collect();
    x.extend(layout.nominal_uncertain(case).iter().zip(omega).map(|(n, w)| n + w));
    x
}

struct Check {
    name: String,
    lo: f64,
    hi: f64,
}

fn checks(case: &GridCase, layout: &InputLayout, outputs: &OutputLayout) -> Vec<(Check, Source)> {
    let names = outputs.names(case);
    let mut out = Vec::new();
    for (j, (lo, hi)) in outputs.limits(case).into_iter().enumerate() {
        if hi.is_finite() {
            out.push((Check { name: format!("{}:hi", names[j]), lo: f64::NEG_INFINITY, hi }, Source::Output(j)));
        }
        if lo.is_finite() {
            out.push((Check { name: format!("{}:lo", names[j]), lo, hi: f64::INFINITY }, Source::Output(j)));
        }
    }
    for (k, &g) in layout.generators.iter().enumerate() {
        let gen = &case.generators[g];
        let name = format!("P:bus{}", case.buses[gen.bus].id);
        out.push((Check { name: format!("{name}:hi"), lo: f64::NEG_INFINITY, hi: gen.p_max }, Source::Input(k)));
        out.push((Check { name: format!("{name}:lo"), lo: gen.p_min, hi: f64::INFINITY }, Source::Input(k)));
    }
    out
}

#[derive(Clone, Copy)]
enum Source {
    Output(usize),
    Input(usize),
}

/// Monte-Carlo failure estimate of `decision` under `spec` with full AC power flow.
///
/// Sample `i` draws from a generator seeded with `seed + i`, so results do not depend on
/// thread scheduling.
pub fn mc_validate(
    case: &GridCase,
    decision: &DispatchDecision,
    spec: &UncertaintySpec,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<McReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("Monte-Carlo needs at least one sample".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument("tolerance must be non-negative".into()));
    }
    let t0 = Instant::now();
    let layout = InputLayout::new(case, spec)?;
    decision.validate(&layout)?;
    let outputs = OutputLayout::new(case)?;
    let list = checks(case, &layout, &outputs);
    let ac = AcSolver::new(case);
    let opts = PfOptions::default();

    // Per sample: None on divergence, otherwise one violation flag per check.
    let flags: Vec<Option<Vec<bool>>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let omega = spec.draw(&mut rng);
            let x = realized_input(case, &layout, decision, &omega);
            let p = layout.injections(case, &x);
            let y = ac
                .solve(&PfInput::from_active(case, p), opts)
                .ok()
                .and_then(|sol| outputs.extract(&sol).ok())?;
            Some(
                list.iter()
                    .map(|(c, src)| {
                        let v = match *src {
                            Source::Output(j) => y[j],
                            Source::Input(k) => x[k],
                        };
                        v > c.hi + tol || v < c.lo - tol
                    })
                    .collect(),
            )
        })
        .collect();

    let mut counts = vec![0usize; list.len()];
    let (mut failures, mut divergences) = (0usize, 0usize);
    for f in &flags {
        match f {
            None => {
                divergences += 1;
                failures += 1;
            }
            Some(v) => {
                for (c, &b) in counts.iter_mut().zip(v) {
                    *c += b as usize;
                }
                failures += v.iter().any(|&b| b) as usize;
            }
        }
    }
    let nf = n as f64;
    Ok(McReport {
        n_samples: n,
        failure_probability: failures as f64 / nf,
        rates: list
            .iter()
            .zip(&counts)
            .map(|((c, _), &k)| ConstraintRate { name: c.name.clone(), rate: k as f64 / nf })
            .collect(),
        divergences,
        seed,
        tol,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// The first `n` deviations of the stream seeded by `seed`; larger `n` extends smaller ones.
pub fn draw_scenarios(spec: &UncertaintySpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| spec.draw(&mut rng)).collect()
}

/// Scenario-approach dispatch: surrogate-mean limits enforced at each of `n_scenarios` sampled
/// deviations plus the base case. With no scenarios this is the deterministic OPF.
pub fn scenario_baseline(ctx: &DispatchContext, n_scenarios: usize, seed: u64, config: &CcConfig) -> Result<CcSolution> {
    if n_scenarios == 0 {
        return solve_deterministic(ctx, config);
    }
    let omegas = draw_scenarios(ctx.spec, n_scenarios, seed);
    solve_scenarios(ctx, config, &omegas, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub cc: CcConfig,
    pub scenario_counts: Vec<usize>,
    pub scenario_seed: u64,
    pub n_mc: usize,
    pub mc_seed: u64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub cost: Option<f64>,
    pub failure_prob: Option<f64>,
    pub cpu_s: f64,
    pub status: Option<SqpStatus>,
    pub decision: Option<DispatchDecision>,
    pub divergences: Option<usize>,
    pub case_hash: String,
    pub spec_hash: String,
    pub validation_seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub case_hash: String,
    pub spec_hash: String,
    pub validation_seed: u64,
    pub n_mc: usize,
    pub note: String,
    pub rows: Vec<ComparisonRow>,
}

pub const SA_NOTE: &str =
    "scenario rows enforce surrogate-mean limits at each sampled scenario; all rows validated by full AC Monte-Carlo on one sample set";

impl ComparisonReport {
    /// True when every row carries the report's case hash, spec hash and validation seed.
    pub fn consistent(&self) -> bool {
        self.rows.iter().all(|r| {
            r.case_hash == self.case_hash && r.spec_hash == self.spec_hash && r.validation_seed == self.validation_seed
        })
    }

    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,cost,failure_prob,cpu_s\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.method, opt(r.cost), opt(r.failure_prob), r.cpu_s);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.note);
        let _ = writeln!(s, "# case {}  spec {}  seed {}  n_mc {}", self.case_hash, self.spec_hash, self.validation_seed, self.n_mc);
        let _ = writeln!(s, "{:<14} {:>14} {:>12} {:>10}  status", "method", "cost", "failure", "cpu_s");
        for r in &self.rows {
            let cost = r.cost.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
            let fp = r.failure_prob.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
            let status = match (&r.error, r.status) {
                (Some(e), _) => format!("error: {e}"),
                (None, Some(st)) => format!("{st:?}"),
                (None, None) => String::new(),
            };
            let _ = writeln!(s, "{:<14} {:>14} {:>12} {:>10.3}  {status}", r.method, cost, fp, r.cpu_s);
        }
        s
    }
}

/// Deterministic OPF, GP CC-OPF with the exact and sparse models, and the scenario approach at
/// each configured count, all validated on the same Monte-Carlo sample set.
pub fn compare(
    case: &GridCase,
    spec: &UncertaintySpec,
    exact: &HybridModel,
    sparse: &HybridModel,
    config: &CompareConfig,
) -> Result<ComparisonReport> {
    config.cc.validate()?;
    let chash = case_hash(case);
    let shash = json_hash(spec)?;
    let ctx_exact = DispatchContext::new(case, exact, spec)?;
    let ctx_sparse = DispatchContext::new(case, sparse, spec)?;

    let make_row = |method: String, run: &dyn Fn() -> Result<CcSolution>| -> ComparisonRow {
        let t0 = Instant::now();
        let solved = run();
        let cpu_s = t0.elapsed().as_secs_f64();
        let mut row = ComparisonRow {
            method,
            cost: None,
            failure_prob: None,
            cpu_s,
            status: None,
            decision: None,
            divergences: None,
            case_hash: chash.clone(),
            spec_hash: shash.clone(),
            validation_seed: config.mc_seed,
            error: None,
        };
        match solved {
            Ok(sol) => {
                row.cost = Some(sol.expected_cost);
                row.status = Some(sol.status);
                match mc_validate(case, &sol.decision, spec, config.n_mc, config.mc_seed, config.tol) {
                    Ok(mc) => {
                        row.failure_prob = Some(mc.failure_probability);
                        row.divergences = Some(mc.divergences);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row.decision = Some(sol.decision);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    };

    let mut rows = vec![
        make_row("deterministic".into(), &|| solve_deterministic(&ctx_exact, &config.cc)),
        make_row("gp_exact".into(), &|| solve(&ctx_exact, &config.cc, None)),
        make_row("gp_sparse".into(), &|| solve(&ctx_sparse, &config.cc, None)),
    ];
    for &n in &config.scenario_counts {
        rows.push(make_row(format!("sa_{n}"), &|| {
            scenario_baseline(&ctx_exact, n, config.scenario_seed, &config.cc)
        }));
    }
    Ok(ComparisonReport {
        case_hash: chash,
        spec_hash: shash,
        validation_seed: config.mc_seed,
        n_mc: config.n_mc,
        note: SA_NOTE.into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccopf::normal_cdf;
    use crate::grid::parse_case;

    fn case9() -> (GridCase, UncertaintySpec) {
        let case = parse_case(crate::cases::CASE9).unwrap().with_uncertain_buses(&[7, 9]).unwrap();
        let spec = UncertaintySpec { bus_ids: vec![7, 9], sigma: vec![0.10, 0.125] };
        (case, spec)
    }

    #[test]
    fn zero_sigma_at_feasible_point_never_fails() {
        let (case, spec) = case9();
        let spec = spec.scaled(0.0);
        let layout = InputLayout::new(&case, &spec).unwrap();
        let d = DispatchDecision::nominal(&case, &layout);
        let r = mc_validate(&case, &d, &spec, 50, 3, DEFAULT_TOL).unwrap();
        assert_eq!(r.failure_probability, 0.0);
        assert_eq!(r.divergences, 0);
    }

    #[test]
    fn pinned_generator_violates_half_the_time() {
        let (case, spec) = case9();
        let layout = InputLayout::new(&case, &spec).unwrap();
        let mut d = DispatchDecision::nominal(&case, &layout);
        let g = &case.generators[layout.generators[0]];
        d.p_g[0] = g.p_max;
        let r = mc_validate(&case, &d, &spec, 10_000, 17, DEFAULT_TOL).unwrap();
        let name = format!("P:bus{}:hi", case.buses[g.bus].id);
        let rate = r.rate(&name).unwrap();
        assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
        assert!(r.failure_probability >= rate);
    }

    #[test]
    fn gaussian_margin_matches_analytic_probability() {
        let (case, spec) = case9();
        let layout = InputLayout::new(&case, &spec).unwrap();
        let ng = layout.n_generators();
        let g = &case.generators[layout.generators[0]];
        let sd = spec.total_variance().sqrt();
        let mut alpha = vec![0.0; ng + 1];
        alpha[0] = 1.0;
        let mut p_g = DispatchDecision::nominal(&case, &layout).p_g;
        p_g[0] = g.p_max - sd;
        let d = DispatchDecision { p_g, alpha };
        let n = 10_000;
        let r = mc_validate(&case, &d, &spec, n, 99, 0.0).unwrap();
        let p = 1.0 - normal_cdf(1.0);
        let emp = r.rate(&format!("P:bus{}:hi", case.buses[g.bus].id)).unwrap();
        assert!((emp - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{emp} vs {p}");
    }

    #[test]
    fn reports_are_reproducible() {
        let (case, spec) = case9();
        let layout = InputLayout::new(&case, &spec).unwrap();
        let d = DispatchDecision::nominal(&case, &layout);
        let mut a = mc_validate(&case, &d, &spec, 500, 5, DEFAULT_TOL).unwrap();
        let mut b = mc_validate(&case, &d, &spec, 500, 5, DEFAULT_TOL).unwrap();
        a.wall_time_s = 0.0;
        b.wall_time_s = 0.0;
        assert_eq!(a, b);
        let max = a.rates.iter().map(|r| r.rate).fold(0.0, f64::max);
        assert!(a.failure_probability >= max);
        assert!(a.rates.iter().all(|r| (0.0..=1.0).contains(&r.rate)));
    }

    #[test]
    fn scenario_streams_are_nested() {
        let (_, spec) = case9();
        let short = draw_scenarios(&spec, 10, 4);
        let long = draw_scenarios(&spec, 100, 4);
        assert_eq!(short[..], long[..10]);
    }

    #[test]
    fn zero_samples_rejected() {
        let (case, spec) = case9();
        let layout = InputLayout::new(&case, &spec).unwrap();
        let d = DispatchDecision::nominal(&case, &layout);
        assert!(mc_validate(&case, &d, &spec, 0, 0, DEFAULT_TOL).is_err());
    }
}
