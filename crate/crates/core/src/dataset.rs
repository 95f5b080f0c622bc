//! Training data: sampled injections, paired AC/DC power-flow outputs and their residuals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_dc_matrices, GridCase};
use crate::powerflow::{solve_dc_with, AcSolver, OutputLayout, PfInput, PfOptions};

/// Zero-mean independent Gaussian active-power deviations at a set of buses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    /// Original bus ids.
    pub bus_ids: Vec<usize>,
    /// Standard deviation per bus (pu).
    pub sigma: Vec<f64>,
}

impl UncertaintySpec {
    pub fn validate(&self, case: &GridCase) -> Result<()> {
        if self.bus_ids.len() != self.sigma.len() {
            return Err(Error::Dimension("one sigma per uncertain bus".into()));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("sigma must be finite and non-negative".into()));
        }
        for &id in &self.bus_ids {
            let idx = case
                .bus_index(id)
                .ok_or_else(|| Error::InvalidArgument(format!("uncertain bus {id} not in case")))?;
            if !case.uncertain_buses.contains(&idx) {
                return Err(Error::InvalidArgument(format!(
                    "bus {id} is not designated uncertain in the case"
                )));
            }
        }
        Ok(())
    }

    /// Variance of the total imbalance Ω = −Σω.
    pub fn total_variance(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            bus_ids: self.bus_ids.clone(),
            sigma: self.sigma.iter().map(|s| s * factor).collect(),
        }
    }

    /// Draw one deviation vector ω.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.sigma
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Column contract of the surrogate input vector:
/// `[non-slack generator setpoints] ++ [net injections at uncertain buses]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    /// Generator indices (non-slack, case order).
    pub generators: Vec<usize>,
    /// Internal bus indices, in the uncertainty spec's order.
    pub uncertain_buses: Vec<usize>,
}

impl InputLayout {
    pub fn new(case: &GridCase, spec: &UncertaintySpec) -> Result<Self> {
        spec.validate(case)?;
        Ok(Self {
            generators: case.controllable_generators(),
            uncertain_buses: spec
                .bus_ids
                .iter()
                .map(|&id| case.bus_index(id).expect("validated"))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.generators.len() + self.uncertain_buses.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn names(&self, case: &GridCase) -> Vec<String> {
        self.generators
            .iter()
            .map(|&g| format!("pg:bus{}", case.buses[case.generators[g].bus].id))
            .chain(
                self.uncertain_buses
                    .iter()
                    .map(|&b| format!("u:bus{}", case.buses[b].id)),
            )
            .collect()
    }

    /// Nominal net injection (−load) at each uncertain bus.
    pub fn nominal_uncertain(&self, case: &GridCase) -> Vec<f64> {
        self.uncertain_buses
            .iter()
            .map(|&b| -case.buses[b].p_load)
            .collect()
    }

    /// Per-bus net active injections for an input vector (slack entry is a placeholder).
    pub fn injections(&self, case: &GridCase, x: &[f64]) -> Vec<f64> {
        let mut p: Vec<f64> = case.buses.iter().map(|b| -b.p_load).collect();
        let ng = self.generators.len();
        for (k, &g) in self.generators.iter().enumerate() {
            p[case.generators[g].bus] += x[k];
        }
        for (k, &b) in self.uncertain_buses.iter().enumerate() {
            p[b] += case.buses[b].p_load + x[ng + k];
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    /// Setpoints uniform over `[p_min, p_max]`.
    Box,
    /// Setpoints `p_nominal + spread·(p_max − p_min)·N(0,1)`, clipped to the box.
    NominalGaussian { spread: f64 },
    /// Box-uniform setpoints, redrawn until the lossless slack balance lies within the slack
    /// generator's range widened by `margin` of that range on each side.
    SlackBox { margin: f64 },
}

/// Redraws allowed per sample in [`SamplingMode::SlackBox`].
pub const MAX_REDRAWS: usize = 100_000;

/// Draw `n` input vectors; sample `i` uses its own generator seeded with `seed + i`.
pub fn sample_inputs(
    case: &GridCase,
    spec: &UncertaintySpec,
    n: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let layout = InputLayout::new(case, spec)?;
    let nominal = layout.nominal_uncertain(case);
    let total_load: f64 = case.buses.iter().map(|b| b.p_load).sum();
    let slack = &case.generators[case.slack_generator()];
    let uniform = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        layout
            .generators
            .iter()
            .map(|&g| {
                let gen = &case.generators[g];
                gen.p_min + (gen.p_max - gen.p_min) * rng.random::<f64>()
            })
            .collect()
    };
    (0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let mut x = match mode {
                SamplingMode::Box => uniform(&mut rng),
                SamplingMode::NominalGaussian { spread } => layout
                    .generators
                    .iter()
                    .map(|&g| {
                        let gen = &case.generators[g];
                        let z: f64 = rng.sample(StandardNormal);
                        (gen.p_nominal + spread * (gen.p_max - gen.p_min) * z).clamp(gen.p_min, gen.p_max)
                    })
                    .collect(),
                SamplingMode::SlackBox { margin } => {
                    let pad = margin * (slack.p_max - slack.p_min);
                    let mut attempt = 0;
                    loop {
                        let p = uniform(&mut rng);
                        let balance = total_load - p.iter().sum::<f64>();
                        if balance >= slack.p_min - pad && balance <= slack.p_max + pad {
                            break p;
                        }
                        attempt += 1;
                        if attempt == MAX_REDRAWS {
                            return Err(Error::InvalidArgument(
                                "no slack-feasible setpoints found; widen the sampling margin".into(),
                            ));
                        }
                    }
                }
            };
            let omega = spec.draw(&mut rng);
            x.extend(nominal.iter().zip(&omega).map(|(n, w)| n + w));
            Ok(x)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y_ac: Vec<f64>,
    pub y_dc: Vec<f64>,
    /// `y_ac − y_dc`.
    pub r: Vec<f64>,
    /// Whether any generator bus exceeded its reactive limits (not enforced during sampling).
    pub q_limit_exceeded: bool,
}

impl Sample {
    pub fn new(x: Vec<f64>, y_ac: Vec<f64>, y_dc: Vec<f64>, q_limit_exceeded: bool) -> Self {
        let r = y_ac.iter().zip(&y_dc).map(|(a, d)| a - d).collect();
        Self {
            x,
            y_ac,
            y_dc,
            r,
            q_limit_exceeded,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// AC runs that diverged and were dropped.
    pub dropped: usize,
}

impl Dataset {
    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }

    pub fn dropped_fraction(&self) -> f64 {
        let total = self.samples.len() + self.dropped;
        if total == 0 {
            0.0
        } else {
            self.dropped as f64 / total as f64
        }
    }
}

/// Run AC and DC power flow for every input and pair the outputs.
///
/// Diverged AC runs are dropped and counted; more than half diverging aborts.
pub fn generate(
    case: &GridCase,
    spec: &UncertaintySpec,
    inputs: &[Vec<f64>],
    opts: PfOptions,
) -> Result<Dataset> {
    let layout = InputLayout::new(case, spec)?;
    let outputs = OutputLayout::new(case)?;
    let limits = outputs.limits(case);
    let q_range = outputs.pq_buses.len()..outputs.pq_buses.len() + outputs.gen_buses.len();
    let dc = build_dc_matrices(case)?;
    let ac = AcSolver::new(case);
    for x in inputs {
        if x.len() != layout.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("input vectors must have {} finite entries", layout.dim())));
        }
    }
    let results: Vec<Option<Sample>> = inputs
        .par_iter()
        .map(|x| {
            let p = layout.injections(case, x);
            let sol = ac.solve(&PfInput::from_active(case, p.clone()), opts).ok()?;
            let y_ac = outputs.extract(&sol).ok()?;
            let y_dc = outputs.extract_dc(&solve_dc_with(case, &dc, &p));
            let q_exceeded = q_range
                .clone()
                .any(|j| y_ac[j] < limits[j].0 || y_ac[j] > limits[j].1);
            Some(Sample::new(x.clone(), y_ac, y_dc, q_exceeded))
        })
        .collect();
    let total = results.len();
    let samples: Vec<Sample> = results.into_iter().flatten().collect();
    let dropped = total - samples.len();
    if 2 * dropped > total {
        return Err(Error::Divergence { diverged: dropped, total });
    }
    Ok(Dataset {
        input_names: layout.names(case),
        output_names: outputs.names(case),
        samples,
        dropped,
    })
}

/// Column-wise z-scoring with the population (divisor n) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns that were constant; their std is stored as 1.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Empty("standardizer needs at least two rows"));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let mut std = Vec::with_capacity(d);
        let mut constant = Vec::with_capacity(d);
        for j in 0..d {
            let s = (var[j] / n).sqrt();
            let flat = !(s > 1e-12 * mean[j].abs().max(1.0));
            constant.push(flat);
            std.push(if flat { 1.0 } else { s });
        }
        Ok(Self { mean, std, constant })
    }

    /// Identity transform for `d` columns.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            constant: vec![false; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .enumerate()
            .map(|(j, (x, (m, s)))| if self.constant[j] { 0.0 } else { (x - m) / s })
            .collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| m + s * z)
            .collect()
    }

    pub fn apply_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

/// Deterministic shuffled split; `floor(train_fraction · n)` samples go to training.
pub fn split<T: Clone>(samples: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.len() < 2 {
        return Err(Error::Empty("split needs at least two samples"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument("train fraction must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * samples.len() as f64) + 1e-9).floor() as usize;
    let (a, b) = idx.split_at(n_train);
    Ok((
        a.iter().map(|&i| samples[i].clone()).collect(),
        b.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

// ---------------------------------------------------------------------------
// CSV persistence

const AC_PREFIX: &str = "ac.";
const DC_PREFIX: &str = "dc.";
const QLIM: &str = "qlim";

/// One row per sample: inputs by role, then AC outputs (`ac.`), DC outputs (`dc.`), and the
/// reactive-limit flag. Residuals are recomputed on load.
pub fn write_csv(ds: &Dataset) -> String {
    let mut header: Vec<String> = ds.input_names.clone();
    header.extend(ds.output_names.iter().map(|n| format!("{AC_PREFIX}{n}")));
    header.extend(ds.output_names.iter().map(|n| format!("{DC_PREFIX}{n}")));
    header.push(QLIM.into());
    let mut out = header.join(",");
    out.push('\n');
    for s in &ds.samples {
        let fields: Vec<String> = s
            .x
            .iter()
            .chain(&s.y_ac)
            .chain(&s.y_dc)
            .map(|v| format!("{v:?}"))
            .chain(std::iter::once(u8::from(s.q_limit_exceeded).to_string()))
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn read_csv(text: &str, dropped: usize) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or(Error::Empty("dataset has no header"))?
        .split(',')
        .collect();
    let n_in = header
        .iter()
        .position(|h| h.starts_with(AC_PREFIX))
        .ok_or_else(|| Error::Format("no AC output columns".into()))?;
    let n_out = header[n_in..]
        .iter()
        .take_while(|h| h.starts_with(AC_PREFIX))
        .count();
    if header.len() != n_in + 2 * n_out + 1 || header[header.len() - 1] != QLIM {
        return Err(Error::Format("unexpected column layout".into()));
    }
    let output_names: Vec<String> = header[n_in..n_in + n_out]
        .iter()
        .map(|h| h[AC_PREFIX.len()..].to_string())
        .collect();
    for (k, name) in output_names.iter().enumerate() {
        if header[n_in + n_out + k] != format!("{DC_PREFIX}{name}") {
            return Err(Error::Format(format!("DC column for {name} missing or out of order")));
        }
    }
    let mut samples = Vec::new();
    for (li, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != header.len() {
            return Err(Error::Format(format!("row {} has {} fields", li + 2, vals.len())));
        }
        let nums = vals[..vals.len() - 1]
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: bad number '{v}'", li + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample::new(
            nums[..n_in].to_vec(),
            nums[n_in..n_in + n_out].to_vec(),
            nums[n_in + n_out..].to_vec(),
            vals[vals.len() - 1].trim() == "1",
        ));
    }
    Ok(Dataset {
        input_names: header[..n_in].iter().map(|s| s.to_string()).collect(),
        output_names,
        samples,
        dropped,
    })
}
