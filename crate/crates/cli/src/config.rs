//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use gpccopf_core::ccopf::CcConfig;
use gpccopf_core::dataset::{SamplingMode, UncertaintySpec};
use gpccopf_core::grid::{parse_case, GridCase};
use gpccopf_core::hybrid::{GpMode, HybridOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: CaseConfig,
    pub dataset: DatasetConfig,
    pub gp: GpConfig,
    pub ccopf: CcopfConfig,
    pub validate: ValidateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    /// Bundled case name (`case9`, `case39`) or a MATPOWER file path relative to the config.
    pub path: String,
    pub uncertain_buses: Vec<usize>,
    /// Standard deviation per uncertain bus (pu).
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub branch_overrides: Vec<BranchOverride>,
}

/// Replace the rating of the branch(es) between two buses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchOverride {
    pub from: usize,
    pub to: usize,
    pub s_max_mva: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Box,
    Normal,
    SlackBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Samples generated before the train/test split.
    pub n: usize,
    pub seed: u64,
    pub sampling: Sampling,
    /// Setpoint spread for `normal` sampling, as a fraction of each generator's range.
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Widening of the slack generator's range for `slack_box` sampling (fraction of the range).
    #[serde(default = "default_margin")]
    pub margin: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

fn default_spread() -> f64 {
    0.25
}

fn default_margin() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// Models to train; the first is used by `solve` and `validate`.
    pub modes: Vec<GpMode>,
    pub inducing: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcopfConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub feas_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub n_mc: usize,
    pub mc_seed: u64,
    pub tol: f64,
    pub scenario_counts: Vec<usize>,
    pub scenario_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    fn check(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.n == 0 {
            return Err(bad("dataset.n must be positive"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(bad("dataset.train_fraction must lie in (0, 1)"));
        }
        if !(d.spread > 0.0) {
            return Err(bad("dataset.spread must be positive"));
        }
        if !(d.margin >= 0.0) {
            return Err(bad("dataset.margin must be non-negative"));
        }
        if self.gp.modes.is_empty() {
            return Err(bad("gp.modes must list at least one mode"));
        }
        if self.gp.inducing == 0 || self.gp.restarts == 0 || self.gp.max_iter == 0 {
            return Err(bad("gp.inducing, gp.restarts and gp.max_iter must be positive"));
        }
        self.cc_config().validate().map_err(|e| bad(format!("ccopf: {e}")))?;
        if self.validate.n_mc == 0 {
            return Err(bad("validate.n_mc must be positive"));
        }
        if !(self.validate.tol >= 0.0) {
            return Err(bad("validate.tol must be non-negative"));
        }
        if self.case.uncertain_buses.len() != self.case.sigma.len() {
            return Err(bad("case.sigma needs one entry per uncertain bus"));
        }
        if self.case.branch_overrides.iter().any(|o| !(o.s_max_mva > 0.0)) {
            return Err(bad("branch override ratings must be positive"));
        }
        Ok(())
    }

    /// Re-derive every seed from one base value (for sweeps).
    pub fn override_seeds(&mut self, base: u64) {
        self.dataset.seed = base;
        self.dataset.split_seed = base.wrapping_add(1);
        self.gp.seed = base.wrapping_add(2);
        self.validate.mc_seed = base.wrapping_add(3);
        self.validate.scenario_seed = base.wrapping_add(4);
    }

    /// Load the case, apply rating overrides and designate the uncertain buses.
    pub fn load_case(&self, base: &Path) -> Result<GridCase, CliError> {
        let text = match gpccopf_core::cases::bundled(&self.case.path) {
            Some(t) => t.to_string(),
            None => {
                let p = base.join(&self.case.path);
                std::fs::read_to_string(&p).map_err(|e| bad(format!("case file {}: {e}", p.display())))?
            }
        };
        let mut case = parse_case(&text).map_err(|e| bad(format!("case: {e}")))?;
        for o in &self.case.branch_overrides {
            let (from, to) = match (case.bus_index(o.from), case.bus_index(o.to)) {
                (Some(f), Some(t)) => (f, t),
                _ => return Err(bad(format!("branch override {}-{}: unknown bus", o.from, o.to))),
            };
            let mut hit = false;
            for br in case.branches.iter_mut() {
                if (br.from_bus, br.to_bus) == (from, to) || (br.from_bus, br.to_bus) == (to, from) {
                    br.s_max = o.s_max_mva / case.base_mva;
                    hit = true;
                }
            }
            if !hit {
                return Err(bad(format!("branch override {}-{}: no such branch", o.from, o.to)));
            }
        }
        let case = case
            .with_uncertain_buses(&self.case.uncertain_buses)
            .map_err(|e| bad(format!("uncertain buses: {e}")))?;
        self.spec().validate(&case).map_err(|e| bad(format!("uncertainty: {e}")))?;
        Ok(case)
    }

    pub fn spec(&self) -> UncertaintySpec {
        UncertaintySpec {
            bus_ids: self.case.uncertain_buses.clone(),
            sigma: self.case.sigma.clone(),
        }
    }

    pub fn sampling(&self) -> SamplingMode {
        match self.dataset.sampling {
            Sampling::Box => SamplingMode::Box,
            Sampling::Normal => SamplingMode::NominalGaussian { spread: self.dataset.spread },
            Sampling::SlackBox => SamplingMode::SlackBox { margin: self.dataset.margin },
        }
    }

    pub fn hybrid_options(&self, mode: GpMode) -> HybridOptions {
        HybridOptions {
            mode,
            inducing: self.gp.inducing,
            restarts: self.gp.restarts,
            max_iter: self.gp.max_iter,
            seed: self.gp.seed,
        }
    }

    pub fn cc_config(&self) -> CcConfig {
        CcConfig {
            epsilon: self.ccopf.epsilon,
            max_iter: self.ccopf.max_iter,
            kkt_tol: self.ccopf.kkt_tol,
            feas_tol: self.ccopf.feas_tol,
        }
    }

    pub fn primary_mode(&self) -> GpMode {
        self.gp.modes[0]
    }
}
