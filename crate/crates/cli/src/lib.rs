//! Config-driven pipeline: case summary, data generation, training, dispatch, validation and
//! method comparison. Every command writes JSON artifacts that embed the config and the hashes
//! of the artifacts they were built from.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpccopf_core::ccopf::{solve, solve_deterministic, CcSolution, DispatchContext};
use gpccopf_core::dataset::{generate, read_csv, sample_inputs, split, write_csv, Dataset};
use gpccopf_core::grid::{BusKind, GridCase};
use gpccopf_core::hash::{case_hash, json_hash, sha256_hex};
use gpccopf_core::hybrid::{fit_hybrid, GpMode, HybridModel};
use gpccopf_core::optim::sqp::SqpStatus;
use gpccopf_core::powerflow::PfOptions;
use gpccopf_core::validate::{compare, mc_validate, CompareConfig, McReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver infeasible: {0}")]
    Infeasible(String),
    #[error("artifact hash mismatch: {0}")]
    HashMismatch(String),
    #[error("missing artifact {0} (run the earlier pipeline step first)")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Core(#[from] gpccopf_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::HashMismatch(_) => 4,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Infeasible(_) => "infeasible",
            CliError::HashMismatch(_) => "hash_mismatch",
            CliError::MissingArtifact(_) => "missing_artifact",
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
        }
    }

    /// One-line JSON form for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() })
            .to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CaseInfo,
    GenData,
    Train,
    Solve,
    Validate,
    Compare,
}

impl Command {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "case-info" => Self::CaseInfo,
            "gen-data" => Self::GenData,
            "train" => Self::Train,
            "solve" => Self::Solve,
            "validate" => Self::Validate,
            "compare" => Self::Compare,
            _ => return None,
        })
    }
}

/// Resolved inputs shared by every command.
pub struct Context {
    pub config: ExperimentConfig,
    pub case: GridCase,
    pub case_hash: String,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config_path: &Path, out: Option<&Path>, seed_override: Option<u64>) -> Result<Self, CliError> {
        let (mut config, base) = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed_override {
            config.override_seeds(s);
        }
        if let Some(o) = out {
            config.output.dir = o.to_path_buf();
        }
        let case = config.load_case(&base)?;
        Ok(Self {
            case_hash: case_hash(&case),
            out: config.output.dir.clone(),
            config,
            case,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// JSON envelope written by every command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub config: ExperimentConfig,
    /// Hashes of the case and of every artifact this one was derived from.
    pub upstream: BTreeMap<String, String>,
    pub body: T,
}

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_META: &str = "dataset.json";
pub const TRAIN_META: &str = "train.json";
pub const SOLUTION: &str = "solution.json";
pub const MC_REPORT: &str = "mc_report.json";
pub const COMPARISON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

pub fn model_file(mode: GpMode) -> &'static str {
    match mode {
        GpMode::Exact => "model_exact.json",
        GpMode::Sparse => "model_sparse.json",
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn to_pretty<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(gpccopf_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(gpccopf_core::Error::from)?;
    let hash = json_hash(&value)?;
    let parsed = serde_json::from_value(value).map_err(gpccopf_core::Error::from)?;
    Ok((parsed, hash))
}

fn expect_hash(what: &str, found: &str, expected: &str) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::HashMismatch(format!("{what}: artifact has {found}, expected {expected}")));
    }
    Ok(())
}

fn upstream(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Run one command; returns the text to print on success.
pub fn run(command: Command, ctx: &Context) -> Result<String, CliError> {
    match command {
        Command::CaseInfo => Ok(case_info(ctx)),
        Command::GenData => gen_data(ctx),
        Command::Train => train(ctx),
        Command::Solve => solve_cmd(ctx),
        Command::Validate => validate_cmd(ctx),
        Command::Compare => compare_cmd(ctx),
    }
}

pub fn case_info(ctx: &Context) -> String {
    let case = &ctx.case;
    let count = |k: BusKind| case.buses.iter().filter(|b| b.kind == k).count();
    let mut s = String::new();
    let _ = writeln!(s, "case: {}", ctx.config.case.path);
    let _ = writeln!(s, "base_mva: {}", case.base_mva);
    let _ = writeln!(
        s,
        "buses: {} (slack {}, pv {}, pq {})",
        case.n_buses(),
        count(BusKind::Slack),
        count(BusKind::Pv),
        count(BusKind::Pq)
    );
    let _ = writeln!(s, "generators: {}", case.generators.len());
    let _ = writeln!(s, "branches: {}", case.branches.len());
    let load: f64 = case.buses.iter().map(|b| b.p_load).sum();
    let _ = writeln!(s, "total_load_pu: {load}");
    for (id, sd) in ctx.config.case.uncertain_buses.iter().zip(&ctx.config.case.sigma) {
        let _ = writeln!(s, "uncertain: bus{id} sigma {sd} pu");
    }
    let _ = writeln!(s, "case_hash: {}", ctx.case_hash);
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_requested: usize,
    pub n_samples: usize,
    pub dropped: usize,
    pub q_limit_fraction: f64,
    pub csv_sha256: String,
    pub wall_time_s: f64,
}

fn gen_data(ctx: &Context) -> Result<String, CliError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let spec = cfg.spec();
    let xs = sample_inputs(&ctx.case, &spec, cfg.dataset.n, cfg.dataset.seed, cfg.sampling())?;
    let ds = generate(&ctx.case, &spec, &xs, PfOptions::default())?;
    let csv = write_csv(&ds);
    let q = ds.samples.iter().filter(|s| s.q_limit_exceeded).count() as f64 / ds.samples.len() as f64;
    let meta = DatasetMeta {
        n_requested: cfg.dataset.n,
        n_samples: ds.samples.len(),
        dropped: ds.dropped,
        q_limit_fraction: q,
        csv_sha256: sha256_hex(csv.as_bytes()),
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    let art = Artifact {
        kind: "dataset".into(),
        config: cfg.clone(),
        upstream: upstream(&[("case", &ctx.case_hash)]),
        body: meta,
    };
    write_file(&ctx.path(DATASET_CSV), &csv)?;
    write_file(&ctx.path(DATASET_META), &to_pretty(&art)?)?;
    Ok(format!(
        "dataset: {} samples ({} diverged, {:.1}% over Q limits) -> {}\n",
        art.body.n_samples,
        art.body.dropped,
        100.0 * q,
        ctx.path(DATASET_CSV).display()
    ))
}

/// Load the dataset after checking it belongs to the configured case and is unmodified.
fn load_dataset(ctx: &Context) -> Result<(Dataset, String), CliError> {
    let (meta, meta_hash): (Artifact<DatasetMeta>, String) = read_json(&ctx.path(DATASET_META))?;
    expect_hash("dataset case", meta.upstream.get("case").map_or("", String::as_str), &ctx.case_hash)?;
    let csv = read_file(&ctx.path(DATASET_CSV))?;
    expect_hash("dataset file", &sha256_hex(csv.as_bytes()), &meta.body.csv_sha256)?;
    Ok((read_csv(&csv, meta.body.dropped)?, meta_hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRmse {
    pub output: String,
    pub hybrid: f64,
    pub linear: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub mode: GpMode,
    pub model_sha256: String,
    pub n_train: usize,
    pub n_test: usize,
    pub rmse: Vec<OutputRmse>,
    pub wall_time_s: f64,
}

fn rmse_table(model: &HybridModel, test: &[gpccopf_core::dataset::Sample]) -> Result<Vec<OutputRmse>, CliError> {
    let mut hy = vec![0.0; model.n_outputs()];
    let mut li = vec![0.0; model.n_outputs()];
    for s in test {
        let h = model.predict_mean(&s.x)?;
        let l = model.predict_linear(&s.x)?;
        for j in 0..hy.len() {
            hy[j] += (h[j] - s.y_ac[j]).powi(2);
            li[j] += (l[j] - s.y_ac[j]).powi(2);
        }
    }
    let n = test.len().max(1) as f64;
    Ok(model
        .output_names
        .iter()
        .enumerate()
        .map(|(j, name)| OutputRmse {
            output: name.clone(),
            hybrid: (hy[j] / n).sqrt(),
            linear: (li[j] / n).sqrt(),
        })
        .collect())
}

/// Per output family (V, Q, S, pslack): worst held-out RMSE of the hybrid and of the linear model.
pub fn format_rmse(mode: GpMode, rows: &[OutputRmse]) -> String {
    let mut groups: Vec<(String, f64, f64, usize)> = Vec::new();
    for r in rows {
        let fam = r.output.split(':').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|g| g.0 == fam) {
            Some(g) => {
                g.1 = g.1.max(r.hybrid);
                g.2 = g.2.max(r.linear);
                g.3 += 1;
            }
            None => groups.push((fam, r.hybrid, r.linear, 1)),
        }
    }
    let mut s = format!("held-out RMSE ({mode:?}), worst per family\n");
    let _ = writeln!(s, "{:<8} {:>6} {:>12} {:>12}", "family", "count", "hybrid", "linear");
    for (fam, h, l, c) in groups {
        let _ = writeln!(s, "{fam:<8} {c:>6} {h:>12.3e} {l:>12.3e}");
    }
    s
}

fn train(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let (ds, ds_hash) = load_dataset(ctx)?;
    let (tr, te) = split(&ds.samples, cfg.dataset.train_fraction, cfg.dataset.split_seed)?;
    let train_set = Dataset { samples: tr, ..ds.clone() };
    let mut models = Vec::new();
    let mut printed = String::new();
    for &mode in &cfg.gp.modes {
        let t0 = Instant::now();
        let mut model = fit_hybrid(&train_set, &cfg.hybrid_options(mode))?;
        let wall = t0.elapsed().as_secs_f64();
        model.case_hash = ctx.case_hash.clone();
        let text = model.to_json()?;
        let rmse = rmse_table(&model, &te)?;
        printed.push_str(&format_rmse(mode, &rmse));
        write_file(&ctx.path(model_file(mode)), &text)?;
        models.push(TrainedModel {
            mode,
            model_sha256: json_hash(&serde_json::from_str::<serde_json::Value>(&text).map_err(gpccopf_core::Error::from)?)?,
            n_train: train_set.samples.len(),
            n_test: te.len(),
            rmse,
            wall_time_s: wall,
        });
    }
    let art = Artifact {
        kind: "train".into(),
        config: cfg.clone(),
        upstream: upstream(&[("case", &ctx.case_hash), ("dataset", &ds_hash)]),
        body: models,
    };
    write_file(&ctx.path(TRAIN_META), &to_pretty(&art)?)?;
    Ok(printed)
}

fn load_model(ctx: &Context, mode: GpMode) -> Result<(HybridModel, String), CliError> {
    let path = ctx.path(model_file(mode));
    let text = read_file(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(gpccopf_core::Error::from)?;
    let hash = json_hash(&value)?;
    let model = HybridModel::from_json(&text)?;
    expect_hash(&format!("model {}", path.display()), &model.case_hash, &ctx.case_hash)?;
    Ok((model, hash))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveBody {
    pub mode: GpMode,
    pub solution: CcSolution,
    pub deterministic: CcSolution,
}

fn describe(sol: &CcSolution) -> String {
    let mut s = format!(
        "  cost {:.4}  status {:?}  iterations {}  kkt {:.2e}\n  p_g {:?}\n  alpha {:?}\n",
        sol.expected_cost, sol.status, sol.iterations, sol.kkt, sol.decision.p_g, sol.decision.alpha
    );
    for m in &sol.violated {
        let _ = writeln!(s, "  violated {} {:.3e}", m.name, m.value);
    }
    s
}

fn solve_cmd(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let mode = cfg.primary_mode();
    let (model, model_hash) = load_model(ctx, mode)?;
    let spec = cfg.spec();
    let dctx = DispatchContext::new(&ctx.case, &model, &spec)?;
    let cc = cfg.cc_config();
    let det = solve_deterministic(&dctx, &cc)?;
    let sol = solve(&dctx, &cc, None)?;
    let art = Artifact {
        kind: "solution".into(),
        config: cfg.clone(),
        upstream: upstream(&[("case", &ctx.case_hash), ("model", &model_hash)]),
        body: SolveBody { mode, solution: sol, deterministic: det },
    };
    write_file(&ctx.path(SOLUTION), &to_pretty(&art)?)?;
    let mut out = format!("deterministic OPF\n{}", describe(&art.body.deterministic));
    let _ = write!(out, "GP CC-OPF (epsilon {})\n{}", cc.epsilon, describe(&art.body.solution));
    if art.body.solution.status == SqpStatus::Infeasible {
        return Err(CliError::Infeasible(format!(
            "no feasible dispatch at epsilon {} (max violation {:.3e})",
            cc.epsilon, art.body.solution.max_violation
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidateBody {
    pub solution: McReport,
    pub deterministic: McReport,
}

fn validate_cmd(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let (sol, sol_hash): (Artifact<SolveBody>, String) = read_json(&ctx.path(SOLUTION))?;
    expect_hash("solution case", sol.upstream.get("case").map_or("", String::as_str), &ctx.case_hash)?;
    let (_, model_hash) = load_model(ctx, sol.body.mode)?;
    expect_hash("solution model", sol.upstream.get("model").map_or("", String::as_str), &model_hash)?;
    let spec = cfg.spec();
    let v = &cfg.validate;
    let run = |d| mc_validate(&ctx.case, d, &spec, v.n_mc, v.mc_seed, v.tol);
    let body = ValidateBody {
        solution: run(&sol.body.solution.decision)?,
        deterministic: run(&sol.body.deterministic.decision)?,
    };
    let art = Artifact {
        kind: "mc_report".into(),
        config: cfg.clone(),
        upstream: upstream(&[("case", &ctx.case_hash), ("model", &model_hash), ("solution", &sol_hash)]),
        body,
    };
    write_file(&ctx.path(MC_REPORT), &to_pretty(&art)?)?;
    let mut out = String::new();
    for (label, r) in [("GP CC-OPF", &art.body.solution), ("deterministic", &art.body.deterministic)] {
        let _ = writeln!(
            out,
            "{label}: failure probability {:.4} (±{:.4}, n = {}, {} diverged)",
            r.failure_probability,
            3.0 * r.standard_error(),
            r.n_samples,
            r.divergences
        );
        for c in r.rates.iter().filter(|c| c.rate > 0.0) {
            let _ = writeln!(out, "  {} {:.4}", c.name, c.rate);
        }
    }
    Ok(out)
}

fn compare_cmd(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let (exact, exact_hash) = load_model(ctx, GpMode::Exact)?;
    let (sparse, sparse_hash) = load_model(ctx, GpMode::Sparse)?;
    let v = &cfg.validate;
    let ccfg = CompareConfig {
        cc: cfg.cc_config(),
        scenario_counts: v.scenario_counts.clone(),
        scenario_seed: v.scenario_seed,
        n_mc: v.n_mc,
        mc_seed: v.mc_seed,
        tol: v.tol,
    };
    let report = compare(&ctx.case, &cfg.spec(), &exact, &sparse, &ccfg)?;
    let art = Artifact {
        kind: "comparison".into(),
        config: cfg.clone(),
        upstream: upstream(&[
            ("case", &ctx.case_hash),
            ("model_exact", &exact_hash),
            ("model_sparse", &sparse_hash),
        ]),
        body: report,
    };
    write_file(&ctx.path(COMPARISON), &to_pretty(&art)?)?;
    write_file(&ctx.path(COMPARISON_CSV), &art.body.to_csv())?;
    Ok(art.body.to_table())
}

/// Parse process arguments, run, print, and return the exit code.
pub fn main_with(args: &[String]) -> i32 {
    let parsed = match parse_args(args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", e.to_json());
            eprintln!("{USAGE}");
            return e.exit_code();
        }
    };
    let result = Context::new(&parsed.config, parsed.out.as_deref(), parsed.seed_override)
        .and_then(|ctx| run(parsed.command, &ctx));
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub const USAGE: &str = "usage: gpccopf <case-info|gen-data|train|solve|validate|compare> --config <path> [--out <dir>] [--seed-override <int>]";

pub struct Args {
    pub command: Command,
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

pub fn parse_args(args: &[String]) -> Result<Args, CliError> {
    use clap::{value_parser, Arg, Command as App};
    let app = App::new("gpccopf")
        .no_binary_name(true)
        .arg(Arg::new("command").required(true).value_parser([
            "case-info", "gen-data", "train", "solve", "validate", "compare",
        ]))
        .arg(Arg::new("config").long("config").required(true).value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("out").long("out").value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("seed-override").long("seed-override").value_parser(value_parser!(u64)));
    let m = app.try_get_matches_from(args).map_err(|e| CliError::Config(e.to_string().trim().to_string()))?;
    let command = Command::parse(m.get_one::<String>("command").expect("required")).expect("validated by clap");
    Ok(Args {
        command,
        config: m.get_one::<PathBuf>("config").expect("required").clone(),
        out: m.get_one::<PathBuf>("out").cloned(),
        seed_override: m.get_one::<u64>("seed-override").copied(),
    })
}
