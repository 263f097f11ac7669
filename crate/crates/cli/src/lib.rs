//! Experiment runner behind the `wf` binary. Every command reads a JSON
//! config, writes its outputs to a directory and records a manifest with the
//! resolved config and SHA-256 checksums of every output file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use wf_core::chain::{self, Caps, ChainConfig, StopReason};
use wf_core::config::SystemConfig;
use wf_core::deviation::{self, DeviationRow, LipschitzEstimate, TauBound};
use wf_core::extinction::{self, ExperimentSpec};
use wf_core::meanfield;
use wf_core::rng::replicate_rng;
use wf_core::{LatticePoint, SimplexPoint, WfError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed configuration: exit code 1.
    Config(String),
    /// Precondition, numeric or resource failure while running: exit code 2.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<WfError> for CliError {
    fn from(e: WfError) -> Self {
        match e {
            WfError::Config(m) => CliError::Config(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Meanfield,
    Simulate,
    Extinction,
    Qsd,
    Bounds,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Meanfield => "meanfield",
            Command::Simulate => "simulate",
            Command::Extinction => "extinction",
            Command::Qsd => "qsd",
            Command::Bounds => "bounds",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
}

/// Files produced by a command, in the order they are written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub command: Command,
    pub config: Value,
    pub seed: Option<u64>,
    pub files: Vec<(String, Vec<u8>)>,
    pub censored: bool,
    /// Short human-readable result, printed by the binary.
    pub headline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: Option<usize>,
    pub wall_clock_secs: f64,
    pub censored: bool,
    pub checksums: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

pub fn read_config(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Run(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Run(e.to_string()))
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> wf_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Enumeration caps, with the state cap taken from `WF_MAX_STATES` when set.
pub fn caps_from_env() -> Result<Caps, CliError> {
    let mut caps = Caps::default();
    if let Ok(v) = std::env::var("WF_MAX_STATES") {
        let states: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("WF_MAX_STATES = {v:?} is not a count")))?;
        caps.states = states;
        caps.pairs = caps.pairs.max((states as u128) * (states as u128));
    }
    Ok(caps)
}

pub fn run(command: Command, config: Value, overrides: &Overrides) -> Result<RunOutput, CliError> {
    match command {
        Command::Meanfield => cmd_meanfield(config),
        Command::Simulate => cmd_simulate(config, overrides),
        Command::Extinction => cmd_extinction(config, overrides),
        Command::Qsd => cmd_qsd(config),
        Command::Bounds => cmd_bounds(config, overrides),
    }
}

/// Writes the outputs and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput, threads: Option<usize>, wall_clock_secs: f64) -> Result<RunManifest, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &out.files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        checksums.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = RunManifest {
        command: out.command,
        config: out.config.clone(),
        seed: out.seed,
        version: VERSION.to_string(),
        threads,
        wall_clock_secs,
        censored: out.censored,
        checksums,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json_bytes(&manifest)?).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Runs `command` on a pool of `threads` workers (all cores when `None`).
pub fn execute(
    command: Command,
    config: Value,
    overrides: &Overrides,
    threads: Option<usize>,
    out_dir: &Path,
) -> Result<(RunOutput, RunManifest), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Run(e.to_string()))?;
    let clock = Instant::now();
    let out = pool.install(|| run(command, config, overrides))?;
    let manifest = write_outputs(out_dir, &out, threads, clock.elapsed().as_secs_f64())?;
    Ok((out, manifest))
}

/// Re-runs the command recorded in a manifest and lists any output whose
/// checksum differs.
pub fn rerun(manifest_path: &Path, threads: Option<usize>, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let old: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let (_, new) = execute(old.command, old.config.clone(), &Overrides::default(), threads, out_dir)?;
    let mut mismatches = Vec::new();
    for (name, sum) in &old.checksums {
        if new.checksums.get(name) != Some(sum) {
            mismatches.push(name.clone());
        }
    }
    for name in new.checksums.keys() {
        if !old.checksums.contains_key(name) {
            mismatches.push(name.clone());
        }
    }
    Ok(mismatches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanfieldConfig {
    #[serde(flatten)]
    pub system: SystemConfig,
}

fn cmd_meanfield(config: Value) -> Result<RunOutput, CliError> {
    let cfg: MeanfieldConfig = parse(config)?;
    let system = cfg.system.resolve()?;
    let a = system.payoff()?;
    let omega = system.omega()?;
    // builds and validates the whole rule, mutation included
    system.build_rule()?;
    let report = meanfield::analyze(&a, omega)?;
    let headline = format!(
        "equilibrium {:?}, spectral radius on W {}",
        report.equilibrium,
        report.spectral_radius_on_w.map_or("n/a".into(), |r| r.to_string())
    );
    Ok(RunOutput {
        command: Command::Meanfield,
        config: to_value(&MeanfieldConfig { system })?,
        seed: None,
        files: vec![("meanfield.json".into(), json_bytes(&report)?)],
        censored: false,
        headline,
    })
}

fn default_stride() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_sim_steps() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub system: SystemConfig,
    #[serde(rename = "N")]
    pub n: u32,
    pub x0: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_sim_steps")]
    pub max_steps: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default = "default_true")]
    pub stop_at_boundary: bool,
    /// Also stop once some frequency is at or below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct SimulationSummary {
    initial: Vec<u32>,
    final_state: Vec<u32>,
    steps: u64,
    absorption_time: Option<u64>,
    stop: StopReason,
}

fn cmd_simulate(config: Value, overrides: &Overrides) -> Result<RunOutput, CliError> {
    let mut cfg: SimulateConfig = parse(config)?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    cfg.system = cfg.system.resolve()?;
    let rule = cfg.system.build_rule()?;
    let chain_cfg = ChainConfig::new(cfg.n, rule, cfg.seed, cfg.max_steps).map_err(|e| CliError::Config(e.to_string()))?;
    let x0 = SimplexPoint::new(cfg.x0.clone()).map_err(|e| CliError::Config(format!("field `x0`: {e}")))?;
    let x0 = LatticePoint::round_from(&x0, cfg.n);
    let threshold = cfg.stop_threshold;
    let mut rng = replicate_rng(cfg.seed, 0);
    let rec = chain::simulate(
        &chain_cfg,
        &x0,
        cfg.stride,
        cfg.stop_at_boundary,
        |_, x| threshold.is_some_and(|t| x.as_frequencies::<f64>().min_coord() <= t),
        &mut rng,
    )?;
    let summary = SimulationSummary {
        initial: rec.initial.counts().to_vec(),
        final_state: rec.final_state.counts().to_vec(),
        steps: rec.steps,
        absorption_time: rec.absorption_time,
        stop: rec.stop,
    };
    Ok(RunOutput {
        command: Command::Simulate,
        config: to_value(&cfg)?,
        seed: Some(cfg.seed),
        files: vec![
            ("trajectory.csv".into(), csv_bytes(|w| rec.write_csv(w))?),
            ("simulation.json".into(), json_bytes(&summary)?),
        ],
        censored: rec.stop == StopReason::MaxSteps,
        headline: format!("{} steps, stop: {:?}, final {:?}", rec.steps, rec.stop, rec.final_state.counts()),
    })
}

fn cmd_extinction(config: Value, overrides: &Overrides) -> Result<RunOutput, CliError> {
    let mut spec: ExperimentSpec = parse(config)?;
    if let Some(s) = overrides.seed {
        spec.seed = s;
    }
    if let Some(r) = overrides.replicates {
        spec.replicates = r;
    }
    let spec = spec.resolve()?;
    let result = extinction::run_experiment(&spec)?;
    let s = &result.summary;
    let m = s.equilibrium.len();
    let headline = s
        .rows
        .iter()
        .map(|r| format!("{:?}: {:?}", r.initial, r.counts))
        .collect::<Vec<_>>()
        .join("; ");
    let censored = s.rows.iter().any(|r| r.censored + r.skipped > 0);
    Ok(RunOutput {
        command: Command::Extinction,
        config: to_value(&spec)?,
        seed: Some(spec.seed),
        files: vec![
            ("summary.json".into(), json_bytes(s)?),
            ("trials.csv".into(), csv_bytes(|w| extinction::write_trials_csv(&result.trials, m, w))?),
            ("histogram.csv".into(), csv_bytes(|w| s.histogram.write_csv(w))?),
        ],
        censored,
        headline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QsdConfig {
    #[serde(flatten)]
    pub system: SystemConfig,
    #[serde(rename = "N")]
    pub n: u32,
}

#[derive(Debug, Clone, Serialize)]
struct QsdReport {
    n: u32,
    lambda: f64,
    dense_eigenvalue: f64,
    iterations: usize,
    eigen_residual: f64,
    leak_residual: f64,
    interior_states: usize,
}

fn cmd_qsd(config: Value) -> Result<RunOutput, CliError> {
    let mut cfg: QsdConfig = parse(config)?;
    cfg.system = cfg.system.resolve()?;
    let rule = cfg.system.build_rule()?;
    let caps = caps_from_env()?;
    let chain = chain::build_exact_chain(cfg.system.dim(), cfg.n, &rule, caps)?;
    let q = chain::qsd_power_iteration(&chain)?;
    let report = QsdReport {
        n: cfg.n,
        lambda: q.lambda,
        dense_eigenvalue: chain::qsd_dense_eigenvalue(&chain)?,
        iterations: q.iterations,
        eigen_residual: q.eigen_residual,
        leak_residual: q.leak_residual,
        interior_states: q.states.len(),
    };
    Ok(RunOutput {
        command: Command::Qsd,
        config: to_value(&cfg)?,
        seed: None,
        files: vec![
            ("qsd.json".into(), json_bytes(&report)?),
            ("qsd.csv".into(), csv_bytes(|w| q.write_csv(w))?),
        ],
        censored: false,
        headline: format!("lambda_N = {} (leak residual {:e})", q.lambda, q.leak_residual),
    })
}

fn default_epsilons() -> Vec<f64> {
    vec![0.05, 0.1]
}

fn default_horizon() -> u64 {
    50
}

fn default_lipschitz_samples() -> usize {
    20_000
}

fn default_safety() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsConfig {
    #[serde(flatten)]
    pub system: SystemConfig,
    #[serde(rename = "N")]
    pub n: u32,
    pub x0: Vec<f64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
    /// Fixed Lipschitz constant; estimated from the rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct BoundsReport {
    rho_used: f64,
    lipschitz: Option<LipschitzEstimate>,
    rows: Vec<DeviationRow>,
    all_satisfied: bool,
    expected_tau: Vec<(f64, TauBound, f64)>,
}

fn cmd_bounds(config: Value, overrides: &Overrides) -> Result<RunOutput, CliError> {
    let mut cfg: BoundsConfig = parse(config)?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(r) = overrides.replicates {
        cfg.trials = r;
    }
    cfg.system = cfg.system.resolve()?;
    if cfg.epsilons.iter().any(|&e| e.is_nan() || e <= 0.0) || cfg.horizon == 0 || cfg.trials == 0 || cfg.n == 0 {
        return Err(CliError::Config("need positive `epsilons`, `horizon`, `trials` and `N`".into()));
    }
    let rule = cfg.system.build_rule()?;
    let m = rule.dim();
    let (rho, lipschitz) = match cfg.rho {
        Some(r) => (r, None),
        None => {
            // the estimate draws from its own stream, past every trial index
            let mut rng = replicate_rng(cfg.seed, u64::MAX);
            let est = deviation::estimate_lipschitz(&rule, cfg.lipschitz_samples, &mut rng)?;
            (cfg.safety_factor * est.rho, Some(est))
        }
    };
    let x0 = SimplexPoint::new(cfg.x0.clone()).map_err(|e| CliError::Config(format!("field `x0`: {e}")))?;
    let x0 = LatticePoint::round_from(&x0, cfg.n);
    let taus = deviation::decoupling_ensemble(&rule, &x0, &cfg.epsilons, cfg.horizon, cfg.trials, cfg.seed)?;
    let rows = deviation::deviation_table(&taus, &cfg.epsilons, cfg.horizon, cfg.n, m, rho);
    let expected_tau = cfg
        .epsilons
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            let censored_mean =
                taus.iter().map(|t| t[e].unwrap_or(cfg.horizon) as f64).sum::<f64>() / taus.len() as f64;
            (eps, deviation::expected_tau_lower_bound(eps, cfg.n, m, rho), censored_mean)
        })
        .collect();
    let all_satisfied = rows.iter().all(|r| r.satisfied);
    let violations = rows.iter().filter(|r| !r.satisfied).count();
    let report = BoundsReport {
        rho_used: rho,
        lipschitz,
        all_satisfied,
        expected_tau,
        rows: rows.clone(),
    };
    Ok(RunOutput {
        command: Command::Bounds,
        config: to_value(&cfg)?,
        seed: Some(cfg.seed),
        files: vec![
            ("deviation.csv".into(), csv_bytes(|w| deviation::write_deviation_csv(&rows, w))?),
            ("bounds.json".into(), json_bytes(&report)?),
        ],
        censored: false,
        headline: format!("rho = {rho}, {violations} of {} rows exceed the bound", rows.len()),
    })
}

/// Directory holding the experiment configs shipped with the crate.
pub fn shipped_configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}
