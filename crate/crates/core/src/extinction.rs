//! Route-to-extinction experiments: least-fit types at the equilibrium,
//! the threshold conditions, and ensembles of stopped or absorbed chains.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{step_sample, ChainConfig};
use crate::config::SystemConfig;
use crate::error::{Result, WfError};
use crate::fitness::UpdateRule;
use crate::meanfield::{estimate_chain_constants, solve_interior_equilibrium, ChainConstants};
use crate::rng::replicate_rng;
use crate::simplex::{LatticePoint, SimplexPoint, SupportSet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeastFitReport {
    pub alpha: f64,
    pub beta: f64,
    pub least_fit: SupportSet,
    pub profile: SimplexPoint,
}

/// `alpha`, `J*` and `beta` of the profile `p`.
fn profile_minima(p: &[f64]) -> Option<(f64, SupportSet, f64)> {
    let alpha = p.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-14;
    let set: Vec<usize> = (0..p.len()).filter(|&j| p[j] - alpha <= tol).collect();
    let beta = (0..p.len())
        .filter(|j| !set.contains(j))
        .map(|j| p[j])
        .fold(f64::INFINITY, f64::min);
    beta.is_finite().then(|| (alpha, SupportSet::new(set), beta))
}

pub fn least_fit(rule: &UpdateRule, chi: &SimplexPoint) -> Result<LeastFitReport> {
    let profile = rule.apply(chi)?;
    let (alpha, least_fit, beta) = profile_minima(profile.coords()).ok_or_else(|| {
        WfError::Precondition("update of the equilibrium is uniform: least-fit set undefined".into())
    })?;
    Ok(LeastFitReport {
        alpha,
        beta,
        least_fit,
        profile,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonSource {
    User,
    /// Grid estimate; conclusions drawn from it are conditional on the estimate.
    GridEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCheck {
    pub theta: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub epsilon_source: EpsilonSource,
    /// `1 - alpha - theta > (1 - beta + theta)^(1 - eta)`
    pub eta_condition: bool,
    /// `1 - alpha - theta > exp(-epsilon^2 / 2)`
    pub threshold_condition: bool,
}

pub fn theta_range(report: &LeastFitReport) -> (f64, f64) {
    (0.0, (report.beta - report.alpha) / 2.0)
}

pub fn eta_range(report: &LeastFitReport, theta: f64) -> (f64, f64) {
    let hi = 1.0 - (1.0 - report.alpha - theta).ln() / (1.0 - report.beta + theta).ln();
    (0.0, hi)
}

pub fn check_thresholds(
    report: &LeastFitReport,
    theta: f64,
    eta: f64,
    epsilon: f64,
    epsilon_source: EpsilonSource,
) -> Result<ThresholdCheck> {
    let (lo, hi) = theta_range(report);
    if !(theta > lo && theta < hi) {
        return Err(WfError::InvalidParameter(format!("theta = {theta} outside ({lo}, {hi})")));
    }
    let (elo, ehi) = eta_range(report, theta);
    if !(eta > elo && eta < ehi) {
        return Err(WfError::InvalidParameter(format!("eta = {eta} outside ({elo}, {ehi})")));
    }
    if !(epsilon >= 0.0) {
        return Err(WfError::InvalidParameter(format!("epsilon = {epsilon} must be non-negative")));
    }
    let left = 1.0 - report.alpha - theta;
    Ok(ThresholdCheck {
        theta,
        eta,
        epsilon,
        epsilon_source,
        eta_condition: left > (1.0 - report.beta + theta).powf(1.0 - eta),
        threshold_condition: left > (-epsilon * epsilon / 2.0).exp(),
    })
}

/// Interior points whose update profile keeps the least-fit gap:
/// `alpha_x < alpha + theta` and `beta_x > beta - theta`.
pub fn in_neighbourhood(rule: &UpdateRule, report: &LeastFitReport, theta: f64, x: &SimplexPoint) -> bool {
    if !x.is_interior() {
        return false;
    }
    let Ok(p) = rule.apply(x) else { return false };
    match profile_minima(p.coords()) {
        Some((a, _, b)) => a < report.alpha + theta && b > report.beta - theta,
        None => false,
    }
}

/// Interior points outside the neighbourhood with some coordinate outside
/// `J*` at least `eta`.
pub fn in_compact(rule: &UpdateRule, report: &LeastFitReport, theta: f64, eta: f64, x: &SimplexPoint) -> bool {
    x.is_interior()
        && !in_neighbourhood(rule, report, theta, x)
        && (0..x.dim()).any(|j| !report.least_fit.contains(j) && x.get(j) >= eta)
}

/// Grid estimate of the chain constants for the pair (compact set, neighbourhood).
pub fn estimate_epsilon_theta(
    rule: &UpdateRule,
    report: &LeastFitReport,
    theta: f64,
    eta: f64,
    candidates: &[f64],
    resolution: u32,
    max_steps: usize,
) -> Result<Option<ChainConstants>> {
    estimate_chain_constants(
        rule,
        |x| in_compact(rule, report, theta, eta, x),
        |x| in_neighbourhood(rule, report, theta, x),
        candidates,
        resolution,
        max_steps,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorptionEvent {
    pub support_size: usize,
    /// The vanished type when exactly one type is absent.
    pub zero_index: Option<usize>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    /// Stopping time `T` or absorption time; `None` when censored.
    pub stop_time: Option<u64>,
    pub censored: bool,
    pub final_state: LatticePoint,
    pub least_index: Option<usize>,
    pub tie: bool,
    pub sample_time: Option<u64>,
    pub d_eq: Option<f64>,
    /// `d_eq` was taken at `T - 1` because `T` came before the sampling time.
    pub early_stop: bool,
    pub event: Option<AbsorptionEvent>,
}

fn least_abundant(x: &LatticePoint) -> (usize, bool) {
    crate::simplex::argmin(x.counts())
}

/// Runs until `T = min{k >= 0 : min_j X_k(j) <= threshold}`; `d_eq` is the
/// Euclidean distance to `chi` at a uniform time in `window`, or at `T - 1`
/// when the chain stops first.
pub fn run_trial_tablestyle<R: Rng + ?Sized>(
    config: &ChainConfig,
    x0: &LatticePoint,
    chi: &SimplexPoint,
    window: (u64, u64),
    threshold: f64,
    rng: &mut R,
) -> Result<TrialOutcome> {
    if window.0 > window.1 {
        return Err(WfError::InvalidParameter(format!("empty sampling window {window:?}")));
    }
    let t_sample = rng.random_range(window.0..=window.1);
    let distance = |x: &LatticePoint| x.as_frequencies::<f64>().euclidean_distance(chi);
    let limit = (threshold * config.n as f64).floor();
    let mut x = x0.clone();
    let mut prev = x0.clone();
    let mut d_eq = None;
    let mut k = 0u64;
    loop {
        if (x.min_count() as f64) <= limit + 1e-9 * config.n as f64
            && x.as_frequencies::<f64>().min_coord() <= threshold
        {
            let (idx, tie) = least_abundant(&x);
            let (d, early) = match d_eq {
                Some(d) => (Some(d), false),
                None => (Some(distance(&prev)?), true),
            };
            return Ok(TrialOutcome {
                stop_time: Some(k),
                censored: false,
                final_state: x,
                least_index: Some(idx),
                tie,
                sample_time: Some(if early { k.saturating_sub(1) } else { t_sample }),
                d_eq: d,
                early_stop: early,
                event: None,
            });
        }
        if k == t_sample {
            d_eq = Some(distance(&x)?);
        }
        if k >= config.max_steps {
            return Ok(TrialOutcome {
                stop_time: None,
                censored: true,
                final_state: x,
                least_index: None,
                tie: false,
                sample_time: d_eq.map(|_| t_sample),
                d_eq,
                early_stop: false,
                event: None,
            });
        }
        prev = x;
        x = step_sample(&prev, &config.rule, rng)?;
        k += 1;
    }
}

/// Runs until the first `k > 0` with `X_k` on the boundary and classifies
/// the hitting state: exactly one type absent, and that type least fit.
pub fn run_trial_absorption<R: Rng + ?Sized>(
    config: &ChainConfig,
    x0: &LatticePoint,
    report: &LeastFitReport,
    rng: &mut R,
) -> Result<TrialOutcome> {
    if config.rule.mutation().is_some() {
        return Err(WfError::Precondition("absorption trials need a rule without mutation".into()));
    }
    let m = x0.dim();
    let mut x = x0.clone();
    let mut k = 0u64;
    loop {
        if k >= config.max_steps {
            return Ok(TrialOutcome {
                stop_time: None,
                censored: true,
                final_state: x,
                least_index: None,
                tie: false,
                sample_time: None,
                d_eq: None,
                early_stop: false,
                event: None,
            });
        }
        x = step_sample(&x, &config.rule, rng)?;
        k += 1;
        if !x.is_interior() {
            let support = x.support();
            let zero_index = if support.len() + 1 == m {
                (0..m).find(|&j| !support.contains(j))
            } else {
                None
            };
            let satisfied = zero_index.is_some_and(|j| report.least_fit.contains(j));
            let (idx, tie) = least_abundant(&x);
            return Ok(TrialOutcome {
                stop_time: Some(k),
                censored: false,
                final_state: x,
                least_index: Some(idx),
                tie,
                sample_time: None,
                d_eq: None,
                early_stop: false,
                event: Some(AbsorptionEvent {
                    support_size: support.len(),
                    zero_index,
                    satisfied,
                }),
            });
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    #[default]
    Threshold,
    Absorption,
}

fn default_threshold() -> f64 {
    0.05
}

fn default_window() -> [u64; 2] {
    [1000, 5000]
}

fn default_max_steps() -> u64 {
    1_000_000
}

fn default_bin_width() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub system: SystemConfig,
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub initials: Vec<Vec<f64>>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub stop_threshold: f64,
    #[serde(default = "default_window")]
    pub sample_window: [u64; 2],
    #[serde(default)]
    pub mode: StopMode,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    /// Trials not started within this many seconds are recorded as skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_budget_secs: Option<f64>,
}

impl ExperimentSpec {
    /// Canonical form: `omega` resolved, `M` filled in. Validates everything
    /// that does not depend on the payoff matrix's spectral properties.
    pub fn resolve(&self) -> Result<Self> {
        let mut out = self.clone();
        out.system = self.system.resolve()?;
        let m = self.system.dim();
        if let Some(given) = self.m {
            if given != m {
                return Err(WfError::Config(format!("field `M` = {given} but `matrix` is {m}x{m}")));
            }
        }
        out.m = Some(m);
        if self.n == 0 {
            return Err(WfError::Config("field `N` must be at least 1".into()));
        }
        if self.initials.is_empty() {
            return Err(WfError::Config("field `initials` is empty".into()));
        }
        for (i, x) in self.initials.iter().enumerate() {
            if x.len() != m {
                return Err(WfError::Config(format!("initials[{i}] has {} entries, expected {m}", x.len())));
            }
            SimplexPoint::new(x.clone()).map_err(|e| WfError::Config(format!("initials[{i}]: {e}")))?;
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(WfError::Config("field `stop_threshold` must lie in (0, 1)".into()));
        }
        if self.sample_window[0] > self.sample_window[1] {
            return Err(WfError::Config("field `sample_window` must be [lo, hi] with lo <= hi".into()));
        }
        if self.max_steps == 0 {
            return Err(WfError::Config("field `max_steps` must be at least 1".into()));
        }
        if !(self.bin_width > 0.0) {
            return Err(WfError::Config("field `bin_width` must be positive".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub initial: usize,
    pub trial: usize,
    pub outcome: std::result::Result<TrialOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialSummary {
    pub initial: Vec<f64>,
    pub lattice_start: Vec<u32>,
    pub trials: usize,
    /// Trials whose least-abundant type at the stop was `j`, per `j`.
    pub counts: Vec<usize>,
    pub ties: usize,
    pub censored: usize,
    pub errors: usize,
    pub skipped: usize,
    pub early_stops: usize,
    pub mean_stop_time: Option<f64>,
    /// Absorption mode: trials in which the event held.
    pub event_satisfied: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(bin_width: f64, max_value: f64) -> Self {
        let bins = (max_value / bin_width).ceil().max(1.0) as usize;
        Self {
            bin_width,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let i = ((v / self.bin_width).floor().max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            out.write_record(&[
                format!("{}", i as f64 * self.bin_width),
                format!("{}", (i + 1) as f64 * self.bin_width),
                c.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub spec: ExperimentSpec,
    pub equilibrium: Vec<f64>,
    pub least_fit: LeastFitReport,
    pub rows: Vec<InitialSummary>,
    pub histogram: Histogram,
    pub d_eq_metric: &'static str,
}

pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub trials: Vec<TrialRecord>,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let spec = spec.resolve()?;
    let rule = spec.system.build_rule()?;
    let payoff = spec.system.payoff()?;
    let eq = solve_interior_equilibrium(&payoff)?;
    let chi = eq
        .point()
        .ok_or_else(|| WfError::NoEquilibrium("equilibrium lies outside the open simplex".into()))?;
    let report = least_fit(&rule, &chi)?;
    let config = ChainConfig::new(spec.n, rule, spec.seed, spec.max_steps)?;
    let starts: Vec<LatticePoint> = spec
        .initials
        .iter()
        .map(|x| LatticePoint::round_from(&SimplexPoint::new(x.clone()).expect("validated"), spec.n))
        .collect();
    let window = (spec.sample_window[0], spec.sample_window[1]);
    let reps = spec.replicates;
    let clock = Instant::now();
    let trials: Vec<TrialRecord> = (0..starts.len() * reps)
        .into_par_iter()
        .map(|g| {
            let (initial, trial) = (g / reps, g % reps);
            if let Some(budget) = spec.time_budget_secs {
                if clock.elapsed().as_secs_f64() > budget {
                    return TrialRecord {
                        initial,
                        trial,
                        outcome: Err("skipped: time budget exhausted".into()),
                    };
                }
            }
            let mut rng = replicate_rng(spec.seed, g as u64);
            let x0 = &starts[initial];
            let outcome = match spec.mode {
                StopMode::Threshold => run_trial_tablestyle(&config, x0, &chi, window, spec.stop_threshold, &mut rng),
                StopMode::Absorption => run_trial_absorption(&config, x0, &report, &mut rng),
            };
            TrialRecord {
                initial,
                trial,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();

    let m = chi.dim();
    let mut histogram = Histogram::new(spec.bin_width, std::f64::consts::SQRT_2);
    let mut rows = Vec::new();
    for (i, start) in starts.iter().enumerate() {
        let mine = &trials[i * reps..(i + 1) * reps];
        let mut row = InitialSummary {
            initial: spec.initials[i].clone(),
            lattice_start: start.counts().to_vec(),
            trials: reps,
            counts: vec![0; m],
            ties: 0,
            censored: 0,
            errors: 0,
            skipped: 0,
            early_stops: 0,
            mean_stop_time: None,
            event_satisfied: (spec.mode == StopMode::Absorption).then_some(0),
        };
        let mut stop_sum = 0.0;
        let mut stopped = 0usize;
        for t in mine {
            match &t.outcome {
                Err(e) if e.starts_with("skipped") => row.skipped += 1,
                Err(_) => row.errors += 1,
                Ok(o) => {
                    if o.censored {
                        row.censored += 1;
                    }
                    if let Some(j) = o.least_index {
                        row.counts[j] += 1;
                    }
                    if o.tie {
                        row.ties += 1;
                    }
                    if o.early_stop {
                        row.early_stops += 1;
                    }
                    if let Some(s) = o.stop_time {
                        stop_sum += s as f64;
                        stopped += 1;
                    }
                    if let Some(d) = o.d_eq {
                        histogram.add(d);
                    }
                    if let (Some(n), Some(ev)) = (row.event_satisfied.as_mut(), &o.event) {
                        *n += ev.satisfied as usize;
                    }
                }
            }
        }
        row.mean_stop_time = (stopped > 0).then(|| stop_sum / stopped as f64);
        rows.push(row);
    }
    Ok(ExperimentResult {
        summary: ExperimentSummary {
            spec,
            equilibrium: eq.coords,
            least_fit: report,
            rows,
            histogram,
            d_eq_metric: "euclidean",
        },
        trials,
    })
}

pub fn write_trials_csv<W: Write>(trials: &[TrialRecord], m: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["initial", "trial", "stop_time", "censored", "least_index", "tie"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=m).map(|i| format!("x_{i}")));
    header.extend(
        ["sample_time", "d_eq_euclidean", "early_stop", "support_size", "zero_index", "event", "error"]
            .iter()
            .map(|s| s.to_string()),
    );
    out.write_record(&header)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for t in trials {
        let mut row = vec![(t.initial + 1).to_string(), t.trial.to_string()];
        match &t.outcome {
            Ok(o) => {
                row.push(opt(o.stop_time.map(|v| v.to_string())));
                row.push(o.censored.to_string());
                row.push(opt(o.least_index.map(|v| (v + 1).to_string())));
                row.push(o.tie.to_string());
                row.extend(o.final_state.counts().iter().map(|c| c.to_string()));
                row.push(opt(o.sample_time.map(|v| v.to_string())));
                row.push(opt(o.d_eq.map(|v| format!("{v:e}"))));
                row.push(o.early_stop.to_string());
                row.push(opt(o.event.as_ref().map(|e| e.support_size.to_string())));
                row.push(opt(o.event.as_ref().and_then(|e| e.zero_index).map(|v| (v + 1).to_string())));
                row.push(opt(o.event.as_ref().map(|e| e.satisfied.to_string())));
                row.push(String::new());
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 4 + m + 6));
                row.push(e.clone());
            }
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
