//! Seeded replication runner: parameter sweeps over every scheduler on paired
//! channel traces, with CSV output.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{Allocation, RateMatrix};
use crate::channel::{generate_trace, power_delay_profile, ChannelConfig, ChannelError};
use crate::ensemble::{solve_fixed_point, EnsembleError, EnsemblePolicy, RateDistribution, DEFAULT_DAMPING, DEFAULT_FIXED_POINT_TOL};
use crate::format::significant;
use crate::metrics::{aggregate, jain_index, system_throughput, MetricsError, Summary, ThroughputSeries};
use crate::schedulers::{BacklogMode, Scheduler, SchedulerError, SchedulerKind};

pub const CSV_HEADER: [&str; 7] = [
    "sweep_axis",
    "sweep_value",
    "scheduler",
    "replication",
    "system_throughput",
    "jain_index",
    "user_throughputs",
];

const CSV_DIGITS: usize = 9;
const FAILED: &str = "FAILED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv output: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Csv(e.to_string())
    }
}

/// Scheduler names as they appear in configs and CSV output. Look-back
/// kinds take their window from the sweep (or `window_slots`), and
/// `pf_infinite` gets its policy from the fixed point at the configured SNRs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerSpec {
    PfW1,
    PfLookback,
    PfInfinite,
    MaxThroughput,
    MaxminLookback,
}

impl SchedulerSpec {
    pub const ALL: [SchedulerSpec; 5] = [
        SchedulerSpec::PfW1,
        SchedulerSpec::PfLookback,
        SchedulerSpec::PfInfinite,
        SchedulerSpec::MaxThroughput,
        SchedulerSpec::MaxminLookback,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SchedulerSpec::PfW1 => "pf_w1",
            SchedulerSpec::PfLookback => "pf_lookback",
            SchedulerSpec::PfInfinite => "pf_infinite",
            SchedulerSpec::MaxThroughput => "max_throughput",
            SchedulerSpec::MaxminLookback => "maxmin_lookback",
        }
    }

    fn resolve(self, window: usize, policy: Option<&Arc<EnsemblePolicy>>) -> SchedulerKind {
        match self {
            SchedulerSpec::PfW1 => SchedulerKind::PfW1,
            SchedulerSpec::PfLookback => SchedulerKind::PfLookback { window },
            SchedulerSpec::PfInfinite => SchedulerKind::PfInfinite {
                policy: Arc::clone(policy.expect("policy is solved before resolving pf_infinite")),
            },
            SchedulerSpec::MaxThroughput => SchedulerKind::MaxThroughput,
            SchedulerSpec::MaxminLookback => SchedulerKind::MaxMinLookback { window },
        }
    }
}

impl fmt::Display for SchedulerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Application window in slots; at fixed Doppler this sweeps the
    /// W-normalized Doppler `f_d * W * slot`.
    WindowSlots,
    DopplerHz,
    /// Seconds.
    RmsDelaySpread,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::WindowSlots => "window_slots",
            SweepAxis::DopplerHz => "doppler_hz",
            SweepAxis::RmsDelaySpread => "rms_delay_spread",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Replication count and simulated duration presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 10 replications of 0.2 s.
    Desk,
    /// 100 replications of 1 s.
    Paper,
}

impl Scale {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (reps, duration) = match self {
            Scale::Desk => (10, 0.2),
            Scale::Paper => (100, 1.0),
        };
        cfg.replications = reps;
        cfg.channel.duration = duration;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub channel: ChannelConfig,
    pub schedulers: Vec<SchedulerSpec>,
    pub sweep: Sweep,
    /// Window for look-back schedulers and for smoothing the metrics when
    /// the sweep is not over the window.
    pub window_slots: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub skip_warmup: bool,
    pub backlog_mode: BacklogMode,
    pub output_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            channel: ChannelConfig {
                duration: 0.2,
                ..ChannelConfig::default()
            },
            schedulers: SchedulerSpec::ALL.to_vec(),
            sweep: Sweep {
                axis: SweepAxis::WindowSlots,
                values: vec![1.0, 50.0, 200.0, 1000.0],
            },
            window_slots: 200,
            replications: 10,
            base_seed: 0,
            skip_warmup: false,
            backlog_mode: BacklogMode::Saturated,
            output_path: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a `.toml` or `.json` file and validates it.
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = read_structured(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        self.channel.validate()?;
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.schedulers.is_empty() {
            return bad("no schedulers listed".into());
        }
        if self.window_slots == 0 {
            return bad("window_slots must be at least 1".into());
        }
        if self.channel.num_slots() == 0 {
            return bad("duration is shorter than one slot".into());
        }
        if self.sweep.values.is_empty() {
            return bad("sweep has no values".into());
        }
        for &v in &self.sweep.values {
            let ok = match self.sweep.axis {
                SweepAxis::WindowSlots => v >= 1.0 && v.fract() == 0.0 && v.is_finite(),
                SweepAxis::DopplerHz | SweepAxis::RmsDelaySpread => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return bad(format!("invalid {} value {v}", self.sweep.axis.label()));
            }
        }
        for point in 0..self.sweep.values.len() {
            let ch = self.point_channel(point, 0);
            ch.validate()?;
            power_delay_profile(&ch)?;
        }
        Ok(())
    }

    /// Channel configuration at sweep point `point`, replication `rep`.
    pub fn point_channel(&self, point: usize, rep: usize) -> ChannelConfig {
        let v = self.sweep.values[point];
        let mut ch = self.channel.clone();
        match self.sweep.axis {
            SweepAxis::DopplerHz => ch.doppler_hz = v,
            SweepAxis::RmsDelaySpread => ch.rms_delay_spread = v,
            SweepAxis::WindowSlots => {}
        }
        ch.seed = self.base_seed.wrapping_add(rep as u64);
        ch
    }

    /// Window used by the look-back schedulers and the metrics at `point`.
    pub fn point_window(&self, point: usize) -> usize {
        match self.sweep.axis {
            SweepAxis::WindowSlots => self.sweep.values[point] as usize,
            _ => self.window_slots,
        }
    }

    /// Expected-throughput policy for `pf_infinite` at the configured SNRs.
    pub fn infinite_window_policy(&self) -> Result<EnsemblePolicy, HarnessError> {
        let dists = self
            .channel
            .mean_snr_linear()
            .into_iter()
            .map(RateDistribution::rayleigh)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(solve_fixed_point(
            &dists,
            self.channel.num_subcarriers,
            DEFAULT_FIXED_POINT_TOL,
            DEFAULT_DAMPING,
        )?)
    }
}

/// Deserializes a `.toml` or `.json` file; other extensions are tried as
/// JSON and then TOML.
pub fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        message,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
        _ => serde_json::from_str(&text).or_else(|json| {
            toml::from_str(&text).map_err(|toml| parse_err(format!("as JSON: {json}; as TOML: {toml}")))
        }),
    }
}

/// Per-slot per-user throughputs of one scheduler on one trace.
pub fn simulate<F>(
    kind: SchedulerKind,
    mode: BacklogMode,
    rates: &[RateMatrix],
    mut observe: F,
) -> Result<Vec<Vec<f64>>, SchedulerError>
where
    F: FnMut(usize, &Allocation),
{
    let users = rates.first().map_or(0, |r| r.nrows());
    let mut sched = Scheduler::new(kind, mode, users)?;
    let backlog = vec![true; users];
    let mut out = Vec::with_capacity(rates.len());
    for (n, r) in rates.iter().enumerate() {
        let (alloc, t) = sched.step(r, &backlog)?;
        observe(n, &alloc);
        out.push(t);
    }
    Ok(out)
}

/// Metrics of one scheduler on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sweep_value: f64,
    pub scheduler: SchedulerSpec,
    pub replication: usize,
    pub system_throughput: f64,
    pub jain_index: f64,
    pub user_throughputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sweep_value: f64,
    pub scheduler: Option<SchedulerSpec>,
    pub replication: usize,
    pub message: String,
}

/// Replication summary of one scheduler at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep_value: f64,
    pub scheduler: SchedulerSpec,
    pub system_throughput: Summary,
    pub jain_index: Summary,
    pub user_throughputs: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub schedulers: Vec<SchedulerSpec>,
    pub replications: usize,
    /// Ordered by sweep point, scheduler, replication.
    pub runs: Vec<RunRecord>,
    pub failures: Vec<Failure>,
}

impl ExperimentResult {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn runs_for(&self, sweep_value: f64, scheduler: SchedulerSpec) -> impl Iterator<Item = &RunRecord> {
        self.runs
            .iter()
            .filter(move |r| r.sweep_value == sweep_value && r.scheduler == scheduler)
    }

    /// Mean and 95% half-width over replications; `None` with fewer than
    /// two successful replications.
    pub fn summary(&self, sweep_value: f64, scheduler: SchedulerSpec) -> Option<AggregateRow> {
        let runs: Vec<&RunRecord> = self.runs_for(sweep_value, scheduler).collect();
        let sys: Vec<f64> = runs.iter().map(|r| r.system_throughput).collect();
        let jain: Vec<f64> = runs.iter().map(|r| r.jain_index).collect();
        let users = runs.first()?.user_throughputs.len();
        let per_user = (0..users)
            .map(|i| aggregate(&runs.iter().map(|r| r.user_throughputs[i]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()
            .ok()?;
        Some(AggregateRow {
            sweep_value,
            scheduler,
            system_throughput: aggregate(&sys).ok()?,
            jain_index: aggregate(&jain).ok()?,
            user_throughputs: per_user,
        })
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut out = Vec::new();
        for &v in &self.sweep_values {
            for &s in &self.schedulers {
                out.extend(self.summary(v, s));
            }
        }
        out
    }
}

struct PointOutcome {
    point: usize,
    rep: usize,
    runs: Vec<RunRecord>,
    failures: Vec<Failure>,
}

/// Runs every scheduler on every (sweep point, replication) pair. Work
/// items run in parallel; all schedulers at one pair share a single trace.
///
/// Errors inside a work item do not abort the experiment; they are returned
/// as [`Failure`]s next to the successful runs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let policy = if cfg.schedulers.contains(&SchedulerSpec::PfInfinite) {
        let p = cfg.infinite_window_policy()?;
        info!("infinite-window policy: {:?}", p.expected_throughputs);
        Some(Arc::new(p))
    } else {
        None
    };
    let items: Vec<(usize, usize)> = (0..cfg.sweep.values.len())
        .flat_map(|p| (0..cfg.replications).map(move |r| (p, r)))
        .collect();
    let mut outcomes: Vec<PointOutcome> = items
        .par_iter()
        .map(|&(point, rep)| run_point(cfg, point, rep, policy.as_ref()))
        .collect();
    outcomes.sort_by_key(|o| (o.point, o.rep));

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in &mut outcomes {
        failures.append(&mut o.failures);
    }
    // Reorder to (point, scheduler, replication).
    for point in 0..cfg.sweep.values.len() {
        for &spec in &cfg.schedulers {
            for o in outcomes.iter().filter(|o| o.point == point) {
                runs.extend(o.runs.iter().filter(|r| r.scheduler == spec).cloned());
            }
        }
    }
    for f in &failures {
        warn!(
            "{} at {} = {}, replication {}: {}",
            f.scheduler.map_or("trace", |s| s.label()),
            cfg.sweep.axis.label(),
            f.sweep_value,
            f.replication,
            f.message
        );
    }
    Ok(ExperimentResult {
        axis: cfg.sweep.axis,
        sweep_values: cfg.sweep.values.clone(),
        schedulers: cfg.schedulers.clone(),
        replications: cfg.replications,
        runs,
        failures,
    })
}

fn run_point(cfg: &ExperimentConfig, point: usize, rep: usize, policy: Option<&Arc<EnsemblePolicy>>) -> PointOutcome {
    let sweep_value = cfg.sweep.values[point];
    let mut out = PointOutcome {
        point,
        rep,
        runs: Vec::new(),
        failures: Vec::new(),
    };
    let trace = match generate_trace(&cfg.point_channel(point, rep)) {
        Ok(t) => t,
        Err(e) => {
            out.failures.push(Failure {
                sweep_value,
                scheduler: None,
                replication: rep,
                message: e.to_string(),
            });
            return out;
        }
    };
    let window = cfg.point_window(point);
    for &spec in &cfg.schedulers {
        let kind = spec.resolve(window, policy);
        let result = simulate(kind, cfg.backlog_mode, &trace.rates, |_, _| {})
            .map_err(HarnessError::from)
            .and_then(|slots| {
                let series = ThroughputSeries::new(slots, window)?;
                Ok(RunRecord {
                    sweep_value,
                    scheduler: spec,
                    replication: rep,
                    system_throughput: system_throughput(&series)?,
                    jain_index: jain_index(&series, cfg.skip_warmup)?,
                    user_throughputs: series.user_means(),
                })
            });
        match result {
            Ok(r) => out.runs.push(r),
            Err(e) => out.failures.push(Failure {
                sweep_value,
                scheduler: Some(spec),
                replication: rep,
                message: e.to_string(),
            }),
        }
    }
    out
}

/// Writes per-replication rows, then `mean` and `ci95` rows for every
/// (sweep point, scheduler) with at least two successful replications.
/// Failed runs appear as rows with `FAILED` metrics and the error message in
/// the last column.
pub fn emit_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let axis = result.axis.label();
    let num = |x: f64| significant(x, CSV_DIGITS);
    let joined = |xs: &mut dyn Iterator<Item = f64>| xs.map(num).collect::<Vec<_>>().join(";");
    for &v in &result.sweep_values {
        let value = num(v);
        for f in result.failures.iter().filter(|f| f.sweep_value == v && f.scheduler.is_none()) {
            let rep = f.replication.to_string();
            w.write_record([axis, &value, "trace", &rep, FAILED, FAILED, &f.message])?;
        }
        for &s in &result.schedulers {
            for rep in 0..result.replications {
                if let Some(r) = result.runs_for(v, s).find(|r| r.replication == rep) {
                    let users = joined(&mut r.user_throughputs.iter().copied());
                    w.write_record([
                        axis,
                        &value,
                        s.label(),
                        &rep.to_string(),
                        &num(r.system_throughput),
                        &num(r.jain_index),
                        &users,
                    ])?;
                } else if let Some(f) = result
                    .failures
                    .iter()
                    .find(|f| f.sweep_value == v && f.scheduler == Some(s) && f.replication == rep)
                {
                    w.write_record([axis, &value, s.label(), &rep.to_string(), FAILED, FAILED, &f.message])?;
                }
            }
            if let Some(agg) = result.summary(v, s) {
                let users = joined(&mut agg.user_throughputs.iter().map(|u| u.mean));
                w.write_record([
                    axis,
                    &value,
                    s.label(),
                    "mean",
                    &num(agg.system_throughput.mean),
                    &num(agg.jain_index.mean),
                    &users,
                ])?;
                let users = joined(&mut agg.user_throughputs.iter().map(|u| u.half_width));
                w.write_record([
                    axis,
                    &value,
                    s.label(),
                    "ci95",
                    &num(agg.system_throughput.half_width),
                    &num(agg.jain_index.half_width),
                    &users,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(result: &ExperimentResult, path: &Path) -> Result<(), HarnessError> {
    let mut file = BufWriter::new(File::create(path)?);
    emit_csv(result, &mut file)?;
    file.flush()?;
    Ok(())
}
