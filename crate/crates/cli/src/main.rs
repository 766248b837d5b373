use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use mcpf_core::channel::{generate_trace, write_rates_csv};
use mcpf_core::ensemble::{
    solve_ensemble_discrete, solve_fixed_point, PolicyFile, DEFAULT_DAMPING, DEFAULT_FIXED_POINT_TOL,
};
use mcpf_core::harness::{emit_csv, read_structured, run_experiment};
use mcpf_core::{ChannelConfig, ExperimentConfig, RateDistribution, Scale};

#[derive(Parser)]
#[command(name = "mcpf", version, about = "Multi-channel PF scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated parameter sweep and write CSV.
    Run(RunArgs),
    /// Solve the infinite-window policy and print it as JSON.
    FixedPoint(PolicyArgs),
    #[command(subcommand)]
    Policy(PolicyCommand),
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (.toml or .json). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; replication r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Output CSV; stdout when neither this nor `output_path` is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the first W - 1 slots out of the Jain index.
    #[arg(long)]
    skip_warmup: bool,
    /// Replication count and duration preset, applied before --replications.
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Mean SNR per user in dB (Rayleigh fading), comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "distributions")]
    snr_db: Vec<f64>,
    /// File with a `users` list of rate distributions. All-discrete lists
    /// are solved exactly and carry an allocation table.
    #[arg(long)]
    distributions: Option<PathBuf>,
    /// Number of channels.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = DEFAULT_FIXED_POINT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    damping: f64,
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Solve a policy and write it to a JSON file.
    Export {
        #[command(flatten)]
        args: PolicyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a policy file and print it.
    Import { path: PathBuf },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Generate a channel trace and write its rates as CSV.
    Export(TraceArgs),
}

#[derive(Args)]
struct TraceArgs {
    /// Channel config (.toml or .json); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seconds of simulated time.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    doppler_hz: Option<f64>,
    /// Seconds.
    #[arg(long)]
    rms_delay_spread: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    users: Vec<RateDistribution>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::FixedPoint(args) => {
            let file = solve_policy(&args)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            file.write_json(&mut lock)?;
            writeln!(lock)?;
            Ok(())
        }
        Command::Policy(PolicyCommand::Export { args, out }) => {
            let file = solve_policy(&args)?;
            let mut w = create(&out)?;
            file.write_json(&mut w)?;
            writeln!(w)?;
            w.flush()?;
            info!("policy written to {}", out.display());
            Ok(())
        }
        Command::Policy(PolicyCommand::Import { path }) => {
            let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let file = PolicyFile::read_json(io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            file.write_json(&mut lock)?;
            writeln!(lock)?;
            Ok(())
        }
        Command::Trace(TraceCommand::Export(args)) => trace_export(args),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(scale) = args.scale {
        Scale::from(scale).apply(&mut cfg);
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if args.skip_warmup {
        cfg.skip_warmup = true;
    }
    if let Some(out) = args.out {
        cfg.output_path = Some(out);
    }
    cfg.validate()?;
    info!(
        "{} sweep over {:?}, {} replications of {} slots",
        cfg.sweep.axis.label(),
        cfg.sweep.values,
        cfg.replications,
        cfg.channel.num_slots()
    );
    let result = run_experiment(&cfg)?;
    match &cfg.output_path {
        Some(path) => {
            let mut w = create(path)?;
            emit_csv(&result, &mut w)?;
            w.flush()?;
        }
        None => emit_csv(&result, io::stdout().lock())?,
    }
    if !result.is_complete() {
        bail!("{} run(s) failed; see FAILED rows in the output", result.failures.len());
    }
    Ok(())
}

fn solve_policy(args: &PolicyArgs) -> Result<PolicyFile> {
    let dists = match &args.distributions {
        Some(path) => read_structured::<DistributionFile>(path)?.users,
        None if args.snr_db.is_empty() => bail!("give --snr-db or --distributions"),
        None => args
            .snr_db
            .iter()
            .map(|&db| RateDistribution::rayleigh_db(db))
            .collect::<Result<_, _>>()?,
    };
    if !dists.is_empty() && dists.iter().all(RateDistribution::is_discrete) {
        let sol = solve_ensemble_discrete(&dists, args.channels, args.tol)?;
        return Ok(PolicyFile {
            policy: sol.policy,
            allocation_table: Some(sol.table.entries),
        });
    }
    let policy = solve_fixed_point(&dists, args.channels, args.tol, args.damping)?;
    Ok(PolicyFile {
        policy,
        allocation_table: None,
    })
}

fn trace_export(args: TraceArgs) -> Result<()> {
    let mut cfg: ChannelConfig = match &args.config {
        Some(p) => read_structured(p)?,
        None => ChannelConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    if let Some(f) = args.doppler_hz {
        cfg.doppler_hz = f;
    }
    if let Some(r) = args.rms_delay_spread {
        cfg.rms_delay_spread = r;
    }
    let trace = generate_trace(&cfg)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_rates_csv(&trace.rates, &mut w)?;
            w.flush()?;
        }
        None => write_rates_csv(&trace.rates, io::stdout().lock())?,
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}
