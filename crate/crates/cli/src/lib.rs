//! `permfl` command line: configuration, runs, sweeps, tuning, scheduling
//! scenarios and CKKS sizing, with CSV and DOT output.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use permfl_core::ForwardMode;

use commands::*;
use config::{parse_precision, ExperimentConfig, ScenarioConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "permfl",
    version,
    about = "Secure compressed federated gradient descent experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One training run, in memory or as a hub/client process.
    Run(RunArgs),
    /// Runs each configured variant for every d in `sweep.dims`.
    SweepDim(ExperimentArgs),
    /// Grid search of the step size over `sweep.gammas` and `sweep.seeds`.
    Tune(ExperimentArgs),
    /// Task-graph schedules (naive and refined) for scenario files.
    Schedule(ScheduleArgs),
    /// CKKS key and ciphertext sizes next to AES envelope sizes.
    CkksModel(CkksArgs),
    /// Writes a fresh 128-bit key as hex.
    Keygen(KeygenArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment file; omitted means the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides both the problem seed and the compressor seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// fp16, fp32 or fp64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Forward {
    Eager,
    Barrier,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Overrides `run.algorithm`.
    #[arg(long)]
    pub algorithm: Option<String>,
    /// Write every iterate to iterates.csv.
    #[arg(long)]
    pub dump_iterates: bool,
    /// Act as the hub on this address (for example 127.0.0.1:7000).
    #[arg(long, conflicts_with = "connect")]
    pub listen: Option<SocketAddr>,
    /// Act as a client of the hub at this address.
    #[arg(long, requires_all = ["client_id", "key_file"])]
    pub connect: Option<SocketAddr>,
    #[arg(long)]
    pub client_id: Option<u32>,
    /// Shared key written by `permfl keygen`.
    #[arg(long)]
    pub key_file: Option<PathBuf>,
    /// Hub forwarding policy.
    #[arg(long, value_enum, default_value = "eager")]
    pub forward: Forward,
    /// Seconds a client keeps retrying to reach the hub.
    #[arg(long, default_value_t = 30)]
    pub connect_timeout: u64,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Scenario files; omitted means the GD and PermK straggler scenarios.
    #[arg(long = "scenario", alias = "config")]
    pub scenarios: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CkksArgs {
    /// Comma separated vector lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<u64>,
    /// Use the 438-bit modulus instead of the 210-bit one.
    #[arg(long)]
    pub strict: bool,
    /// Precision of the AES envelope column.
    #[arg(long, default_value = "fp32")]
    pub precision: String,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub key_file: PathBuf,
    /// Replace an existing file.
    #[arg(long)]
    pub force: bool,
}

fn load_experiment(a: &ExperimentArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.problem.seed = seed;
        cfg.run.compressor_seed = seed;
    }
    if let Some(p) = &a.precision {
        let p = parse_precision(p)?;
        cfg.run.precision = p.to_string();
        if !cfg.sweep.precisions.is_empty() {
            cfg.sweep.precisions = vec![p.to_string()];
        }
    }
    if let Some(dir) = &a.out_dir {
        cfg.output.dir = dir.clone();
    }
    let dir = cfg.output.dir.clone();
    Ok((cfg, dir))
}

fn run_command(args: RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut cfg, dir) = load_experiment(&args.common)?;
    if let Some(a) = &args.algorithm {
        cfg.run.algorithm = a.clone();
    }
    if args.dump_iterates {
        cfg.output.dump_iterates = true;
    }
    let key = args.key_file.as_deref().map(read_key_file).transpose()?;
    if let Some(addr) = args.listen {
        let listener = TcpListener::bind(addr).map_err(|e| CliError::Other(e.into()))?;
        let bound = listener.local_addr()?;
        writeln!(out, "listening on {bound}")?;
        out.flush()?;
        let mode = match args.forward {
            Forward::Eager => ForwardMode::Eager,
            Forward::Barrier => ForwardMode::Barrier,
        };
        let c = cmd_hub(&cfg, listener, mode)?;
        writeln!(
            out,
            "hub done: {} frames in ({} B), {} frames out ({} B)",
            c.frames_in, c.bytes_in, c.frames_out, c.bytes_out
        )?;
        return Ok(());
    }
    if let Some(addr) = args.connect {
        let (Some(id), Some(key)) = (args.client_id, key) else {
            return Err(CliError::Config(
                "--connect needs --client-id and --key-file".into(),
            ));
        };
        let timeout = Duration::from_secs(args.connect_timeout);
        let x = cmd_client(&cfg, addr, id, &key, &dir, timeout)?;
        writeln!(out, "client {id} done: ||x||^2 = {:e}", x.norm_sq())?;
        return Ok(());
    }
    let s = cmd_run(&cfg, &dir, key)?;
    writeln!(out, "{}\n{}", RunSummary::HEADER, s.csv_row())?;
    Ok(())
}

/// Runs a parsed command, printing progress to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => run_command(a, out),
        Command::SweepDim(a) => {
            let (cfg, dir) = load_experiment(&a)?;
            let rows = cmd_sweep_dim(&cfg, &dir)?;
            writeln!(
                out,
                "{} sweep points written to {}",
                rows.len(),
                dir.join("sweep_dim.csv").display()
            )?;
            Ok(())
        }
        Command::Tune(a) => {
            let (cfg, dir) = load_experiment(&a)?;
            let report = cmd_tune(&cfg, &dir)?;
            for e in &report.entries {
                let verdict = if e.any_diverged() {
                    "diverged"
                } else {
                    "converged"
                };
                writeln!(
                    out,
                    "gamma = {}: {verdict}, worst final = {:e}",
                    e.gamma,
                    e.worst_final()
                )?;
            }
            writeln!(out, "best gamma = {}", report.best_gamma)?;
            Ok(())
        }
        Command::Schedule(a) => {
            let scenarios = if a.scenarios.is_empty() {
                let gd = ScenarioConfig::default();
                let permk = ScenarioConfig {
                    name: "permk".into(),
                    algorithm: "permk".into(),
                    ..ScenarioConfig::default()
                };
                vec![gd, permk]
            } else {
                a.scenarios
                    .iter()
                    .map(|p| ScenarioConfig::load(p))
                    .collect::<Result<_, _>>()?
            };
            for s in cmd_schedule(&scenarios, &a.out_dir)? {
                writeln!(
                    out,
                    "{}: naive {:.4} s, refined {:.4} s, speedup x{:.3} after {} iterations{}",
                    s.name,
                    s.naive_makespan,
                    s.refined_makespan,
                    s.speedup,
                    s.iterations,
                    if s.converged {
                        ""
                    } else {
                        " (iteration cap reached)"
                    }
                )?;
            }
            Ok(())
        }
        Command::CkksModel(a) => {
            let p = parse_precision(&a.precision)?;
            let rows = cmd_ckks_model(&a.dims, a.strict, p, &a.out_dir)?;
            writeln!(
                out,
                "{} rows written to {}",
                rows.len(),
                a.out_dir.join("ckks_model.csv").display()
            )?;
            Ok(())
        }
        Command::Keygen(a) => {
            cmd_keygen(&a.key_file, a.force)?;
            writeln!(out, "key written to {}", a.key_file.display())?;
            Ok(())
        }
    }
}
