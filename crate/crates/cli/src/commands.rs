use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use rayon::prelude::*;

use permfl_core::engine::{
    run_remote_client, write_iterate_row, write_metrics_csv, Protocol, RunOutput,
};
use permfl_core::hecost::{self, aes128_equivalent_params_strict, cost_row, write_cost_csv};
use permfl_core::sched::{export_dot, run_scenario, write_makespans_csv};
use permfl_core::secenv::{FRAME_OVERHEAD, KEY_LEN};
use permfl_core::transport::{serve_tcp, HubCounters, TcpLink};
use permfl_core::{
    aes128_equivalent_params, keygen, Algorithm, ClientNode, DenseVector, Engine, ForwardMode,
    Precision, SecretKey,
};

use crate::config::{parse_algorithm, parse_precision, ExperimentConfig, ScenarioConfig};
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ITERATES_FILE: &str = "iterates.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::from)
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn iterates_file_for_client(client: u32) -> String {
    format!("iterates-client{client}.csv")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub rounds_run: u64,
    pub final_fx: f64,
    pub final_grad_norm_sq: f64,
    pub up_bytes_total: u64,
    pub down_bytes_total: u64,
    pub diverged: bool,
}

impl RunSummary {
    fn of(algorithm: Algorithm, out: &RunOutput) -> Self {
        let last = out.metrics.last();
        Self {
            algorithm,
            rounds_run: out.metrics.len() as u64,
            final_fx: last.map_or(out.initial_fx, |m| m.fx),
            final_grad_norm_sq: out.final_grad_norm_sq(),
            up_bytes_total: out.up_bytes_total(),
            down_bytes_total: out.down_bytes_total(),
            diverged: out.diverged,
        }
    }

    pub const HEADER: &'static str =
        "algorithm,rounds_run,final_fx,final_grad_norm_sq,up_bytes_total,down_bytes_total,diverged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{},{}",
            self.algorithm,
            self.rounds_run,
            self.final_fx,
            self.final_grad_norm_sq,
            self.up_bytes_total,
            self.down_bytes_total,
            self.diverged
        )
    }
}

/// One in-memory run. Writes the emitted config, per-round metrics, a
/// summary and optionally every iterate into `out_dir`.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    key: Option<SecretKey>,
) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let run_cfg = cfg.run_config()?;
    let problem = cfg
        .problem_spec()?
        .generate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml())?;

    let algorithm = run_cfg.algorithm;
    let engine = match key {
        Some(k) if algorithm.encrypted() => Engine::with_key(&problem, run_cfg, Some(k))?,
        _ => Engine::new(&problem, run_cfg)?,
    };
    let out = engine.run()?;

    let mut w = create_file(&out_dir.join(METRICS_FILE))?;
    write_metrics_csv(&mut w, &out.metrics)?;
    w.flush()?;
    if cfg.output.dump_iterates {
        let mut w = create_file(&out_dir.join(ITERATES_FILE))?;
        out.write_iterates_csv(&mut w)?;
        w.flush()?;
    }
    let summary = RunSummary::of(algorithm, &out);
    fs::write(
        out_dir.join(SUMMARY_FILE),
        format!("{}\n{}\n", RunSummary::HEADER, summary.csv_row()),
    )?;
    if summary.diverged {
        return Err(CliError::Diverged(format!(
            "{algorithm} at gamma = {} after {} rounds",
            cfg.run.gamma, summary.rounds_run
        )));
    }
    Ok(summary)
}

fn encrypted_only(cfg: &ExperimentConfig) -> Result<Algorithm, CliError> {
    let alg = parse_algorithm(&cfg.run.algorithm)?;
    if !alg.encrypted() {
        return Err(CliError::Config(format!(
            "multi-process mode runs the encrypted variants only, not {alg}"
        )));
    }
    Ok(alg)
}

/// Hub process: accepts `n` clients on `listener` and forwards envelopes
/// for the configured number of rounds. The hub never holds the key.
pub fn cmd_hub(
    cfg: &ExperimentConfig,
    listener: TcpListener,
    mode: ForwardMode,
) -> Result<HubCounters, CliError> {
    cfg.validate()?;
    encrypted_only(cfg)?;
    serve_tcp(listener, cfg.problem.n, mode, cfg.run.rounds)
        .context("hub failed")
        .map_err(CliError::from)
}

/// Client process: derives the problem and its share from the config,
/// talks to the hub at `addr`, and streams its iterates to
/// `iterates-client<id>.csv` in `out_dir`.
pub fn cmd_client(
    cfg: &ExperimentConfig,
    addr: SocketAddr,
    client: u32,
    key: &SecretKey,
    out_dir: &Path,
    connect_timeout: Duration,
) -> Result<DenseVector, CliError> {
    cfg.validate()?;
    encrypted_only(cfg)?;
    if client as usize >= cfg.problem.n {
        return Err(CliError::Config(format!(
            "client id {client} out of range for n = {}",
            cfg.problem.n
        )));
    }
    let problem = cfg
        .problem_spec()?
        .generate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let proto = Protocol::new(&problem, cfg.run_config()?)?;
    create_dir(out_dir)?;
    if client == 0 {
        fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    }

    let deadline = Instant::now() + connect_timeout;
    let mut link = loop {
        match TcpLink::connect(addr) {
            Ok(l) => break l,
            Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(anyhow::anyhow!("connecting to {addr}: {e}").into()),
        }
    };
    let mut w = create_file(&out_dir.join(iterates_file_for_client(client)))?;
    let node = ClientNode::new(client, DenseVector::zeros(problem.d()));
    let node = run_remote_client(&proto, node, key, &mut link, |k, x| {
        write_iterate_row(&mut w, k, x)
    })?;
    w.flush()?;
    Ok(node.x().clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub algorithm: Algorithm,
    pub precision: Precision,
    pub summary: RunSummary,
    pub up_bytes_per_client: u64,
    pub down_bytes_per_client: u64,
    pub headerless_up_bytes_per_client: u64,
    /// Envelope header plus nonce and tag over the payload bytes.
    pub aes_overhead_fraction: f64,
    pub ckks: hecost::CkksTraffic,
}

pub const SWEEP_HEADER: &str =
    "d,algorithm,precision,rounds_run,final_fx,final_grad_norm_sq,diverged,\
up_bytes_per_client,down_bytes_per_client,headerless_up_bytes_per_client,aes_overhead_fraction,\
ckks_up_bytes_per_client,ckks_down_bytes_per_client,ckks_key_bytes";

impl SweepRow {
    fn csv_row(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{:e},{:e},{},{},{},{},{:e},{},{},{}",
            self.d,
            self.algorithm,
            self.precision,
            s.rounds_run,
            s.final_fx,
            s.final_grad_norm_sq,
            s.diverged,
            self.up_bytes_per_client,
            self.down_bytes_per_client,
            self.headerless_up_bytes_per_client,
            self.aes_overhead_fraction,
            self.ckks.up_per_client,
            self.ckks.down_per_client,
            self.ckks.one_time_key
        )
    }
}

pub fn sweep_file(d: usize, alg: Algorithm, p: Precision) -> String {
    format!("d{d}_{alg}_{p}.csv")
}

/// Runs every (d, algorithm, precision) point with shared seeds. Points run
/// in parallel and each writes its own metrics file under `out_dir/sweep`.
pub fn cmd_sweep_dim(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    if cfg.sweep.dims.is_empty() || cfg.sweep.algorithms.is_empty() {
        return Err(CliError::Config(
            "sweep.dims and sweep.algorithms must be nonempty".into(),
        ));
    }
    let precisions = if cfg.sweep.precisions.is_empty() {
        vec![parse_precision(&cfg.run.precision)?]
    } else {
        cfg.sweep
            .precisions
            .iter()
            .map(|p| parse_precision(p))
            .collect::<Result<_, _>>()?
    };
    let mut points = Vec::new();
    for &d in &cfg.sweep.dims {
        for a in &cfg.sweep.algorithms {
            for &p in &precisions {
                let mut c = cfg.clone();
                c.problem.d = d;
                c.run.algorithm = parse_algorithm(a)?.name().into();
                c.run.precision = p.to_string();
                c.output.dump_iterates = false;
                c.validate()?;
                points.push(c);
            }
        }
    }
    let sweep_dir = out_dir.join("sweep");
    create_dir(&sweep_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    let ckks = aes128_equivalent_params();

    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|c| -> Result<SweepRow, CliError> {
            let run_cfg = c.run_config()?;
            let problem = c
                .problem_spec()?
                .generate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let out = Engine::new(&problem, run_cfg.clone())?.run()?;
            let mut w = create_file(&sweep_dir.join(sweep_file(
                c.problem.d,
                run_cfg.algorithm,
                run_cfg.precision,
            )))?;
            write_metrics_csv(&mut w, &out.metrics)?;
            w.flush()?;
            let first = out.metrics.first();
            let up = first.map_or(0, |m| m.up_bytes_per_client);
            let payload = up.saturating_sub(FRAME_OVERHEAD as u64);
            let aes_overhead_fraction = if run_cfg.algorithm.encrypted() && payload > 0 {
                FRAME_OVERHEAD as f64 / payload as f64
            } else {
                0.0
            };
            let d = c.problem.d as u64;
            Ok(SweepRow {
                d: c.problem.d,
                algorithm: run_cfg.algorithm,
                precision: run_cfg.precision,
                summary: RunSummary::of(run_cfg.algorithm, &out),
                up_bytes_per_client: up,
                down_bytes_per_client: first.map_or(0, |m| m.down_bytes_per_client),
                headerless_up_bytes_per_client: first.map_or(0, |m| m.headerless_up_bytes_per_client),
                aes_overhead_fraction,
                ckks: hecost::ckks_traffic_per_round(d, c.problem.n as u64, &ckks)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut w = create_file(&out_dir.join("sweep_dim.csv"))?;
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in &rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    if let Some(r) = rows.iter().find(|r| r.summary.diverged) {
        return Err(CliError::Diverged(format!(
            "{} at d = {}",
            r.algorithm, r.d
        )));
    }
    Ok(rows)
}

/// Grid search over `sweep.gammas` and `sweep.seeds`. Writes one row per
/// (gamma, seed) to `tune.csv` and returns the chosen step size.
pub fn cmd_tune(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<permfl_core::engine::TuneReport, CliError> {
    cfg.validate()?;
    let spec = cfg.problem_spec()?;
    let base = cfg.run_config()?;
    create_dir(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    let report =
        permfl_core::engine::tune_step_size(&spec, &base, &cfg.sweep.gammas, &cfg.sweep.seeds)?;
    let mut w = create_file(&out_dir.join("tune.csv"))?;
    writeln!(w, "gamma,seed,final_grad_norm_sq,diverged,rounds_run")?;
    for e in &report.entries {
        for o in &e.outcomes {
            writeln!(
                w,
                "{},{},{:e},{},{}",
                e.gamma, o.seed, o.final_grad_norm_sq, o.diverged, o.rounds_run
            )?;
        }
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSummary {
    pub name: String,
    pub naive_makespan: f64,
    pub refined_makespan: f64,
    pub speedup: f64,
    pub iterations: usize,
    pub converged: bool,
    pub files: Vec<PathBuf>,
}

/// Builds, schedules and refines each scenario, writing
/// `<name>_naive.dot`, `<name>_refined.dot` and `<name>_makespans.csv`.
pub fn cmd_schedule(
    scenarios: &[ScenarioConfig],
    out_dir: &Path,
) -> Result<Vec<ScheduleSummary>, CliError> {
    let parsed = scenarios
        .iter()
        .map(|s| s.scenario())
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out_dir)?;
    let mut out = Vec::with_capacity(parsed.len());
    for (sc, s) in scenarios.iter().zip(&parsed) {
        let r = run_scenario(s).map_err(|e| CliError::Config(e.to_string()))?;
        let files = vec![
            out_dir.join(format!("{}_naive.dot", sc.name)),
            out_dir.join(format!("{}_refined.dot", sc.name)),
            out_dir.join(format!("{}_makespans.csv", sc.name)),
        ];
        fs::write(&files[0], export_dot(&r.graph, &r.naive))?;
        fs::write(&files[1], export_dot(&r.graph, &r.refined.schedule))?;
        let mut w = create_file(&files[2])?;
        write_makespans_csv(&mut w, &r.refined.makespans)?;
        w.flush()?;
        out.push(ScheduleSummary {
            name: sc.name.clone(),
            naive_makespan: r.naive.makespan,
            refined_makespan: r.refined.schedule.makespan,
            speedup: r.speedup(),
            iterations: r.refined.makespans.len() - 1,
            converged: r.refined.converged,
            files,
        });
    }
    Ok(out)
}

/// CKKS sizing table for each `d`, written to `ckks_model.csv`.
pub fn cmd_ckks_model(
    dims: &[u64],
    strict: bool,
    precision: Precision,
    out_dir: &Path,
) -> Result<Vec<hecost::CostRow>, CliError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(CliError::Config(
            "ckks-model needs a nonempty list of positive dimensions".into(),
        ));
    }
    let params = if strict {
        aes128_equivalent_params_strict()
    } else {
        aes128_equivalent_params()
    };
    let rows = dims
        .iter()
        .map(|&d| cost_row(d, &params, precision))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(out_dir)?;
    let mut w = create_file(&out_dir.join("ckks_model.csv"))?;
    write_cost_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(rows)
}

pub fn key_to_hex(key: &SecretKey) -> String {
    key.as_bytes().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn key_from_hex(text: &str) -> Result<SecretKey, CliError> {
    let t = text.trim();
    if t.len() != 2 * KEY_LEN || !t.is_ascii() {
        return Err(CliError::Config(format!(
            "key file must hold {} hex digits",
            2 * KEY_LEN
        )));
    }
    let mut bytes = [0u8; KEY_LEN];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&t[2 * i..2 * i + 2], 16)
            .map_err(|_| CliError::Config("key file is not hex".into()))?;
    }
    Ok(SecretKey::from_bytes(bytes))
}

pub fn read_key_file(path: &Path) -> Result<SecretKey, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read key file {}: {e}", path.display())))?;
    key_from_hex(&text)
}

/// Writes a fresh key as hex, readable by the owner only.
pub fn cmd_keygen(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} exists; pass --force to replace it",
            path.display()
        )));
    }
    let key = keygen().map_err(|e| CliError::Other(e.into()))?;
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts
        .open(path)
        .with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "{}", key_to_hex(&key))?;
    Ok(())
}
