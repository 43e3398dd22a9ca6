//! Experiment and scenario files.
//!
//! Both are TOML. Every key has a default, so an empty file is the desk
//! preset: d=100, n=10, five rows per client, L=10 with nonzero Hessian
//! eigenvalues spread over [1, 10], interpolation, FP64.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use permfl_core::numkit::Spectrum;
use permfl_core::sched::{DEFAULT_EPS_REL, DEFAULT_MAX_ITERS};
use permfl_core::{
    Algorithm, Precision, ProblemSpec, ResourceModel, RunConfig, Scenario, SchedAlgorithm,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub run: RunSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSection::default(),
            run: RunSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub seed: u64,
    pub d: usize,
    pub n: usize,
    pub rows_per_client: usize,
    pub l_smooth: f64,
    pub interpolation: bool,
    /// "scaled-uniform" or "exact".
    pub spectrum: String,
    /// Smallest nonzero Hessian eigenvalue for the exact spectrum;
    /// defaults to `l_smooth / 10`.
    pub min_eigen: Option<f64>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            seed: 1,
            d: 100,
            n: 10,
            rows_per_client: 5,
            l_smooth: 10.0,
            interpolation: true,
            spectrum: "exact".into(),
            min_eigen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub algorithm: String,
    pub gamma: f64,
    pub rounds: u64,
    pub precision: String,
    pub randk_k: usize,
    pub compressor_seed: u64,
    pub fedavg_local_steps: usize,
    /// Defaults to `gamma`.
    pub fedavg_local_gamma: Option<f64>,
    pub record_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            algorithm: "gd".into(),
            gamma: 0.1,
            rounds: 100,
            precision: "fp64".into(),
            randk_k: 1,
            compressor_seed: 0,
            fedavg_local_steps: 1,
            fedavg_local_gamma: None,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub dims: Vec<usize>,
    pub algorithms: Vec<String>,
    pub precisions: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            gammas: vec![0.05, 0.02, 0.01, 0.007],
            seeds: vec![1, 2, 3, 4, 5],
            dims: vec![1_000, 10_000, 100_000],
            algorithms: vec!["gd_aes".into(), "dcgd_permk_aes".into()],
            precisions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub dump_iterates: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            dump_iterates: false,
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn parse_algorithm(s: &str) -> Result<Algorithm, CliError> {
    s.parse().map_err(bad)
}

pub fn parse_precision(s: &str) -> Result<Precision, CliError> {
    s.parse().map_err(bad)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec, CliError> {
        let p = &self.problem;
        if !(p.l_smooth.is_finite() && p.l_smooth > 0.0) {
            return Err(bad("problem.l_smooth must be positive"));
        }
        let spec = ProblemSpec::new(p.seed, p.d, p.n, p.rows_per_client, p.l_smooth)
            .interpolation(p.interpolation);
        match p.spectrum.as_str() {
            "scaled-uniform" => Ok(spec.spectrum(Spectrum::ScaledUniform)),
            "exact" => {
                let min_eigen = p.min_eigen.unwrap_or(p.l_smooth / 10.0);
                if !(min_eigen > 0.0 && min_eigen <= p.l_smooth) {
                    return Err(bad("problem.min_eigen must lie in (0, l_smooth]"));
                }
                Ok(spec.spectrum(Spectrum::Exact { min_eigen }))
            }
            other => Err(bad(format!(
                "problem.spectrum must be \"scaled-uniform\" or \"exact\", got \"{other}\""
            ))),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let r = &self.run;
        let mut cfg = RunConfig::new(parse_algorithm(&r.algorithm)?, r.gamma, r.rounds);
        cfg.precision = parse_precision(&r.precision)?;
        cfg.randk_k = r.randk_k;
        cfg.compressor_seed = r.compressor_seed;
        cfg.fedavg_local_steps = r.fedavg_local_steps;
        cfg.fedavg_local_gamma = r.fedavg_local_gamma.unwrap_or(r.gamma);
        cfg.record_wall_time = r.record_wall_time;
        cfg.record_iterates = self.output.dump_iterates;
        cfg.validate(self.problem.d, self.problem.n)
            .map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.problem_spec()?;
        self.run_config()?;
        for a in &self.sweep.algorithms {
            parse_algorithm(a)?;
        }
        for p in &self.sweep.precisions {
            parse_precision(p)?;
        }
        Ok(())
    }
}

/// Scheduling scenario. Defaults reproduce the four-client straggler setup
/// with the reference resource model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// "gd" or "permk".
    pub algorithm: String,
    pub d: u64,
    pub rows: Vec<u64>,
    pub rounds: u32,
    pub max_iters: usize,
    pub eps_rel: f64,
    pub model: ModelSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let s = Scenario::straggler(SchedAlgorithm::Gd);
        Self {
            name: "gd".into(),
            algorithm: "gd".into(),
            d: s.d,
            rows: s.rows,
            rounds: s.rounds,
            max_iters: DEFAULT_MAX_ITERS,
            eps_rel: DEFAULT_EPS_REL,
            model: ModelSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub cores: u32,
    pub frequency_hz: f64,
    pub ops_per_cycle: f64,
    pub add_cost: f64,
    pub mult_cost: f64,
    pub memaccess_cost: f64,
    pub aes_cycles_per_byte: f64,
    pub bandwidth_bps: f64,
    pub rtt_s: f64,
    pub bpp: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ResourceModel::reference();
        Self {
            cores: m.cores,
            frequency_hz: m.frequency_hz,
            ops_per_cycle: m.ops_per_cycle,
            add_cost: m.add_cost,
            mult_cost: m.mult_cost,
            memaccess_cost: m.memaccess_cost,
            aes_cycles_per_byte: m.aes_cycles_per_byte,
            bandwidth_bps: m.bandwidth_bps,
            rtt_s: m.rtt_s,
            bpp: m.bpp,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario always serializes")
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let algorithm = match self.algorithm.to_ascii_lowercase().as_str() {
            "gd" => SchedAlgorithm::Gd,
            "permk" | "dcgd_permk_aes" => SchedAlgorithm::DcgdPermkAes,
            other => {
                return Err(bad(format!(
                    "scenario algorithm must be gd or permk, got {other}"
                )))
            }
        };
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(bad("scenario name must be a nonempty file-name-safe word"));
        }
        if self.d == 0 || self.rows.is_empty() || self.rows.contains(&0) || self.rounds == 0 {
            return Err(bad(
                "scenario needs d, rounds and every client's rows positive",
            ));
        }
        if self.max_iters == 0 || !(self.eps_rel > 0.0) {
            return Err(bad("scenario max_iters and eps_rel must be positive"));
        }
        let m = &self.model;
        let model = ResourceModel {
            cores: m.cores,
            frequency_hz: m.frequency_hz,
            ops_per_cycle: m.ops_per_cycle,
            add_cost: m.add_cost,
            mult_cost: m.mult_cost,
            memaccess_cost: m.memaccess_cost,
            aes_cycles_per_byte: m.aes_cycles_per_byte,
            bandwidth_bps: m.bandwidth_bps,
            rtt_s: m.rtt_s,
            bpp: m.bpp,
        };
        model.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Scenario {
            algorithm,
            d: self.d,
            rows: self.rows.clone(),
            rounds: self.rounds,
            model,
            max_iters: self.max_iters,
            eps_rel: self.eps_rel,
        })
    }
}
