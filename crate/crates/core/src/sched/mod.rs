//! Task-graph model of compute and communication, scheduled by longest
//! paths and refined for shared cores and links.

pub mod cpm;
pub mod dot;
pub mod graph;
pub mod model;
pub mod refine;

use std::io::{self, Write};

pub use cpm::{schedule_cpm, SchedError, Schedule};
pub use dot::export_dot;
pub use graph::{build_task_graph, SchedAlgorithm, Task, TaskGraph, TaskKind};
pub use model::{comm_delay, ResourceModel};
pub use refine::{refine_schedule, Refinement, DEFAULT_EPS_REL, DEFAULT_MAX_ITERS};

/// A workload to schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub algorithm: SchedAlgorithm,
    pub d: u64,
    /// Samples per client; its length is the client count.
    pub rows: Vec<u64>,
    pub rounds: u32,
    pub model: ResourceModel,
    pub max_iters: usize,
    pub eps_rel: f64,
}

impl Scenario {
    /// Four clients, one holding five times the data of the others,
    /// `d = 10^7`, four rounds on the reference hardware.
    pub fn straggler(algorithm: SchedAlgorithm) -> Self {
        Self {
            algorithm,
            d: 10_000_000,
            rows: vec![55_000, 11_000, 11_000, 11_000],
            rounds: 4,
            model: ResourceModel::reference(),
            max_iters: DEFAULT_MAX_ITERS,
            eps_rel: DEFAULT_EPS_REL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub graph: TaskGraph,
    pub naive: Schedule,
    pub refined: Refinement,
}

impl ScenarioResult {
    /// Naive makespan over refined makespan.
    pub fn speedup(&self) -> f64 {
        self.naive.makespan / self.refined.schedule.makespan
    }
}

pub fn run_scenario(s: &Scenario) -> Result<ScenarioResult, SchedError> {
    s.model
        .validate()
        .map_err(|_| SchedError::Params("resource model fields must be positive"))?;
    let graph = build_task_graph(s.algorithm, s.d, &s.rows, s.rounds, &s.model);
    let naive = schedule_cpm(&graph, &graph.naive_durations(&s.model))?;
    let refined = refine_schedule(&graph, &s.model, s.max_iters, s.eps_rel)?;
    Ok(ScenarioResult {
        graph,
        naive,
        refined,
    })
}

pub fn write_makespans_csv<W: Write>(mut w: W, makespans: &[f64]) -> io::Result<()> {
    writeln!(w, "iteration,makespan_s")?;
    for (i, m) in makespans.iter().enumerate() {
        writeln!(w, "{i},{m:.9}")?;
    }
    Ok(())
}
