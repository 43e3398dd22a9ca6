//! Longest-path scheduling on the task DAG.

use std::collections::VecDeque;

use thiserror::Error;

use super::graph::{TaskGraph, TaskId, SOURCE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("task graph has a cycle")]
    Cycle,
    #[error("expected {expected} durations, got {got}")]
    Durations { expected: usize, got: usize },
    #[error("invalid refinement parameters: {0}")]
    Params(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub start: Vec<f64>,
    pub duration: Vec<f64>,
    pub makespan: f64,
}

impl Schedule {
    pub fn finish(&self, v: TaskId) -> f64 {
        self.start[v] + self.duration[v]
    }

    /// Tasks along one longest path, first to last, without source/sink.
    pub fn critical_path(&self, g: &TaskGraph) -> Vec<TaskId> {
        let real = 2..g.len();
        let Some(mut v) = real
            .clone()
            .max_by(|&a, &b| self.finish(a).total_cmp(&self.finish(b)))
        else {
            return Vec::new();
        };
        let mut preds: Vec<Vec<(TaskId, f64)>> = vec![Vec::new(); g.len()];
        for e in g.edges() {
            preds[e.to].push((e.from, g.edge_weight(e, &self.duration)));
        }
        let mut path = vec![v];
        loop {
            let tight = preds[v]
                .iter()
                .filter(|(u, _)| *u != SOURCE)
                .find(|(u, w)| self.start[*u] + w == self.start[v] && *w > 0.0);
            match tight {
                Some(&(u, _)) => {
                    path.push(u);
                    v = u;
                }
                None => break,
            }
        }
        path.reverse();
        path
    }

    /// Every edge `u -> v` has `start(v) >= start(u) + w(u, v)`.
    pub fn respects_precedence(&self, g: &TaskGraph) -> bool {
        g.edges()
            .iter()
            .all(|e| self.start[e.to] >= self.start[e.from] + g.edge_weight(e, &self.duration))
    }
}

/// Kahn order starting at the source.
pub fn topological_order(g: &TaskGraph) -> Result<Vec<TaskId>, SchedError> {
    let n = g.len();
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for e in g.edges() {
        indeg[e.to] += 1;
        succ[e.from].push(e.to);
    }
    let mut queue: VecDeque<TaskId> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                queue.push_back(w);
            }
        }
    }
    if order.len() != n {
        return Err(SchedError::Cycle);
    }
    Ok(order)
}

/// `start(v)` = longest weighted path from the source, by relaxing
/// vertices in topological order.
pub fn schedule_cpm(g: &TaskGraph, durations: &[f64]) -> Result<Schedule, SchedError> {
    if durations.len() != g.len() {
        return Err(SchedError::Durations {
            expected: g.len(),
            got: durations.len(),
        });
    }
    let order = topological_order(g)?;
    let mut out: Vec<Vec<(TaskId, f64)>> = vec![Vec::new(); g.len()];
    for e in g.edges() {
        out[e.from].push((e.to, g.edge_weight(e, durations)));
    }
    let mut start = vec![0.0f64; g.len()];
    for v in order {
        for &(w, wt) in &out[v] {
            let cand = start[v] + wt;
            if cand > start[w] {
                start[w] = cand;
            }
        }
    }
    let makespan = (0..g.len())
        .map(|v| start[v] + durations[v])
        .fold(0.0, f64::max);
    Ok(Schedule {
        start,
        duration: durations.to_vec(),
        makespan,
    })
}
