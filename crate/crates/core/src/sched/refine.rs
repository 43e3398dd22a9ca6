//! Fixpoint refinement of task durations under shared cores and links.
//!
//! A task's duration depends on what else runs at the same time, which in
//! turn depends on the schedule. Each iteration schedules with the current
//! durations, measures overlap, and recomputes:
//!
//! * transfers: `rtt/2 + bits (1 + c) / B`, where `c` is the number of other
//!   transfers on the same link averaged over this transfer's interval;
//! * compute: the cores left over by the other tasks on the same node,
//!   but never less than a fair share, clamped to `[1, cap]`.
//!
//! New durations are averaged with the previous ones to damp oscillation.

use std::collections::HashMap;

use super::cpm::{schedule_cpm, SchedError, Schedule};
use super::graph::{Link, Node, Resource, TaskGraph, TaskId};
use super::model::ResourceModel;

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_EPS_REL: f64 = 1e-3;
const DAMPING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub schedule: Schedule,
    /// Makespan of each iteration; entry 0 is the unrefined schedule.
    pub makespans: Vec<f64>,
    pub converged: bool,
}

impl Refinement {
    pub fn iterations(&self) -> usize {
        self.makespans.len() - 1
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Durations implied by the resource usage observed in `s`.
pub fn contended_durations(g: &TaskGraph, s: &Schedule, model: &ResourceModel) -> Vec<f64> {
    let mut links: HashMap<Link, Vec<TaskId>> = HashMap::new();
    let mut nodes: HashMap<Node, Vec<TaskId>> = HashMap::new();
    for (v, t) in g.tasks().iter().enumerate() {
        match t.resource {
            Resource::Link(l) => links.entry(l).or_default().push(v),
            Resource::Cpu { node, .. } => nodes.entry(node).or_default().push(v),
            Resource::Fixed => {}
        }
    }
    // Current allocations, recovered from durations.
    let alloc: Vec<f64> = g
        .tasks()
        .iter()
        .enumerate()
        .map(|(v, t)| match t.resource {
            Resource::Cpu { .. } if s.duration[v] > 0.0 => {
                t.work / (model.frequency_hz * s.duration[v])
            }
            _ => 0.0,
        })
        .collect();
    let cores = model.cores as f64;
    let mut out = s.duration.clone();
    for (v, t) in g.tasks().iter().enumerate() {
        let (s0, s1) = (s.start[v], s.finish(v));
        let len = s1 - s0;
        match t.resource {
            Resource::Fixed => {}
            Resource::Link(l) => {
                let mut others = 0.0;
                if len > 0.0 {
                    for &u in &links[&l] {
                        if u != v {
                            others += overlap(s0, s1, s.start[u], s.finish(u)) / len;
                        }
                    }
                }
                out[v] = t.duration(model, 1.0 + others);
            }
            Resource::Cpu { node, cap } => {
                let (mut count, mut busy) = (0.0, 0.0);
                if len > 0.0 {
                    for &u in &nodes[&node] {
                        if u != v {
                            let f = overlap(s0, s1, s.start[u], s.finish(u)) / len;
                            count += f;
                            busy += f * alloc[u];
                        }
                    }
                }
                let free = cores - busy;
                let fair = cores / (1.0 + count);
                let a = free.max(fair).clamp(1.0, cap as f64);
                out[v] = t.duration(model, a);
            }
        }
    }
    out
}

/// Iterates CPM and duration updates until the makespan moves by less
/// than `eps_rel` (relative) or `max_iters` is reached.
pub fn refine_schedule(
    g: &TaskGraph,
    model: &ResourceModel,
    max_iters: usize,
    eps_rel: f64,
) -> Result<Refinement, SchedError> {
    if max_iters == 0 {
        return Err(SchedError::Params("max_iters must be at least 1"));
    }
    if !(eps_rel > 0.0) {
        return Err(SchedError::Params("eps_rel must be positive"));
    }
    let mut durations = g.naive_durations(model);
    let mut schedule = schedule_cpm(g, &durations)?;
    let mut makespans = vec![schedule.makespan];
    let mut converged = false;
    for _ in 0..max_iters {
        let target = contended_durations(g, &schedule, model);
        for (d, t) in durations.iter_mut().zip(&target) {
            *d = DAMPING * *d + (1.0 - DAMPING) * t;
        }
        let next = schedule_cpm(g, &durations)?;
        let prev = schedule.makespan;
        schedule = next;
        makespans.push(schedule.makespan);
        let change = (schedule.makespan - prev).abs();
        if change <= eps_rel * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(Refinement {
        schedule,
        makespans,
        converged,
    })
}
