//! Task DAG with durations derived from a resource model.

use std::fmt;

use super::model::ResourceModel;
use crate::secenv::AEAD_OVERHEAD;

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Compute,
    Encrypt,
    SendUp,
    Broadcast,
    DecryptVerify,
    ApplyUpdate,
    Source,
    Sink,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Compute => "Compute",
            TaskKind::Encrypt => "Encrypt",
            TaskKind::SendUp => "SendUp",
            TaskKind::Broadcast => "Broadcast",
            TaskKind::DecryptVerify => "DecryptVerify",
            TaskKind::ApplyUpdate => "ApplyUpdate",
            TaskKind::Source => "Source",
            TaskKind::Sink => "Sink",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which CPU a task runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Client(u32),
    Master,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    Up,
    Down,
}

/// What a task consumes, and how its work turns into seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resource {
    /// `work` is already in seconds and never changes.
    Fixed,
    /// `work` is one-core cycles; up to `cap` cores can share it.
    Cpu { node: Node, cap: u32 },
    /// `work` is bytes on a shared link.
    Link(Link),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub client: Option<u32>,
    pub round: Option<u32>,
    pub block: Option<u32>,
    pub resource: Resource,
    pub work: f64,
    /// How many tasks the unrefined model assumes compete for the same
    /// cores or link.
    pub naive_share: f64,
}

impl Task {
    /// A task with a fixed duration, for hand-built graphs.
    pub fn fixed(kind: TaskKind, seconds: f64) -> Self {
        Self {
            kind,
            client: None,
            round: None,
            block: None,
            resource: Resource::Fixed,
            work: seconds,
            naive_share: 1.0,
        }
    }

    pub fn transfer(kind: TaskKind, link: Link, bytes: f64) -> Self {
        Self {
            kind,
            client: None,
            round: None,
            block: None,
            resource: Resource::Link(link),
            work: bytes,
            naive_share: 1.0,
        }
    }

    pub fn cpu(kind: TaskKind, node: Node, cap: u32, cycles: f64) -> Self {
        Self {
            kind,
            client: None,
            round: None,
            block: None,
            resource: Resource::Cpu { node, cap },
            work: cycles,
            naive_share: 1.0,
        }
    }

    pub fn at(mut self, client: Option<u32>, round: u32, block: Option<u32>) -> Self {
        self.client = client;
        self.round = Some(round);
        self.block = block;
        self
    }

    pub fn shared_by(mut self, share: f64) -> Self {
        self.naive_share = share;
        self
    }

    /// A master-side compute that waits for every client: the round barrier.
    pub fn is_barrier(&self) -> bool {
        self.kind == TaskKind::Compute
            && matches!(self.resource, Resource::Cpu { node: Node::Master, .. })
    }

    /// Seconds this task takes with `alloc` cores or a `1/share` link share.
    pub fn duration(&self, model: &ResourceModel, alloc_or_share: f64) -> f64 {
        match self.resource {
            Resource::Fixed => self.work,
            Resource::Cpu { .. } => self.work / (model.frequency_hz * alloc_or_share),
            Resource::Link(_) => model.transfer_time(self.work * 8.0, alloc_or_share),
        }
    }

    /// Cores (or link share) under the unrefined assumption.
    pub fn naive_allocation(&self, model: &ResourceModel) -> f64 {
        match self.resource {
            Resource::Fixed => 1.0,
            Resource::Cpu { cap, .. } => {
                (model.cores as f64 / self.naive_share).clamp(1.0, cap as f64)
            }
            Resource::Link(_) => self.naive_share,
        }
    }
}

/// Directed edge. Data edges carry the producer's duration as weight;
/// the others carry zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: TaskId,
    pub to: TaskId,
    pub data: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    tasks: Vec<Task>,
    edges: Vec<Edge>,
}

pub const SOURCE: TaskId = 0;
pub const SINK: TaskId = 1;

impl Default for TaskGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskGraph {
    /// Graph holding only the source and sink.
    pub fn new() -> Self {
        let mut g = Self {
            tasks: Vec::new(),
            edges: Vec::new(),
        };
        g.tasks.push(Task::fixed(TaskKind::Source, 0.0));
        g.tasks.push(Task::fixed(TaskKind::Sink, 0.0));
        g.edges.push(Edge {
            from: SOURCE,
            to: SINK,
            data: false,
        });
        g
    }

    /// Adds a task wired to the source and the sink.
    pub fn add_task(&mut self, task: Task) -> TaskId {
        let id = self.tasks.len();
        self.tasks.push(task);
        self.edges.push(Edge {
            from: SOURCE,
            to: id,
            data: false,
        });
        self.edges.push(Edge {
            from: id,
            to: SINK,
            data: false,
        });
        id
    }

    /// `to` consumes the output of `from`.
    pub fn add_dependency(&mut self, from: TaskId, to: TaskId) {
        assert!(from < self.tasks.len() && to < self.tasks.len(), "unknown task");
        self.edges.push(Edge {
            from,
            to,
            data: true,
        });
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.len() == 2
    }

    pub fn data_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.data).count()
    }

    pub fn edge_weight(&self, e: &Edge, durations: &[f64]) -> f64 {
        if e.data {
            durations[e.from]
        } else {
            0.0
        }
    }

    /// Durations under the unrefined model.
    pub fn naive_durations(&self, model: &ResourceModel) -> Vec<f64> {
        self.tasks
            .iter()
            .map(|t| t.duration(model, t.naive_allocation(model)))
            .collect()
    }

    pub fn barrier_count(&self) -> usize {
        self.tasks.iter().filter(|t| t.is_barrier()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedAlgorithm {
    Gd,
    DcgdPermkAes,
}

/// Splits `0..d` into `n` contiguous block lengths, the first `d mod n`
/// one longer.
pub fn block_sizes(d: u64, n: u32) -> Vec<u64> {
    let n64 = n as u64;
    (0..n64).map(|j| d / n64 + u64::from(j < d % n64)).collect()
}

/// Which client owns block `j` in round `k`. The real protocol draws a
/// fresh permutation each round; the model rotates ownership so that a
/// slow client's block changes position from round to round.
pub fn block_owner(block: u32, round: u32, n: u32) -> u32 {
    (block + round) % n
}

/// Unrolled graph for `rounds` rounds over clients with `rows[i]` samples.
pub fn build_task_graph(
    algorithm: SchedAlgorithm,
    d: u64,
    rows: &[u64],
    rounds: u32,
    model: &ResourceModel,
) -> TaskGraph {
    assert!(rounds >= 1, "need at least one round");
    assert!(!rows.is_empty(), "need at least one client");
    match algorithm {
        SchedAlgorithm::Gd => build_gd(d, rows, rounds, model),
        SchedAlgorithm::DcgdPermkAes => build_permk(d, rows, rounds, model),
    }
}

fn build_gd(d: u64, rows: &[u64], rounds: u32, m: &ResourceModel) -> TaskGraph {
    let n = rows.len() as u32;
    let nf = n as f64;
    let cores = m.cores;
    let msg = m.payload_bits(d) / 8.0;
    let mut g = TaskGraph::new();
    let mut prev_apply: Vec<Option<TaskId>> = vec![None; n as usize];
    for k in 0..rounds {
        let mut sends = Vec::with_capacity(n as usize);
        for i in 0..n {
            let c = g.add_task(
                Task::cpu(
                    TaskKind::Compute,
                    Node::Client(i),
                    cores,
                    m.vector_cycles(m.gradient_cycles(rows[i as usize], d)),
                )
                .at(Some(i), k, None),
            );
            if let Some(a) = prev_apply[i as usize] {
                g.add_dependency(a, c);
            }
            let s = g.add_task(
                Task::transfer(TaskKind::SendUp, Link::Up, msg)
                    .at(Some(i), k, None)
                    .shared_by(nf),
            );
            g.add_dependency(c, s);
            sends.push(s);
        }
        // Master sums n vectors and scales once.
        let agg_cycles = (nf - 1.0) * m.vector_sub_cycles(d) + d as f64 * m.mult_cost;
        let agg = g.add_task(
            Task::cpu(TaskKind::Compute, Node::Master, cores, m.vector_cycles(agg_cycles))
                .at(None, k, None),
        );
        for s in sends {
            g.add_dependency(s, agg);
        }
        let b = g.add_task(
            Task::transfer(TaskKind::Broadcast, Link::Down, msg)
                .at(None, k, None)
                .shared_by(nf),
        );
        g.add_dependency(agg, b);
        for i in 0..n {
            let a = g.add_task(
                Task::cpu(
                    TaskKind::ApplyUpdate,
                    Node::Client(i),
                    cores,
                    m.vector_cycles(m.axpy_cycles(d)),
                )
                .at(Some(i), k, None),
            );
            g.add_dependency(b, a);
            prev_apply[i as usize] = Some(a);
        }
    }
    g
}

fn build_permk(d: u64, rows: &[u64], rounds: u32, m: &ResourceModel) -> TaskGraph {
    let n = rows.len() as u32;
    let nf = n as f64;
    let cores = m.cores;
    let sizes = block_sizes(d, n);
    let env_bytes = |j: u32| m.payload_bits(sizes[j as usize]) / 8.0 + AEAD_OVERHEAD as f64;
    let mut g = TaskGraph::new();
    // prev_apply[i][j]: client i's update of block j in the previous round.
    let mut prev_apply: Vec<Vec<Option<TaskId>>> = vec![vec![None; n as usize]; n as usize];
    for k in 0..rounds {
        let mut sends = vec![0; n as usize];
        for i in 0..n {
            let ni = rows[i as usize];
            // Each client has n partial products plus its own block's
            // gradient in flight in a round.
            let share = nf + 1.0;
            let own = (0..n).find(|&j| block_owner(j, k, n) == i).expect("every client owns a block");
            let mut partials = Vec::with_capacity(n as usize);
            for j in 0..n {
                let p = g.add_task(
                    Task::cpu(
                        TaskKind::Compute,
                        Node::Client(i),
                        cores,
                        m.vector_cycles(m.matvec_cycles(ni, sizes[j as usize])),
                    )
                    .at(Some(i), k, Some(j))
                    .shared_by(share),
                );
                if let Some(a) = prev_apply[i as usize][j as usize] {
                    g.add_dependency(a, p);
                }
                partials.push(p);
            }
            // Sum the partial products, form the residual, multiply by
            // the transposed own-block columns.
            let grad_cycles = (nf - 1.0) * ni as f64 * m.add_cost
                + m.vector_sub_cycles(ni)
                + m.matvec_cycles(sizes[own as usize], ni);
            let grad = g.add_task(
                Task::cpu(TaskKind::Compute, Node::Client(i), cores, m.vector_cycles(grad_cycles))
                    .at(Some(i), k, Some(own))
                    .shared_by(share),
            );
            for p in partials {
                g.add_dependency(p, grad);
            }
            let enc = g.add_task(
                Task::cpu(
                    TaskKind::Encrypt,
                    Node::Client(i),
                    1,
                    env_bytes(own) * m.aes_cycles_per_byte,
                )
                .at(Some(i), k, Some(own)),
            );
            g.add_dependency(grad, enc);
            let s = g.add_task(
                Task::transfer(TaskKind::SendUp, Link::Up, env_bytes(own))
                    .at(Some(i), k, Some(own))
                    .shared_by(nf),
            );
            g.add_dependency(enc, s);
            sends[own as usize] = s;
        }
        // The master forwards each envelope as soon as it lands.
        let mut bcast = Vec::with_capacity(n as usize);
        for j in 0..n {
            let owner = block_owner(j, k, n);
            let b = g.add_task(
                Task::transfer(TaskKind::Broadcast, Link::Down, env_bytes(j))
                    .at(Some(owner), k, Some(j))
                    .shared_by(nf),
            );
            g.add_dependency(sends[j as usize], b);
            bcast.push(b);
        }
        for i in 0..n {
            for j in 0..n {
                let dec = g.add_task(
                    Task::cpu(
                        TaskKind::DecryptVerify,
                        Node::Client(i),
                        1,
                        env_bytes(j) * m.aes_cycles_per_byte,
                    )
                    .at(Some(i), k, Some(j)),
                );
                g.add_dependency(bcast[j as usize], dec);
                let a = g.add_task(
                    Task::cpu(
                        TaskKind::ApplyUpdate,
                        Node::Client(i),
                        cores,
                        m.vector_cycles(m.axpy_cycles(sizes[j as usize])),
                    )
                    .at(Some(i), k, Some(j)),
                );
                g.add_dependency(dec, a);
                prev_apply[i as usize][j as usize] = Some(a);
            }
        }
    }
    g
}
