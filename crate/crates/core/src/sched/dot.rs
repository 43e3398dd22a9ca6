//! Graphviz export. Compute on a node is blue, client-to-master traffic
//! yellow, master-to-client traffic green.

use std::fmt::Write;

use super::cpm::Schedule;
use super::graph::{TaskGraph, TaskKind};

fn fill(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Compute | TaskKind::Encrypt | TaskKind::DecryptVerify | TaskKind::ApplyUpdate => {
            "lightblue"
        }
        TaskKind::SendUp => "yellow",
        TaskKind::Broadcast => "green",
        TaskKind::Source | TaskKind::Sink => "white",
    }
}

fn label(g: &TaskGraph, s: &Schedule, v: usize) -> String {
    let t = g.task(v);
    let mut l = t.kind.name().to_string();
    if t.is_barrier() {
        l.push_str(" master");
    }
    if let Some(c) = t.client {
        let _ = write!(l, " c{c}");
    }
    if let Some(r) = t.round {
        let _ = write!(l, " r{r}");
    }
    if let Some(b) = t.block {
        let _ = write!(l, " b{b}");
    }
    let _ = write!(l, "\\nstart={:.6} dur={:.6}", s.start[v], s.duration[v]);
    l
}

/// Deterministic DOT text: vertices in id order, then edges in insertion
/// order, weights in seconds.
pub fn export_dot(g: &TaskGraph, s: &Schedule) -> String {
    let mut out = String::new();
    out.push_str("digraph schedule {\n");
    out.push_str("  rankdir=LR;\n");
    out.push_str("  node [shape=box, style=filled];\n");
    for v in 0..g.len() {
        let _ = writeln!(
            out,
            "  t{v} [label=\"{}\", fillcolor={}];",
            label(g, s, v),
            fill(g.task(v).kind)
        );
    }
    for e in g.edges() {
        let _ = writeln!(
            out,
            "  t{} -> t{} [label=\"{:.6}\"];",
            e.from,
            e.to,
            g.edge_weight(e, &s.duration)
        );
    }
    out.push_str("}\n");
    out
}
