use std::collections::BTreeSet;
use std::io::Write;

use crate::profiler::Snapshot;

fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

/// Task graph with one node per task name and one edge per parent/child
/// name pair. Returns `(nodes, edges)`.
pub fn write_taskgraph_dot<W: Write>(s: &Snapshot, mut w: W) -> std::io::Result<(usize, usize)> {
    let mut names: BTreeSet<&str> = s.profile.keys().map(String::as_str).collect();
    for (p, c) in s.edges.keys() {
        names.insert(p);
        names.insert(c);
    }
    writeln!(w, "digraph taskgraph {{")?;
    writeln!(w, "  node [shape=box];")?;
    for n in &names {
        let label = match s.profile.get(*n) {
            Some(e) => format!("{n}\ncalls={} mean={}ns", e.calls, e.total_active_ns.checked_div(e.calls).unwrap_or(0)),
            None => n.to_string(),
        };
        writeln!(w, "  {} [label={}];", quote(n), quote(&label))?;
    }
    for ((p, c), count) in &s.edges {
        writeln!(w, "  {} -> {} [label=\"{count}\"];", quote(p), quote(c))?;
    }
    writeln!(w, "}}")?;
    w.flush()?;
    Ok((names.len(), s.edges.len()))
}
