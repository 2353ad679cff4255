use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use serde_json::json;

use amtprof::distrib::{inproc_world, reduce_world, tcp_loopback_world, MessageStats};
use amtprof::export::{
    diff_profiles, read_profile_csv_file, read_snapshot_file, rows_to_profile, write_profile_csv,
    write_profile_csv_file, write_scatter_csv_file, write_snapshot_file, write_taskgraph_dot_file, write_trace_events,
    ExportError, ProfileDiffRow,
};
use amtprof::harness::{
    run_overhead_experiment, run_scaling_sweep, sweep_rows, write_overhead_csv, write_sweep_csv, Arm, OverheadReport,
};
use amtprof::profiler::{ProfilerConfig, Snapshot};
use amtprof::workload::{self, build_mesh, cells_per_second, run_benchmark, WorkloadConfig};

use crate::{
    AggregateArgs, BenchArgs, CmdResult, DiffArgs, ExportArgs, Failure, OverheadArgs, SweepArgs, Switch, Transport,
};

pub const BENCH_FILES: [&str; 6] =
    ["manifest.json", "snapshot.bin", "profile.csv", "scatter.csv", "trace.json", "taskgraph.dot"];

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

// Missing or malformed input is the caller's mistake; failing to write is not.
fn read_failure(e: ExportError) -> Failure {
    usage(e)
}

fn write_failure(e: ExportError) -> Failure {
    runtime(e)
}

fn load_config(path: Option<&Path>, base: WorkloadConfig) -> Result<WorkloadConfig, Failure> {
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    WorkloadConfig::parse_over(base, &text).with_context(|| format!("in {}", path.display())).map_err(usage)
}

fn positive_time(v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(usage(anyhow!("injected time must be positive, got {v}")))
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64), Failure> {
    let (a, b) = s.split_once(',').ok_or_else(|| usage(anyhow!("expected WITH,WITHOUT, got {s:?}")))?;
    let num = |x: &str| x.trim().parse::<f64>().with_context(|| format!("bad time {x:?}")).map_err(usage);
    Ok((positive_time(num(a)?)?, positive_time(num(b)?)?))
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)
}

/// Writes every per-snapshot artifact into `dir`.
fn write_artifacts(s: &Snapshot, dir: &Path) -> Result<serde_json::Value, Failure> {
    let profile_rows = write_profile_csv_file(s, &dir.join("profile.csv")).map_err(write_failure)?;
    let scatter_rows = write_scatter_csv_file(s, &dir.join("scatter.csv")).map_err(write_failure)?;
    let events = write_trace_events(s, &dir.join("trace.json")).map_err(write_failure)?;
    let (nodes, edges) = write_taskgraph_dot_file(s, &dir.join("taskgraph.dot")).map_err(write_failure)?;
    Ok(json!({
        "profile_rows": profile_rows,
        "scatter_rows": scatter_rows,
        "trace_events": events,
        "taskgraph_nodes": nodes,
        "taskgraph_edges": edges,
    }))
}

pub fn bench(a: &BenchArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref(), WorkloadConfig::default())?;
    if a.localities == 0 {
        return Err(usage(anyhow!("--localities must be at least 1")));
    }
    let injected = a.inject_time.map(positive_time).transpose()?;
    let profiling = a.profile == Switch::On;
    let profiler = profiling.then(|| ProfilerConfig { sampling_seed: cfg.seed, ..ProfilerConfig::default() });
    let mut lc = workload::locality_config(&cfg, profiler);
    lc.start_monitor = profiling;
    let world = match a.transport {
        Transport::Inproc => inproc_world(a.localities, &lc),
        Transport::Tcp => tcp_loopback_world(a.localities, &lc),
    }
    .map_err(runtime)?;
    let (point, outcome) = run_benchmark(&cfg, &world).map_err(runtime)?;
    let reduction = reduce_world(&world, 0).map_err(runtime)?;
    let mut stats = MessageStats::default();
    for l in &world {
        stats.merge(&l.message_stats());
    }
    drop(world);

    let merged = reduction.merged;
    create_out_dir(&a.out)?;
    write_snapshot_file(&merged, &a.out.join("snapshot.bin")).map_err(write_failure)?;
    let artifacts = write_artifacts(&merged, &a.out)?;

    let time_s = injected.unwrap_or(point.total_time_s);
    let mesh = build_mesh(&cfg, a.localities);
    let cps = cells_per_second(mesh.cells_per_subgrid(), mesh.len(), cfg.num_steps, time_s);
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let manifest = json!({
        "tool": "amtprof",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "bench",
        "config": config,
        "localities": a.localities,
        "transport": match a.transport { Transport::Inproc => "inproc", Transport::Tcp => "tcp" },
        "profile": if profiling { "on" } else { "off" },
        "timings": {
            "computation_s": time_s,
            "cells_per_second": cps,
            "injected": injected.is_some(),
        },
        "counts": {
            "subgrids": mesh.len(),
            "kernel_launches": outcome.kernel_launches,
            "ghost_parcels": outcome.ghost_parcels,
            "parcels_sent": stats.total_sent(),
            "tasks_completed": outcome.completion_counts.values().sum::<u64>(),
        },
        "artifacts": artifacts,
        "files": BENCH_FILES,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime)? + "\n";
    let path = a.out.join("manifest.json");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)?;
    println!(
        "{} localities: {:.6} s, {:.0} cells/s, {} kernels -> {}",
        a.localities,
        time_s,
        cps,
        outcome.kernel_launches,
        a.out.display()
    );
    Ok(())
}

fn print_report(label: &str, r: &OverheadReport) {
    println!("{label:<10} {:>12.6} s  o({}) = {:.2}%", r.comp_apex_s, r.n, r.o_percent);
}

pub fn overhead(a: &OverheadArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref(), WorkloadConfig::default())?;
    if a.localities == 0 {
        return Err(usage(anyhow!("--localities must be at least 1")));
    }
    let report = if let Some(s) = &a.inject_times {
        let (with, without) = parse_pair(s)?;
        let r = OverheadReport::new(a.localities, with, without).map_err(usage)?;
        println!("o({}) = {:.2}%", r.n, r.o_percent);
        r
    } else {
        if a.repetitions == 0 {
            return Err(usage(anyhow!("--repetitions must be at least 1")));
        }
        let e = run_overhead_experiment(&cfg, a.localities, a.repetitions).map_err(runtime)?;
        println!("{:<10} {:>12.6} s", Arm::AbsentHooks.as_str(), e.report.comp_no_apex_s);
        print_report(Arm::Disabled.as_str(), &e.disabled);
        print_report(Arm::CpuOnly.as_str(), &e.cpu_only);
        print_report(Arm::Full.as_str(), &e.report);
        e.report
    };
    if let Some(path) = &a.out {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display())).map_err(runtime)?;
        write_overhead_csv(&[report], BufWriter::new(f)).map_err(runtime)?;
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref(), WorkloadConfig::scaling())?;
    let counts = &a.localities;
    if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage(anyhow!("--localities must be non-empty, positive and strictly ascending")));
    }
    let rows = if let Some(s) = &a.inject_times {
        let pairs = s.split(';').map(parse_pair).collect::<Result<Vec<_>, _>>()?;
        if pairs.len() != counts.len() {
            return Err(usage(anyhow!("{} injected pairs for {} locality counts", pairs.len(), counts.len())));
        }
        let measured: Vec<_> = counts.iter().zip(pairs).map(|(&n, (w, wo))| (n, w, wo)).collect();
        let mesh = build_mesh(&cfg, 1);
        sweep_rows(mesh.cells_per_subgrid(), mesh.len(), cfg.num_steps, &measured).map_err(usage)?
    } else {
        if a.repetitions == 0 {
            return Err(usage(anyhow!("--repetitions must be at least 1")));
        }
        run_scaling_sweep(&cfg, counts, a.repetitions).map_err(runtime)?
    };
    match &a.out {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display())).map_err(runtime)?;
            write_sweep_csv(&rows, BufWriter::new(f)).map_err(runtime)?;
            for r in &rows {
                println!("n = {:>3}  speedup {:.2}  o = {:.2}%", r.n, r.speedup_with, r.o_percent);
            }
        }
        None => write_sweep_csv(&rows, io::stdout().lock()).map_err(runtime)?,
    }
    Ok(())
}

pub fn export(a: &ExportArgs) -> CmdResult {
    let s = read_snapshot_file(&a.snapshot).map_err(read_failure)?;
    create_out_dir(&a.out)?;
    write_artifacts(&s, &a.out)?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn format_diff(rows: &[ProfileDiffRow]) -> String {
    let mut out = format!(
        "{:<32} {:>10} {:>10} {:>14} {:>14} {:>9}  flag\n",
        "name", "calls_a", "calls_b", "mean_a_ns", "mean_b_ns", "ratio"
    );
    for r in rows {
        out += &format!(
            "{:<32} {:>10} {:>10} {:>14} {:>14} {:>9}  {}\n",
            r.name,
            opt(r.calls_a),
            opt(r.calls_b),
            opt(r.mean_a_ns.map(|m| format!("{m:.1}"))),
            opt(r.mean_b_ns.map(|m| format!("{m:.1}"))),
            opt(r.mean_ratio.map(|m| format!("{m:.3}"))),
            if r.flagged { "*" } else { "" }
        );
    }
    out
}

pub fn diff(a: &DiffArgs) -> CmdResult {
    let pa = rows_to_profile(&read_profile_csv_file(&a.a).map_err(read_failure)?);
    let pb = rows_to_profile(&read_profile_csv_file(&a.b).map_err(read_failure)?);
    let rows = diff_profiles(&pa, &pb, a.threshold).map_err(usage)?;
    print!("{}", format_diff(&rows));
    Ok(())
}

pub fn aggregate(a: &AggregateArgs) -> CmdResult {
    let parts = a.inputs.iter().map(|p| read_snapshot_file(p)).collect::<Result<Vec<_>, _>>().map_err(read_failure)?;
    let merged = Snapshot::fold(&parts);
    if let Some(path) = &a.out {
        write_snapshot_file(&merged, path).map_err(write_failure)?;
    }
    match &a.csv {
        Some(path) => {
            write_profile_csv_file(&merged, path).map_err(write_failure)?;
        }
        None => {
            let mut out = io::stdout().lock();
            write_profile_csv(&merged, &mut out).map_err(runtime)?;
            out.flush().map_err(runtime)?;
        }
    }
    Ok(())
}
