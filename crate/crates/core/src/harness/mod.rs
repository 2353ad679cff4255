//! Profiling-overhead measurement. The same workload runs under several
//! instrumentation arms; each arm's computation time is the minimum over
//! repetitions, and overhead is reported as
//! `o = comp_with / comp_without * 100 - 100`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distrib::{inproc_world, DistribError};
use crate::profiler::{CaptureFlags, ProfilerConfig};
use crate::workload::{self, run_benchmark, WorkloadConfig, WorkloadError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("baseline time must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("measured time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("locality counts must be non-empty and strictly ascending")]
    BadCounts,
    #[error("arms executed different task graphs: {0}")]
    DagMismatch(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Distrib(#[from] DistribError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Percentage slowdown of `comp_apex_s` relative to `comp_no_apex_s`.
/// Negative values are returned as measured.
pub fn compute_overhead(comp_apex_s: f64, comp_no_apex_s: f64) -> Result<f64, HarnessError> {
    if comp_no_apex_s.is_nan() || comp_no_apex_s <= 0.0 {
        return Err(HarnessError::NonPositiveBaseline(comp_no_apex_s));
    }
    if comp_apex_s.is_nan() || comp_apex_s <= 0.0 {
        return Err(HarnessError::NonPositiveTime(comp_apex_s));
    }
    Ok(comp_apex_s / comp_no_apex_s * 100.0 - 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    /// No observer installed at all.
    AbsentHooks,
    /// Profiler installed but disabled.
    Disabled,
    /// Task timers and counters, no device activity capture.
    CpuOnly,
    /// Everything, including device activity records.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::AbsentHooks, Arm::Disabled, Arm::CpuOnly, Arm::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::AbsentHooks => "absent",
            Arm::Disabled => "disabled",
            Arm::CpuOnly => "cpu_only",
            Arm::Full => "full",
        }
    }

    pub fn profiler_config(self, seed: u64) -> Option<ProfilerConfig> {
        let base = ProfilerConfig { sampling_seed: seed, ..ProfilerConfig::default() };
        match self {
            Arm::AbsentHooks => None,
            Arm::Disabled => Some(ProfilerConfig::disabled()),
            Arm::CpuOnly => Some(ProfilerConfig { capture: CaptureFlags::CPU_ONLY, ..base }),
            Arm::Full => Some(base),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmMeasurement {
    pub arm: Arm,
    /// Computation seconds per repetition.
    pub times_s: Vec<f64>,
    pub completion_counts: BTreeMap<String, u64>,
}

impl ArmMeasurement {
    pub fn min_s(&self) -> f64 {
        self.times_s.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub n: u32,
    pub comp_apex_s: f64,
    pub comp_no_apex_s: f64,
    pub o_percent: f64,
}

impl OverheadReport {
    pub fn new(n: u32, comp_apex_s: f64, comp_no_apex_s: f64) -> Result<Self, HarnessError> {
        Ok(OverheadReport { n, comp_apex_s, comp_no_apex_s, o_percent: compute_overhead(comp_apex_s, comp_no_apex_s)? })
    }
}

#[derive(Debug, Clone)]
pub struct OverheadExperiment {
    pub n: u32,
    pub arms: BTreeMap<Arm, ArmMeasurement>,
    /// Full profiling against no hooks.
    pub report: OverheadReport,
    pub disabled: OverheadReport,
    pub cpu_only: OverheadReport,
}

/// Runs the workload once on a fresh in-process world of `n` localities and
/// returns the computation time and per-name completion counts.
pub fn run_arm_once(cfg: &WorkloadConfig, n: u32, arm: Arm) -> Result<(f64, BTreeMap<String, u64>), HarnessError> {
    let mut lc = workload::locality_config(cfg, arm.profiler_config(cfg.seed));
    lc.start_monitor = matches!(arm, Arm::CpuOnly | Arm::Full);
    let world = inproc_world(n, &lc)?;
    let (point, outcome) = run_benchmark(cfg, &world)?;
    Ok((point.total_time_s, outcome.completion_counts))
}

fn check_same_dag(arms: &BTreeMap<Arm, ArmMeasurement>) -> Result<(), HarnessError> {
    let mut it = arms.values();
    let Some(first) = it.next() else { return Ok(()) };
    for m in it {
        if m.completion_counts != first.completion_counts {
            return Err(HarnessError::DagMismatch(format!("{} vs {}", first.arm.as_str(), m.arm.as_str())));
        }
    }
    Ok(())
}

/// Runs `arms` `repetitions` times each, interleaving arms within every
/// repetition so slow drifts of the machine affect all arms alike.
pub fn measure_arms(
    cfg: &WorkloadConfig,
    n: u32,
    repetitions: usize,
    arms: &[Arm],
) -> Result<BTreeMap<Arm, ArmMeasurement>, HarnessError> {
    if repetitions == 0 {
        return Err(HarnessError::NoRepetitions);
    }
    let mut out: BTreeMap<Arm, ArmMeasurement> = BTreeMap::new();
    for _ in 0..repetitions {
        for &arm in arms {
            let (t, counts) = run_arm_once(cfg, n, arm)?;
            let m = out.entry(arm).or_insert_with(|| ArmMeasurement {
                arm,
                times_s: Vec::new(),
                completion_counts: counts.clone(),
            });
            if m.completion_counts != counts {
                return Err(HarnessError::DagMismatch(format!("{} changed between repetitions", arm.as_str())));
            }
            m.times_s.push(t);
        }
    }
    check_same_dag(&out)?;
    Ok(out)
}

pub fn run_overhead_experiment(
    cfg: &WorkloadConfig,
    n: u32,
    repetitions: usize,
) -> Result<OverheadExperiment, HarnessError> {
    let arms = measure_arms(cfg, n, repetitions, &Arm::ALL)?;
    let base = arms[&Arm::AbsentHooks].min_s();
    Ok(OverheadExperiment {
        n,
        report: OverheadReport::new(n, arms[&Arm::Full].min_s(), base)?,
        disabled: OverheadReport::new(n, arms[&Arm::Disabled].min_s(), base)?,
        cpu_only: OverheadReport::new(n, arms[&Arm::CpuOnly].min_s(), base)?,
        arms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: u32,
    pub time_with: f64,
    pub time_without: f64,
    pub cells_per_second_with: f64,
    pub cells_per_second_without: f64,
    pub o_percent: f64,
    pub speedup_with: f64,
    pub speedup_without: f64,
}

/// Builds sweep rows from measured (n, time with profiling, time without)
/// triples. Speedups are relative to the first row of each arm.
pub fn sweep_rows(
    cells_per_subgrid: usize,
    num_subgrids: usize,
    num_steps: u32,
    measured: &[(u32, f64, f64)],
) -> Result<Vec<SweepRow>, HarnessError> {
    let Some(&(_, first_with, first_without)) = measured.first() else {
        return Err(HarnessError::BadCounts);
    };
    measured
        .iter()
        .map(|&(n, with, without)| {
            Ok(SweepRow {
                n,
                time_with: with,
                time_without: without,
                cells_per_second_with: workload::cells_per_second(cells_per_subgrid, num_subgrids, num_steps, with),
                cells_per_second_without: workload::cells_per_second(
                    cells_per_subgrid,
                    num_subgrids,
                    num_steps,
                    without,
                ),
                o_percent: compute_overhead(with, without)?,
                speedup_with: first_with / with,
                speedup_without: first_without / without,
            })
        })
        .collect()
}

/// Strong-scaling sweep over in-process worlds of `counts` localities, with
/// full profiling against no hooks.
pub fn run_scaling_sweep(
    cfg: &WorkloadConfig,
    counts: &[u32],
    repetitions: usize,
) -> Result<Vec<SweepRow>, HarnessError> {
    if counts.is_empty() || counts.windows(2).any(|w| w[0] >= w[1]) || counts[0] == 0 {
        return Err(HarnessError::BadCounts);
    }
    let mut measured = Vec::with_capacity(counts.len());
    for &n in counts {
        let arms = measure_arms(cfg, n, repetitions, &[Arm::AbsentHooks, Arm::Full])?;
        measured.push((n, arms[&Arm::Full].min_s(), arms[&Arm::AbsentHooks].min_s()));
    }
    // The sub-grid count does not depend on the partition.
    let mesh = workload::build_mesh(cfg, 1);
    sweep_rows(mesh.cells_per_subgrid(), mesh.len(), cfg.num_steps, &measured)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record([
            "n",
            "time_with",
            "time_without",
            "cells_per_second_with",
            "cells_per_second_without",
            "o_percent",
            "speedup_with",
            "speedup_without",
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRow>, HarnessError> {
    Ok(csv::Reader::from_reader(r).deserialize().collect::<Result<_, _>>()?)
}

pub fn write_overhead_csv<W: Write>(reports: &[OverheadReport], w: W) -> Result<(), HarnessError> {
    let mut out = csv_writer(w);
    for r in reports {
        out.serialize(r)?;
    }
    if reports.is_empty() {
        out.write_record(["n", "comp_apex_s", "comp_no_apex_s", "o_percent"])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
