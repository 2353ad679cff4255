//! Snapshot serialization: trace events JSON, CSV profiles and scatter data,
//! task-graph DOT, a binary codec, and cross-run profile comparison.
//!
//! Every exporter is a pure function of a snapshot. The writer-based
//! functions are the primitives; the `*_file` helpers wrap them with
//! buffered file output.

mod codec;
mod diff;
mod dot;
mod table;
mod trace;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub use codec::{decode_snapshot, encode_snapshot, DecodeError, DecodeErrorKind, MAGIC, VERSION};
pub use diff::{diff_profiles, ProfileDiffRow, ThresholdError};
pub use dot::write_taskgraph_dot;
pub use table::{
    read_profile_csv, read_scatter_csv, rows_to_profile, write_profile_csv, write_scatter_csv, ProfileRow, ScatterRow,
};
pub use trace::{device_lane, trace_events, write_trace_json, TraceEvent, COUNTER_LANE, DEVICE_LANE_BASE};

use crate::profiler::Snapshot;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Decode { path: String, source: DecodeError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExportError + '_ {
    move |source| ExportError::Csv { path: path.display().to_string(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>, ExportError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, ExportError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

pub fn write_trace_events(s: &Snapshot, path: &Path) -> Result<usize, ExportError> {
    write_trace_json(s, create(path)?).map_err(io_err(path))
}

pub fn write_profile_csv_file(s: &Snapshot, path: &Path) -> Result<usize, ExportError> {
    write_profile_csv(s, create(path)?).map_err(csv_err(path))
}

pub fn write_scatter_csv_file(s: &Snapshot, path: &Path) -> Result<usize, ExportError> {
    write_scatter_csv(s, create(path)?).map_err(csv_err(path))
}

pub fn write_taskgraph_dot_file(s: &Snapshot, path: &Path) -> Result<(usize, usize), ExportError> {
    write_taskgraph_dot(s, create(path)?).map_err(io_err(path))
}

pub fn read_profile_csv_file(path: &Path) -> Result<Vec<ProfileRow>, ExportError> {
    read_profile_csv(open(path)?).map_err(csv_err(path))
}

pub fn write_snapshot_file(s: &Snapshot, path: &Path) -> Result<usize, ExportError> {
    let bytes = encode_snapshot(s);
    std::fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(bytes.len())
}

pub fn read_snapshot_file(path: &Path) -> Result<Snapshot, ExportError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_snapshot(&bytes).map_err(|source| ExportError::Decode { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests;
