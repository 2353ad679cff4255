use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::profiler::{FlatProfile, FlatProfileEntry, ScatterSample, Snapshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub rank: i64,
    pub name: String,
    pub calls: u64,
    pub total_ns: u64,
    /// Integer mean (floor of total / calls).
    pub mean_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub yields: u64,
}

impl ProfileRow {
    pub fn from_entry(rank: i64, e: &FlatProfileEntry) -> Self {
        ProfileRow {
            rank,
            name: e.name.clone(),
            calls: e.calls,
            total_ns: e.total_active_ns,
            mean_ns: e.total_active_ns.checked_div(e.calls).unwrap_or(0),
            min_ns: e.min_ns,
            max_ns: e.max_ns,
            yields: e.total_yields,
        }
    }

    pub fn to_entry(&self) -> FlatProfileEntry {
        FlatProfileEntry {
            name: self.name.clone(),
            calls: self.calls,
            total_active_ns: self.total_ns,
            min_ns: self.min_ns,
            max_ns: self.max_ns,
            total_yields: self.yields,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub rank: u32,
    pub name: String,
    pub start_ns: u64,
    pub duration_ns: u64,
}

impl From<&ScatterSample> for ScatterRow {
    fn from(s: &ScatterSample) -> Self {
        ScatterRow { rank: s.rank, name: s.name.clone(), start_ns: s.start_ns, duration_ns: s.duration_ns }
    }
}

const PROFILE_HEADER: [&str; 8] = ["rank", "name", "calls", "total_ns", "mean_ns", "min_ns", "max_ns", "yields"];
const SCATTER_HEADER: [&str; 4] = ["rank", "name", "start_ns", "duration_ns"];

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_profile_csv<W: Write>(s: &Snapshot, w: W) -> Result<usize, csv::Error> {
    let mut out = writer(w);
    out.write_record(PROFILE_HEADER)?;
    let rank = s.rank_label();
    for e in s.profile.values() {
        out.serialize(ProfileRow::from_entry(rank, e))?;
    }
    out.flush()?;
    Ok(s.profile.len())
}

pub fn write_scatter_csv<W: Write>(s: &Snapshot, w: W) -> Result<usize, csv::Error> {
    let mut out = writer(w);
    out.write_record(SCATTER_HEADER)?;
    for x in &s.scatter {
        out.serialize(ScatterRow::from(x))?;
    }
    out.flush()?;
    Ok(s.scatter.len())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R, header: &[&str]) -> Result<Vec<T>, csv::Error> {
    let mut rd = csv::Reader::from_reader(r);
    let got = rd.headers()?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {:?}", got.iter().collect::<Vec<_>>()),
        )));
    }
    rd.deserialize().collect()
}

pub fn read_profile_csv<R: Read>(r: R) -> Result<Vec<ProfileRow>, csv::Error> {
    read_rows(r, &PROFILE_HEADER)
}

pub fn read_scatter_csv<R: Read>(r: R) -> Result<Vec<ScatterRow>, csv::Error> {
    read_rows(r, &SCATTER_HEADER)
}

/// Collapses parsed rows into a flat profile, merging rows that share a name.
pub fn rows_to_profile(rows: &[ProfileRow]) -> FlatProfile {
    let mut p = FlatProfile::new();
    for row in rows {
        p.entry(row.name.clone()).or_insert_with(|| FlatProfileEntry::new(&row.name)).merge(&row.to_entry());
    }
    p
}
