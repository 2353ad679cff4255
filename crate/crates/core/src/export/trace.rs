use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use serde_json::Value;

use crate::profiler::Snapshot;

/// Base of the synthetic thread ids given to device stream lanes.
pub const DEVICE_LANE_BASE: u64 = 10_000;

/// Thread id shared by all counter events of a locality, clear of worker ids
/// and device lanes.
pub const COUNTER_LANE: u64 = DEVICE_LANE_BASE - 1;

pub fn device_lane(device_id: u32, stream_id: u32) -> u64 {
    DEVICE_LANE_BASE + device_id as u64 * 1000 + stream_id as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: &'static str,
    pub ph: &'static str,
    pub ts: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dur: Option<f64>,
    pub pid: u32,
    pub tid: u64,
    pub args: BTreeMap<&'static str, Value>,
}

fn us(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

/// Builds the event list: one "X" event per task active segment and per
/// device activity record, then one "C" event per counter sample. Within
/// each (pid, tid) lane events are ordered by ts.
pub fn trace_events(s: &Snapshot) -> Vec<TraceEvent> {
    let mut complete = Vec::new();
    for t in &s.tasks {
        for seg in &t.segments {
            let mut args = BTreeMap::new();
            args.insert("guid", Value::from(t.guid.0));
            if let Some(p) = t.parent {
                args.insert("parent_guid", Value::from(p.0));
            }
            complete.push((
                (t.rank, seg.worker as u64, seg.start_ns, seg.end_ns - seg.start_ns),
                TraceEvent {
                    name: t.name.clone(),
                    cat: "cpu",
                    ph: "X",
                    ts: us(seg.start_ns),
                    dur: Some(us(seg.end_ns - seg.start_ns)),
                    pid: t.rank,
                    tid: seg.worker as u64,
                    args,
                },
            ));
        }
    }
    for a in &s.activity {
        let mut args = BTreeMap::new();
        args.insert("guid", Value::from(a.correlation_guid.0));
        if let Some(b) = a.bytes {
            args.insert("bytes", Value::from(b));
        }
        let tid = device_lane(a.device_id, a.stream_id);
        complete.push((
            (a.rank, tid, a.start_ns, a.duration_ns()),
            TraceEvent {
                name: a.name.clone(),
                cat: a.kind.as_str(),
                ph: "X",
                ts: us(a.start_ns),
                dur: Some(us(a.duration_ns())),
                pid: a.rank,
                tid,
                args,
            },
        ));
    }
    // Stable sort keeps the snapshot's canonical order among equal keys.
    complete.sort_by_key(|(k, _)| *k);
    let mut out: Vec<TraceEvent> = complete.into_iter().map(|(_, e)| e).collect();

    let mut counters: Vec<_> = s.counter_samples.iter().collect();
    counters
        .sort_by(|a, b| (a.rank, a.ts_ns, &a.name).cmp(&(b.rank, b.ts_ns, &b.name)).then(a.value.total_cmp(&b.value)));
    for c in counters {
        let mut args = BTreeMap::new();
        args.insert("value", Value::from(c.value));
        out.push(TraceEvent {
            name: c.name.clone(),
            cat: "counter",
            ph: "C",
            ts: us(c.ts_ns),
            dur: None,
            pid: c.rank,
            tid: COUNTER_LANE,
            args,
        });
    }
    out
}

/// Writes the events as a JSON array, one event per line.
pub fn write_trace_json<W: Write>(s: &Snapshot, mut w: W) -> std::io::Result<usize> {
    let events = trace_events(s);
    w.write_all(b"[")?;
    for (i, e) in events.iter().enumerate() {
        w.write_all(if i == 0 { b"\n" } else { b",\n" })?;
        serde_json::to_writer(&mut w, e)?;
    }
    w.write_all(b"\n]\n")?;
    w.flush()?;
    Ok(events.len())
}
