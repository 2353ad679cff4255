use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::device::{ActivityKind, ActivityRecord};
use crate::profiler::{CounterSample, CounterStats, FlatProfileEntry, ScatterSample, Segment, TaskTrace};
use crate::tasking::Guid;

const NAMES: [&str; 5] = ["flux", "step", "a \"quoted\" name", "p2p_kernel", "ünïcode"];

fn random_snapshot(seed: u64) -> Snapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Snapshot::default();
    let rank = rng.gen_range(0..4u32);
    s.ranks.insert(rank);
    for name in NAMES {
        if !rng.gen_bool(0.7) {
            continue;
        }
        let mut e = FlatProfileEntry::new(name);
        for _ in 0..rng.gen_range(1..20) {
            e.record(rng.gen_range(0..10_000_000), rng.gen_range(0..3));
        }
        s.profile.insert(name.to_string(), e);
        if rng.gen_bool(0.3) {
            let mut p = FlatProfileEntry::new(name);
            p.record(rng.gen(), 0);
            s.provisional.insert(name.to_string(), p);
        }
    }
    for i in 0..rng.gen_range(0..4) {
        let name = format!("counter.{i}");
        let mut c = CounterStats::new(&name);
        for k in 0..rng.gen_range(1..10u64) {
            let v = rng.gen_range(-1e6..1e6);
            c.record(k * 100, v);
            s.counter_samples.push(CounterSample { rank, name: name.clone(), ts_ns: k * 100, value: v });
        }
        s.counters.insert(name, c);
    }
    for _ in 0..rng.gen_range(0..30) {
        s.scatter.push(ScatterSample {
            rank,
            name: NAMES[rng.gen_range(0..NAMES.len())].into(),
            start_ns: rng.gen(),
            duration_ns: rng.gen(),
        });
    }
    for _ in 0..rng.gen_range(0..5) {
        let key = (NAMES[rng.gen_range(0..5)].to_string(), NAMES[rng.gen_range(0..5)].to_string());
        *s.edges.entry(key).or_insert(0) += rng.gen_range(1..100);
    }
    for g in 1..rng.gen_range(1..20u64) {
        let mut t = rng.gen_range(0..1_000_000u64);
        let segments = (0..rng.gen_range(1..4))
            .map(|_| {
                let start = t + rng.gen_range(0..1000);
                t = start + rng.gen_range(0..1000);
                Segment { start_ns: start, end_ns: t, worker: rng.gen_range(0..4) }
            })
            .collect();
        s.tasks.push(TaskTrace {
            rank,
            guid: Guid(g),
            parent: rng.gen_bool(0.5).then(|| Guid(rng.gen_range(0..g))),
            name: NAMES[rng.gen_range(0..5)].into(),
            segments,
        });
    }
    for _ in 0..rng.gen_range(0..20) {
        let kind = ActivityKind::ALL[rng.gen_range(0..6)];
        let start = rng.gen_range(0..1_000_000u64);
        s.activity.push(ActivityRecord {
            kind,
            name: kind.as_str().into(),
            rank,
            device_id: rng.gen_range(0..2),
            stream_id: rng.gen_range(0..128),
            start_ns: start,
            end_ns: start + rng.gen_range(0..5000),
            bytes: (kind != ActivityKind::Kernel).then(|| rng.gen_range(1..1 << 30)),
            correlation_guid: Guid(rng.gen()),
        });
    }
    if rng.gen_bool(0.5) {
        s.diagnostics.insert("profiler.lifecycle_violations".into(), rng.gen_range(0..5));
    }
    s.normalize();
    s
}

#[test]
fn codec_roundtrips_empty() {
    let s = Snapshot::default();
    assert_eq!(decode_snapshot(&encode_snapshot(&s)).unwrap(), s);
}

proptest! {
    #[test]
    fn codec_roundtrips_random(seed in any::<u64>()) {
        let s = random_snapshot(seed);
        prop_assert_eq!(decode_snapshot(&encode_snapshot(&s)).unwrap(), s);
    }

    #[test]
    fn truncation_is_an_error(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = encode_snapshot(&random_snapshot(seed));
        let n = (bytes.len() as f64 * cut) as usize;
        let err = decode_snapshot(&bytes[..n]).unwrap_err();
        prop_assert!(err.offset <= n);
    }
}

#[test]
fn codec_rejects_bad_header_and_trailing_bytes() {
    let mut bytes = encode_snapshot(&Snapshot::default());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(decode_snapshot(&bad).unwrap_err().kind, DecodeErrorKind::BadMagic);
    bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(decode_snapshot(&bad).unwrap_err(), DecodeError { offset: 4, kind: DecodeErrorKind::Version(9) });
    bytes.push(0);
    assert_eq!(decode_snapshot(&bytes).unwrap_err().kind, DecodeErrorKind::Trailing(1));
    assert_eq!(decode_snapshot(b"TS").unwrap_err().kind, DecodeErrorKind::Truncated);
}

fn snapshot_with_task(start: u64, active: u64) -> Snapshot {
    let mut s = Snapshot::default();
    s.ranks.insert(0);
    s.tasks.push(TaskTrace {
        rank: 0,
        guid: Guid(7),
        parent: Some(Guid(0)),
        name: "t".into(),
        segments: vec![Segment { start_ns: start, end_ns: start + active, worker: 2 }],
    });
    s
}

#[test]
fn trace_unit_conversion() {
    let mut out = Vec::new();
    let n = write_trace_json(&snapshot_with_task(1000, 2500), &mut out).unwrap();
    assert_eq!(n, 1);
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    let e = &v[0];
    assert_eq!((e["ph"].as_str(), e["ts"].as_f64(), e["dur"].as_f64()), (Some("X"), Some(1.0), Some(2.5)));
    assert_eq!((e["pid"].as_u64(), e["tid"].as_u64(), e["args"]["guid"].as_u64()), (Some(0), Some(2), Some(7)));
}

#[test]
fn trace_yielded_task_has_one_event_per_segment() {
    let mut s = snapshot_with_task(0, 10);
    s.tasks[0].segments.push(Segment { start_ns: 50, end_ns: 60, worker: 1 });
    let ev = trace_events(&s);
    assert_eq!(ev.len(), 2);
    assert!(ev.iter().all(|e| e.args["guid"] == 7));
}

#[test]
fn trace_counters_and_lanes() {
    let s = random_snapshot(5);
    let ev = trace_events(&s);
    let c = ev.iter().filter(|e| e.ph == "C").count();
    assert_eq!(c, s.counter_samples.len());
    for a in &s.activity {
        let lane = device_lane(a.device_id, a.stream_id);
        assert!(ev.iter().any(|e| e.tid == lane && e.cat == a.kind.as_str()));
    }
    assert_eq!(device_lane(1, 5), 11_005);
}

#[test]
fn trace_is_sorted_per_lane() {
    for seed in 0..20 {
        let mut last = std::collections::HashMap::new();
        for e in trace_events(&random_snapshot(seed)) {
            let prev = last.insert((e.pid, e.tid), e.ts).unwrap_or(f64::NEG_INFINITY);
            assert!(prev <= e.ts, "{e:?}");
        }
    }
}

#[test]
fn empty_csvs_are_header_only() {
    let s = Snapshot::default();
    let mut p = Vec::new();
    let mut x = Vec::new();
    assert_eq!(write_profile_csv(&s, &mut p).unwrap(), 0);
    assert_eq!(write_scatter_csv(&s, &mut x).unwrap(), 0);
    assert_eq!(String::from_utf8(p).unwrap(), "rank,name,calls,total_ns,mean_ns,min_ns,max_ns,yields\n");
    assert_eq!(String::from_utf8(x).unwrap(), "rank,name,start_ns,duration_ns\n");
}

#[test]
fn one_profile_row_is_exact() {
    let mut s = Snapshot::default();
    s.ranks.insert(3);
    let mut e = FlatProfileEntry::new("flux");
    e.record(1_000_001, 1);
    e.record(2_000_000, 0);
    s.profile.insert("flux".into(), e);
    let mut out = Vec::new();
    write_profile_csv(&s, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().nth(1), Some("3,flux,2,3000001,1500000,1000001,2000000,1"));
}

#[test]
fn csv_parse_back_reproduces_fields() {
    for seed in 0..30 {
        let s = random_snapshot(seed);
        let mut p = Vec::new();
        write_profile_csv(&s, &mut p).unwrap();
        let rows = read_profile_csv(p.as_slice()).unwrap();
        assert_eq!(rows_to_profile(&rows), s.profile);
        assert!(rows.iter().all(|r| r.rank == s.rank_label()));

        let mut x = Vec::new();
        write_scatter_csv(&s, &mut x).unwrap();
        let back = read_scatter_csv(x.as_slice()).unwrap();
        let want: Vec<ScatterRow> = s.scatter.iter().map(ScatterRow::from).collect();
        assert_eq!(back, want);
    }
}

#[test]
fn csv_rejects_wrong_header() {
    assert!(read_profile_csv("a,b\n1,2\n".as_bytes()).is_err());
}

fn dot_counts(text: &str) -> (usize, usize) {
    let edges = text.lines().filter(|l| l.contains(" -> ")).count();
    let nodes = text.lines().filter(|l| l.trim_start().starts_with('"') && !l.contains(" -> ")).count();
    (nodes, edges)
}

#[test]
fn dot_single_root() {
    let mut s = Snapshot::default();
    s.profile.insert("root".into(), FlatProfileEntry::new("root"));
    let mut out = Vec::new();
    assert_eq!(write_taskgraph_dot(&s, &mut out).unwrap(), (1, 0));
    assert_eq!(dot_counts(&String::from_utf8(out).unwrap()), (1, 0));
}

#[test]
fn dot_step_children() {
    let mut s = Snapshot::default();
    for n in ["step", "flux", "reconstruct"] {
        let mut e = FlatProfileEntry::new(n);
        e.record(10, 0);
        s.profile.insert(n.into(), e);
    }
    s.edges.insert(("step".into(), "flux".into()), 3);
    s.edges.insert(("step".into(), "reconstruct".into()), 3);
    let mut a = Vec::new();
    let mut b = Vec::new();
    assert_eq!(write_taskgraph_dot(&s, &mut a).unwrap(), (3, 2));
    write_taskgraph_dot(&s, &mut b).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(dot_counts(&text), (3, 2));
    assert!(text.contains("\"step\" -> \"flux\" [label=\"3\"];"));
    let fl = text.find("\"flux\" [").unwrap();
    let st = text.find("\"step\" [").unwrap();
    assert!(fl < st);
}

fn profile_with(name: &str, mean_ns: u64) -> crate::profiler::FlatProfile {
    let mut e = FlatProfileEntry::new(name);
    e.record(mean_ns, 0);
    [(name.to_string(), e)].into_iter().collect()
}

#[test]
fn diff_flags_large_ratio_first() {
    let mut a = profile_with("async", 46_000);
    let mut b = profile_with("async", 10_000);
    a.extend(profile_with("flux", 1000));
    b.extend(profile_with("flux", 1100));
    let rows = diff_profiles(&a, &b, 2.0).unwrap();
    assert_eq!(rows[0].name, "async");
    assert!((rows[0].mean_ratio.unwrap() - 4.6).abs() < 1e-12);
    assert!(rows[0].flagged);
    assert!(!rows[1].flagged);
}

#[test]
fn diff_identity_and_one_sided() {
    let s = random_snapshot(3);
    let rows = diff_profiles(&s.profile, &s.profile, 1.5).unwrap();
    assert!(rows.iter().all(|r| r.mean_ratio == Some(1.0) && !r.flagged));

    let a = profile_with("only_a", 5);
    let mut b = profile_with("only_b", 5);
    b.extend(profile_with("both", 5));
    let mut a2 = a.clone();
    a2.extend(profile_with("both", 10));
    let rows = diff_profiles(&a2, &b, 2.0).unwrap();
    assert_eq!(rows[0].name, "both");
    assert!(rows[1].one_sided() && rows[2].one_sided());
    assert!(diff_profiles(&a, &b, 1.0).is_err());
}

#[test]
fn scatter_never_exceeds_population() {
    let mut s = Snapshot::default();
    let mut e = FlatProfileEntry::new("x");
    for i in 0..50 {
        e.record(i, 0);
        if i % 7 == 0 {
            s.scatter.push(ScatterSample { rank: 0, name: "x".into(), start_ns: i, duration_ns: i });
        }
    }
    s.profile.insert("x".into(), e);
    let sampled = s.scatter.iter().filter(|x| x.name == "x").count() as u64;
    assert!(sampled <= s.profile["x"].calls);
}

#[test]
fn files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let s = random_snapshot(9);
    let p = dir.path().join("s.bin");
    write_snapshot_file(&s, &p).unwrap();
    assert_eq!(read_snapshot_file(&p).unwrap(), s);
    let c = dir.path().join("p.csv");
    write_profile_csv_file(&s, &c).unwrap();
    assert_eq!(rows_to_profile(&read_profile_csv_file(&c).unwrap()), s.profile);
    assert!(matches!(read_snapshot_file(&dir.path().join("missing")), Err(ExportError::Io { .. })));
}
