//! Profile data and its merge algebra.
//!
//! Merging is associative and commutative with the empty snapshot as
//! identity: numeric aggregates use integer arithmetic (counter sums are kept
//! in fixed point) and every list is brought into a canonical order.

use std::collections::{BTreeMap, BTreeSet};

use crate::device::ActivityRecord;
use crate::tasking::Guid;

/// Per-name aggregate over stopped task instances. Times are inclusive
/// active nanoseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatProfileEntry {
    pub name: String,
    pub calls: u64,
    pub total_active_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub total_yields: u64,
}

impl FlatProfileEntry {
    pub fn new(name: &str) -> Self {
        FlatProfileEntry {
            name: name.to_string(),
            calls: 0,
            total_active_ns: 0,
            min_ns: u64::MAX,
            max_ns: 0,
            total_yields: 0,
        }
    }

    pub fn record(&mut self, active_ns: u64, yields: u64) {
        self.calls += 1;
        self.total_active_ns += active_ns;
        self.min_ns = self.min_ns.min(active_ns);
        self.max_ns = self.max_ns.max(active_ns);
        self.total_yields += yields;
    }

    pub fn mean_ns(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.total_active_ns as f64 / self.calls as f64
        }
    }

    pub fn merge(&mut self, other: &FlatProfileEntry) {
        self.calls += other.calls;
        self.total_active_ns += other.total_active_ns;
        self.min_ns = self.min_ns.min(other.min_ns);
        self.max_ns = self.max_ns.max(other.max_ns);
        self.total_yields += other.total_yields;
    }
}

pub type FlatProfile = BTreeMap<String, FlatProfileEntry>;

/// Counter sums are accumulated as integers scaled by 2^32 so that merging
/// partial sums is exact regardless of grouping.
pub const COUNTER_FIXED_SCALE: f64 = 4294967296.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CounterStats {
    pub name: String,
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub sum_fixed: i128,
    pub last: f64,
    pub last_ts_ns: u64,
}

impl CounterStats {
    pub fn new(name: &str) -> Self {
        CounterStats {
            name: name.to_string(),
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            sum_fixed: 0,
            last: 0.0,
            last_ts_ns: 0,
        }
    }

    pub fn to_fixed(value: f64) -> i128 {
        (value * COUNTER_FIXED_SCALE).round() as i128
    }

    pub fn record(&mut self, ts_ns: u64, value: f64) {
        self.count += 1;
        self.min = self.min.min(value);
        self.max = self.max.max(value);
        self.sum_fixed += Self::to_fixed(value);
        if self.count == 1 || later(ts_ns, value, self.last_ts_ns, self.last) {
            self.last = value;
            self.last_ts_ns = ts_ns;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let m = (self.sum_fixed as f64 / COUNTER_FIXED_SCALE) / self.count as f64;
        // Rounding to fixed point can push the mean a hair outside the range.
        m.clamp(self.min, self.max)
    }

    pub fn merge(&mut self, other: &CounterStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 || later(other.last_ts_ns, other.last, self.last_ts_ns, self.last) {
            self.last = other.last;
            self.last_ts_ns = other.last_ts_ns;
        }
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.sum_fixed += other.sum_fixed;
    }
}

// Total order on (timestamp, value) so "last" is well defined across ranks.
fn later(ts_a: u64, v_a: f64, ts_b: u64, v_b: f64) -> bool {
    ts_a > ts_b || (ts_a == ts_b && v_a.total_cmp(&v_b).is_gt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterSample {
    pub rank: u32,
    pub name: String,
    pub ts_ns: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterSample {
    pub rank: u32,
    pub name: String,
    pub start_ns: u64,
    pub duration_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Segment {
    pub start_ns: u64,
    pub end_ns: u64,
    pub worker: u32,
}

/// Per-instance record of a stopped task, used for trace export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTrace {
    pub rank: u32,
    pub guid: Guid,
    pub parent: Option<Guid>,
    pub name: String,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    /// Localities whose data is folded into this snapshot.
    pub ranks: BTreeSet<u32>,
    pub profile: FlatProfile,
    /// Tasks still running or suspended at snapshot time, if requested.
    pub provisional: FlatProfile,
    pub counters: BTreeMap<String, CounterStats>,
    pub counter_samples: Vec<CounterSample>,
    pub scatter: Vec<ScatterSample>,
    /// (parent name, child name) -> number of stopped children.
    pub edges: BTreeMap<(String, String), u64>,
    pub tasks: Vec<TaskTrace>,
    pub activity: Vec<ActivityRecord>,
    pub diagnostics: BTreeMap<String, u64>,
}

fn merge_profile(into: &mut FlatProfile, from: &FlatProfile) {
    for (name, e) in from {
        into.entry(name.clone()).or_insert_with(|| FlatProfileEntry::new(name)).merge(e);
    }
}

impl Snapshot {
    pub fn is_empty(&self) -> bool {
        self.profile.is_empty()
            && self.provisional.is_empty()
            && self.counters.is_empty()
            && self.counter_samples.is_empty()
            && self.scatter.is_empty()
            && self.edges.is_empty()
            && self.tasks.is_empty()
            && self.activity.is_empty()
    }

    /// The rank column value for exports: the single contributing rank, or
    /// -1 for a snapshot aggregated over several localities (or none).
    pub fn rank_label(&self) -> i64 {
        match self.ranks.len() {
            1 => *self.ranks.iter().next().unwrap() as i64,
            _ => -1,
        }
    }

    /// Sorts every list into its canonical order.
    pub fn normalize(&mut self) {
        self.counter_samples.sort_by(|a, b| {
            (a.rank, &a.name, a.ts_ns).cmp(&(b.rank, &b.name, b.ts_ns)).then(a.value.total_cmp(&b.value))
        });
        self.scatter.sort_by(|a, b| {
            (a.rank, a.start_ns, &a.name, a.duration_ns).cmp(&(b.rank, b.start_ns, &b.name, b.duration_ns))
        });
        self.tasks.sort_by(|a, b| {
            (a.rank, a.guid)
                .cmp(&(b.rank, b.guid))
                .then_with(|| (&a.name, a.parent, &a.segments).cmp(&(&b.name, b.parent, &b.segments)))
        });
        self.activity.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    }

    pub fn merge(mut self, other: &Snapshot) -> Snapshot {
        self.merge_in(other);
        self
    }

    pub fn merge_in(&mut self, other: &Snapshot) {
        self.ranks.extend(other.ranks.iter().copied());
        merge_profile(&mut self.profile, &other.profile);
        merge_profile(&mut self.provisional, &other.provisional);
        for (name, c) in &other.counters {
            self.counters.entry(name.clone()).or_insert_with(|| CounterStats::new(name)).merge(c);
        }
        self.counter_samples.extend(other.counter_samples.iter().cloned());
        self.scatter.extend(other.scatter.iter().cloned());
        for (k, v) in &other.edges {
            *self.edges.entry(k.clone()).or_insert(0) += v;
        }
        self.tasks.extend(other.tasks.iter().cloned());
        self.activity.extend(other.activity.iter().cloned());
        for (k, v) in &other.diagnostics {
            *self.diagnostics.entry(k.clone()).or_insert(0) += v;
        }
        self.normalize();
    }

    /// Left fold over `parts`, one at a time.
    pub fn fold_sequential<'a, I: IntoIterator<Item = &'a Snapshot>>(parts: I) -> Snapshot {
        let mut acc = Snapshot::default();
        for p in parts {
            acc.merge_in(p);
        }
        acc
    }

    /// Folds many snapshots. With the `parallel` feature this is a tree
    /// reduction on the rayon pool, which merge associativity makes
    /// equivalent to the sequential fold.
    pub fn fold(parts: &[Snapshot]) -> Snapshot {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            parts
                .par_iter()
                .fold(Snapshot::default, |mut acc, s| {
                    acc.merge_in(s);
                    acc
                })
                .reduce(Snapshot::default, |a, b| a.merge(&b))
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self::fold_sequential(parts)
        }
    }

    pub fn diagnostic(&self, name: &str) -> u64 {
        self.diagnostics.get(name).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, calls: u64, total: u64, min: u64, max: u64) -> FlatProfileEntry {
        FlatProfileEntry { name: name.into(), calls, total_active_ns: total, min_ns: min, max_ns: max, total_yields: 0 }
    }

    #[test]
    fn merge_example() {
        let mut a = Snapshot::default();
        a.profile.insert("X".into(), entry("X", 3, 30_000_000, 5_000_000, 15_000_000));
        let mut b = Snapshot::default();
        b.profile.insert("X".into(), entry("X", 1, 10_000_000, 10_000_000, 10_000_000));
        let m = a.merge(&b);
        let x = &m.profile["X"];
        assert_eq!(x.calls, 4);
        assert_eq!(x.total_active_ns, 40_000_000);
        assert_eq!(x.mean_ns(), 10_000_000.0);
        assert_eq!((x.min_ns, x.max_ns), (5_000_000, 15_000_000));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut a = Snapshot::default();
        a.ranks.insert(2);
        a.profile.insert("X".into(), entry("X", 2, 10, 4, 6));
        let mut c = CounterStats::new("c");
        c.record(5, 1.5);
        a.counters.insert("c".into(), c);
        a.normalize();
        assert_eq!(a.clone().merge(&Snapshot::default()), a);
        assert_eq!(Snapshot::default().merge(&a), a);
    }

    #[test]
    fn counter_stats_examples() {
        let mut c = CounterStats::new("c");
        c.record(1, 1.0);
        c.record(2, 3.0);
        assert_eq!((c.count, c.min, c.max, c.mean(), c.last), (2, 1.0, 3.0, 2.0, 3.0));

        let mut big = CounterStats::new("k");
        for k in 1..=10_000u64 {
            big.record(k, k as f64);
        }
        assert_eq!(big.mean(), 5000.5);
    }

    #[test]
    fn last_prefers_latest_timestamp_in_either_merge_order() {
        let mut a = CounterStats::new("c");
        a.record(10, 1.0);
        let mut b = CounterStats::new("c");
        b.record(20, 2.0);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.last, 2.0);
    }

    #[test]
    fn rank_label() {
        let mut s = Snapshot::default();
        assert_eq!(s.rank_label(), -1);
        s.ranks.insert(3);
        assert_eq!(s.rank_label(), 3);
        s.ranks.insert(4);
        assert_eq!(s.rank_label(), -1);
    }
}
