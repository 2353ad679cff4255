//! Task-aware measurement: lifecycle timers keyed by task guid, per-name flat
//! profiles, counters, periodic OS monitoring, scatter sampling and device
//! activity collection.
//!
//! Timers follow a task across suspensions and workers, so a task that yields
//! while waiting is charged only for the time it actually ran. All entry
//! points are callable concurrently from any worker; malformed event
//! sequences are counted under `profiler.lifecycle_violations` and dropped.

mod monitor;
mod sampling;
mod snapshot;
mod timer;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::clock;
use crate::device::{ActivityRecord, ActivitySink};
use crate::tasking::{Guid, TaskIdentity, TaskObserver};

pub use monitor::{
    memory_usage, parse_status, process_cpu_time_ns, MemoryUsage, MonitorHandle, OsQueryError, CPU_UTILIZATION,
    PEAK_RSS_BYTES, RSS_BYTES,
};
pub use sampling::{sample_point, sampled_count, sampled_count_sequential, should_sample};
pub use snapshot::{
    CounterSample, CounterStats, FlatProfile, FlatProfileEntry, ScatterSample, Segment, Snapshot, TaskTrace,
    COUNTER_FIXED_SCALE,
};
pub use timer::{LifecycleViolation, TaskTimer, TimerState};

pub const LIFECYCLE_VIOLATIONS: &str = "profiler.lifecycle_violations";
pub const BAD_SAMPLES: &str = "profiler.bad_samples";
pub const MONITOR_FAILURES: &str = "profiler.monitor_failures";

pub const DEFAULT_SCATTER_FRACTION: f64 = 0.01;
pub const DEFAULT_MONITOR_PERIOD_MS: u64 = 100;

/// Which measurement categories are collected when the profiler is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureFlags {
    pub task_timers: bool,
    pub counters: bool,
    pub device_activity: bool,
    /// Keep per-instance active segments for trace export.
    pub task_trace: bool,
}

impl CaptureFlags {
    pub const ALL: CaptureFlags =
        CaptureFlags { task_timers: true, counters: true, device_activity: true, task_trace: true };
    pub const CPU_ONLY: CaptureFlags =
        CaptureFlags { task_timers: true, counters: true, device_activity: false, task_trace: true };
}

impl Default for CaptureFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone)]
pub struct ProfilerConfig {
    pub enabled: bool,
    pub scatter_fraction: f64,
    pub monitor_period_ms: u64,
    pub sampling_seed: u64,
    /// Locality rank recorded on every sample.
    pub rank: u32,
    pub capture: CaptureFlags,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            enabled: true,
            scatter_fraction: DEFAULT_SCATTER_FRACTION,
            monitor_period_ms: DEFAULT_MONITOR_PERIOD_MS,
            sampling_seed: 0,
            rank: 0,
            capture: CaptureFlags::ALL,
        }
    }
}

impl ProfilerConfig {
    pub fn disabled() -> Self {
        ProfilerConfig { enabled: false, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("scatter fraction {0} outside [0, 1]")]
    ScatterFraction(f64),
    #[error("monitor period must be positive")]
    MonitorPeriod,
}

const SHARDS: usize = 16;

#[derive(Default)]
struct Aggregate {
    profile: FlatProfile,
    scatter: Vec<ScatterSample>,
    edges: BTreeMap<(String, String), u64>,
    tasks: Vec<TaskTrace>,
}

#[derive(Default)]
struct CounterStore {
    stats: BTreeMap<String, CounterStats>,
    samples: Vec<CounterSample>,
}

pub struct Profiler {
    config: ProfilerConfig,
    timers: Vec<Mutex<HashMap<Guid, TaskTimer>>>,
    names: Mutex<HashMap<Guid, Arc<str>>>,
    aggregate: Mutex<Aggregate>,
    counters: Mutex<CounterStore>,
    activity: Mutex<Vec<ActivityRecord>>,
    diagnostics: Mutex<BTreeMap<String, u64>>,
    monitor: Mutex<monitor::MonitorState>,
}

impl Profiler {
    pub fn new(config: ProfilerConfig) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&config.scatter_fraction) {
            return Err(ConfigError::ScatterFraction(config.scatter_fraction));
        }
        if config.monitor_period_ms == 0 {
            return Err(ConfigError::MonitorPeriod);
        }
        clock::init();
        Ok(Profiler {
            config,
            timers: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            names: Mutex::new(HashMap::new()),
            aggregate: Mutex::new(Aggregate::default()),
            counters: Mutex::new(CounterStore::default()),
            activity: Mutex::new(Vec::new()),
            diagnostics: Mutex::new(BTreeMap::new()),
            monitor: Mutex::new(monitor::MonitorState::default()),
        })
    }

    pub fn config(&self) -> &ProfilerConfig {
        &self.config
    }

    pub fn is_enabled(&self) -> bool {
        self.config.enabled
    }

    fn timing(&self) -> bool {
        self.config.enabled && self.config.capture.task_timers
    }

    fn shard(&self, guid: Guid) -> &Mutex<HashMap<Guid, TaskTimer>> {
        &self.timers[(guid.0 as usize) % SHARDS]
    }

    fn bump(&self, diag: &str) {
        *self.diagnostics.lock().entry(diag.to_string()).or_insert(0) += 1;
    }

    fn violation(&self) {
        self.bump(LIFECYCLE_VIOLATIONS);
    }

    /// Applies `f` to the live timer for `guid`, counting a violation if the
    /// guid is unknown or the transition is illegal.
    fn with_timer(&self, guid: Guid, f: impl FnOnce(&mut TaskTimer) -> Result<(), LifecycleViolation>) {
        let ok = match self.shard(guid).lock().get_mut(&guid) {
            Some(t) => f(t).is_ok(),
            None => false,
        };
        if !ok {
            self.violation();
        }
    }

    pub fn on_task_create(&self, identity: &TaskIdentity, ts_ns: u64) {
        if !self.timing() {
            return;
        }
        let name: Arc<str> = Arc::from(identity.display_name());
        self.names.lock().insert(identity.guid, name);
        let fresh = {
            let mut shard = self.shard(identity.guid).lock();
            match shard.entry(identity.guid) {
                std::collections::hash_map::Entry::Occupied(_) => false,
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(TaskTimer::new(identity.clone(), ts_ns, self.config.capture.task_trace));
                    true
                }
            }
        };
        if !fresh {
            self.violation();
        }
    }

    pub fn on_task_start(&self, guid: Guid, worker: usize, ts_ns: u64) {
        if self.timing() {
            self.with_timer(guid, |t| t.start(ts_ns, worker));
        }
    }

    pub fn on_task_yield(&self, guid: Guid, ts_ns: u64) {
        if self.timing() {
            self.with_timer(guid, |t| t.yield_at(ts_ns));
        }
    }

    pub fn on_task_resume(&self, guid: Guid, worker: usize, ts_ns: u64) {
        if self.timing() {
            self.with_timer(guid, |t| t.resume(ts_ns, worker));
        }
    }

    pub fn on_task_stop(&self, guid: Guid, ts_ns: u64) {
        if !self.timing() {
            return;
        }
        let timer = {
            let mut shard = self.shard(guid).lock();
            match shard.get_mut(&guid).map(|t| t.stop(ts_ns)) {
                Some(Ok(())) => shard.remove(&guid),
                _ => None,
            }
        };
        match timer {
            Some(t) => self.fold_stopped(t),
            None => self.violation(),
        }
    }

    fn fold_stopped(&self, mut timer: TaskTimer) {
        let name = timer.identity.display_name().to_string();
        let parent_name = match timer.identity.parent {
            Some(p) if !p.is_root() => self.names.lock().get(&p).cloned(),
            _ => None,
        };
        let sampled = should_sample(timer.identity.guid, self.config.scatter_fraction, self.config.sampling_seed);
        let segments = timer.take_segments();
        let rank = self.config.rank;

        let mut agg = self.aggregate.lock();
        agg.profile
            .entry(name.clone())
            .or_insert_with(|| FlatProfileEntry::new(&name))
            .record(timer.accumulated_active_ns, timer.yield_count);
        if sampled {
            agg.scatter.push(ScatterSample {
                rank,
                name: name.clone(),
                start_ns: timer.first_start_ns,
                duration_ns: timer.accumulated_active_ns,
            });
        }
        if let Some(p) = parent_name {
            *agg.edges.entry((p.to_string(), name.clone())).or_insert(0) += 1;
        }
        if self.config.capture.task_trace {
            agg.tasks.push(TaskTrace {
                rank,
                guid: timer.identity.guid,
                parent: timer.identity.parent,
                name,
                segments,
            });
        }
    }

    /// Records a counter value at the current time. Non-finite values are
    /// dropped and counted under `profiler.bad_samples`.
    pub fn sample_counter(&self, name: &str, value: f64) {
        self.sample_counter_at(name, value, clock::now_ns());
    }

    pub fn sample_counter_at(&self, name: &str, value: f64, ts_ns: u64) {
        if !self.config.enabled || !self.config.capture.counters {
            return;
        }
        if !value.is_finite() {
            self.bump(BAD_SAMPLES);
            return;
        }
        let mut c = self.counters.lock();
        // Keep per-name timestamps non-decreasing even if callers race.
        let ts_ns = c.stats.get(name).map_or(ts_ns, |s| ts_ns.max(s.last_ts_ns));
        c.stats.entry(name.to_string()).or_insert_with(|| CounterStats::new(name)).record(ts_ns, value);
        c.samples.push(CounterSample { rank: self.config.rank, name: name.to_string(), ts_ns, value });
    }

    /// Queries the OS for CPU utilization, resident set size and its
    /// high-water mark, recording each as a counter sample.
    pub fn monitor_tick(&self) -> Vec<CounterSample> {
        if !self.config.enabled || !self.config.capture.counters {
            return Vec::new();
        }
        let now = clock::now_ns();
        let mut out = Vec::with_capacity(3);
        let mut st = self.monitor.lock();
        st.ticks += 1;
        match process_cpu_time_ns() {
            Ok(cpu) => {
                let wall = now.saturating_sub(st.last_wall_ns);
                let used = cpu.saturating_sub(st.last_cpu_ns);
                if wall > 0 {
                    out.push((CPU_UTILIZATION, used as f64 / wall as f64));
                }
                st.last_wall_ns = now;
                st.last_cpu_ns = cpu;
            }
            Err(_) => self.bump(MONITOR_FAILURES),
        }
        match memory_usage() {
            Ok(m) => {
                st.peak_rss = st.peak_rss.max(m.peak_rss_bytes).max(m.rss_bytes);
                out.push((RSS_BYTES, m.rss_bytes as f64));
                out.push((PEAK_RSS_BYTES, st.peak_rss as f64));
            }
            Err(_) => self.bump(MONITOR_FAILURES),
        }
        drop(st);
        out.into_iter()
            .map(|(name, value)| {
                self.sample_counter_at(name, value, now);
                CounterSample { rank: self.config.rank, name: name.to_string(), ts_ns: now, value }
            })
            .collect()
    }

    pub fn monitor_ticks(&self) -> u64 {
        self.monitor.lock().ticks
    }

    /// Starts the periodic monitor at the configured period.
    pub fn start_monitor(self: &Arc<Self>) -> MonitorHandle {
        MonitorHandle::start(self.clone(), Duration::from_millis(self.config.monitor_period_ms))
    }

    /// Copy of everything collected so far from stopped tasks.
    pub fn snapshot(&self) -> Snapshot {
        self.snapshot_with(false)
    }

    /// Like [`Profiler::snapshot`]; with `include_running` the active time of
    /// tasks not yet stopped is reported under `provisional`.
    pub fn snapshot_with(&self, include_running: bool) -> Snapshot {
        let mut s = Snapshot::default();
        if !self.config.enabled {
            return s;
        }
        s.ranks.insert(self.config.rank);
        {
            let agg = self.aggregate.lock();
            s.profile = agg.profile.clone();
            s.scatter = agg.scatter.clone();
            s.edges = agg.edges.clone();
            s.tasks = agg.tasks.clone();
        }
        {
            let c = self.counters.lock();
            s.counters = c.stats.clone();
            s.counter_samples = c.samples.clone();
        }
        s.activity = self.activity.lock().clone();
        s.diagnostics = self.diagnostics.lock().clone();
        if include_running {
            let now = clock::now_ns();
            for shard in &self.timers {
                for t in shard.lock().values() {
                    if matches!(t.state, TimerState::Running | TimerState::Yielded) {
                        let name = t.identity.display_name();
                        s.provisional
                            .entry(name.to_string())
                            .or_insert_with(|| FlatProfileEntry::new(name))
                            .record(t.active_until(now), t.yield_count);
                    }
                }
            }
        }
        s.normalize();
        s
    }

    pub fn diagnostic(&self, name: &str) -> u64 {
        self.diagnostics.lock().get(name).copied().unwrap_or(0)
    }
}

impl TaskObserver for Profiler {
    fn on_task_create(&self, identity: &TaskIdentity, ts_ns: u64) {
        Profiler::on_task_create(self, identity, ts_ns)
    }
    fn on_task_start(&self, guid: Guid, worker: usize, ts_ns: u64) {
        Profiler::on_task_start(self, guid, worker, ts_ns)
    }
    fn on_task_yield(&self, guid: Guid, ts_ns: u64) {
        Profiler::on_task_yield(self, guid, ts_ns)
    }
    fn on_task_resume(&self, guid: Guid, worker: usize, ts_ns: u64) {
        Profiler::on_task_resume(self, guid, worker, ts_ns)
    }
    fn on_task_stop(&self, guid: Guid, ts_ns: u64) {
        Profiler::on_task_stop(self, guid, ts_ns)
    }
}

impl ActivitySink for Profiler {
    fn deliver_activity(&self, records: Vec<ActivityRecord>) {
        if !self.wants_activity() {
            return;
        }
        let rank = self.config.rank;
        self.activity.lock().extend(records.into_iter().map(|mut r| {
            r.rank = rank;
            r
        }));
    }

    fn device_counter(&self, name: &str, value: f64) {
        self.sample_counter(name, value);
    }

    fn wants_activity(&self) -> bool {
        self.config.enabled && self.config.capture.device_activity
    }
}

#[cfg(test)]
mod tests;
