use std::sync::Arc;
use std::time::Duration;

use super::*;
use crate::tasking::{suspend_on, Runtime, SchedulerConfig};

const MS: u64 = 1_000_000;

fn ident(guid: u64, name: &str, parent: Option<u64>) -> TaskIdentity {
    TaskIdentity { guid: Guid(guid), name: Some(name.into()), parent: parent.map(Guid), locality: 0 }
}

fn profiler(config: ProfilerConfig) -> Arc<Profiler> {
    Arc::new(Profiler::new(config).unwrap())
}

#[test]
fn hundred_flux_tasks() {
    let p = profiler(ProfilerConfig::default());
    for g in 1..=100u64 {
        let active = g * 10_000;
        let t0 = g * 10 * MS;
        p.on_task_create(&ident(g, "flux", None), t0);
        p.on_task_start(Guid(g), 0, t0);
        p.on_task_stop(Guid(g), t0 + active);
    }
    let s = p.snapshot();
    let e = &s.profile["flux"];
    assert_eq!(e.calls, 100);
    assert_eq!(e.total_active_ns, (1..=100u64).map(|g| g * 10_000).sum::<u64>());
    assert_eq!((e.min_ns, e.max_ns), (10_000, 1_000_000));
    assert_eq!(s.diagnostic(LIFECYCLE_VIOLATIONS), 0);
}

#[test]
fn edges_count_children_by_parent_name() {
    let p = profiler(ProfilerConfig::default());
    p.on_task_create(&ident(1, "step", None), 0);
    p.on_task_start(Guid(1), 0, 0);
    for g in 2..=4 {
        p.on_task_create(&ident(g, "flux", Some(1)), 1);
        p.on_task_start(Guid(g), 0, 1);
        p.on_task_stop(Guid(g), 2);
    }
    p.on_task_stop(Guid(1), 3);
    let s = p.snapshot();
    assert_eq!(s.edges.get(&("step".to_string(), "flux".to_string())), Some(&3));
    assert_eq!(s.edges.len(), 1);
}

#[test]
fn yield_and_resume_are_excluded() {
    let p = profiler(ProfilerConfig::default());
    p.on_task_create(&ident(1, "t", None), 0);
    p.on_task_start(Guid(1), 0, 0);
    p.on_task_yield(Guid(1), 5 * MS);
    p.on_task_resume(Guid(1), 1, 55 * MS);
    p.on_task_stop(Guid(1), 60 * MS);
    let s = p.snapshot();
    assert_eq!(s.profile["t"].total_active_ns, 10 * MS);
    assert_eq!(s.profile["t"].total_yields, 1);
    assert_eq!(s.tasks[0].segments.len(), 2);
}

#[test]
fn violations_are_counted_and_ignored() {
    let p = profiler(ProfilerConfig::default());
    p.on_task_start(Guid(9), 0, 1);
    p.on_task_create(&ident(1, "t", None), 0);
    p.on_task_create(&ident(1, "t", None), 0);
    p.on_task_resume(Guid(1), 0, 2);
    p.on_task_start(Guid(1), 0, 3);
    p.on_task_stop(Guid(1), 4);
    p.on_task_stop(Guid(1), 5);
    let s = p.snapshot();
    assert_eq!(s.diagnostic(LIFECYCLE_VIOLATIONS), 4);
    assert_eq!(s.profile["t"].calls, 1);
}

#[test]
fn provisional_reports_running_tasks() {
    let p = profiler(ProfilerConfig::default());
    p.on_task_create(&ident(1, "long", None), 0);
    p.on_task_start(Guid(1), 0, clock::now_ns());
    let s = p.snapshot_with(true);
    assert!(s.profile.is_empty());
    assert_eq!(s.provisional["long"].calls, 1);
    assert!(p.snapshot().provisional.is_empty());
}

#[test]
fn disabled_profiler_records_nothing() {
    let p = profiler(ProfilerConfig::disabled());
    p.on_task_create(&ident(1, "t", None), 0);
    p.on_task_start(Guid(1), 0, 0);
    p.on_task_stop(Guid(1), 10);
    p.sample_counter("c", 1.0);
    assert!(p.monitor_tick().is_empty());
    assert!(p.snapshot().is_empty());
    assert!(p.snapshot().ranks.is_empty());
}

#[test]
fn counters_reject_non_finite() {
    let p = profiler(ProfilerConfig::default());
    p.sample_counter("c", 1.0);
    p.sample_counter("c", f64::NAN);
    p.sample_counter("c", f64::INFINITY);
    p.sample_counter("c", 3.0);
    let s = p.snapshot();
    let c = &s.counters["c"];
    assert_eq!((c.count, c.mean(), c.last), (2, 2.0, 3.0));
    assert_eq!(s.diagnostic(BAD_SAMPLES), 2);
    assert_eq!(s.counter_samples.len(), 2);
}

#[test]
fn rejects_bad_config() {
    let bad = ProfilerConfig { scatter_fraction: 1.5, ..Default::default() };
    assert!(matches!(Profiler::new(bad), Err(ConfigError::ScatterFraction(_))));
    let bad = ProfilerConfig { monitor_period_ms: 0, ..Default::default() };
    assert!(matches!(Profiler::new(bad), Err(ConfigError::MonitorPeriod)));
}

#[test]
fn scatter_follows_sampling_rule() {
    let config = ProfilerConfig { scatter_fraction: 0.3, sampling_seed: 11, ..Default::default() };
    let p = profiler(config);
    for g in 1..=2000u64 {
        p.on_task_create(&ident(g, "s", None), g);
        p.on_task_start(Guid(g), 0, g);
        p.on_task_stop(Guid(g), g + 1);
    }
    let expected = (1..=2000u64).filter(|&g| should_sample(Guid(g), 0.3, 11)).count();
    assert_eq!(p.snapshot().scatter.len(), expected);
}

// Replays a real run's events through a fresh profiler and checks that the
// live profile equals the sum over recorded per-instance segments.
#[test]
fn live_profile_matches_segment_replay() {
    let p = profiler(ProfilerConfig::default());
    let rt = Runtime::new(SchedulerConfig { worker_count: 3, ..Default::default() }, Some(p.clone())).unwrap();
    let h = rt.handle();
    let h2 = h.clone();
    rt.run_until_idle("root", async move {
        let mut tokens = Vec::new();
        for i in 0..40u64 {
            let h3 = h2.clone();
            tokens.push(
                h2.spawn(Some(if i % 2 == 0 { "even" } else { "odd" }), async move {
                    if i % 3 == 0 {
                        let t = h3.sleep(Duration::from_micros(200));
                        suspend_on(&t).await.unwrap();
                    }
                    std::hint::black_box((0..2000u64).sum::<u64>());
                })
                .unwrap(),
            );
        }
        for t in tokens {
            suspend_on(&t).await.unwrap();
        }
    })
    .unwrap();
    let s = p.snapshot();
    for name in ["even", "odd", "root"] {
        let from_segments: u64 = s
            .tasks
            .iter()
            .filter(|t| t.name == name)
            .flat_map(|t| t.segments.iter())
            .map(|seg| seg.end_ns - seg.start_ns)
            .sum();
        assert_eq!(s.profile[name].total_active_ns, from_segments, "{name}");
    }
    assert_eq!(s.profile["even"].calls + s.profile["odd"].calls, 40);
    assert_eq!(s.edges[&("root".to_string(), "even".to_string())], 20);
    assert_eq!(s.diagnostic(LIFECYCLE_VIOLATIONS), 0);
}

#[test]
fn monitor_ticks_at_period() {
    let config = ProfilerConfig { monitor_period_ms: 20, ..Default::default() };
    let p = profiler(config);
    let m = p.start_monitor();
    std::thread::sleep(Duration::from_millis(210));
    m.stop();
    let ticks = p.monitor_ticks();
    assert!((8..=11).contains(&ticks), "{ticks}");
    let s = p.snapshot();
    assert!(s.counters[RSS_BYTES].min > 0.0);
    assert!(s.counters[PEAK_RSS_BYTES].max >= s.counters[RSS_BYTES].max);
}
