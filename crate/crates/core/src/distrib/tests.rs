use std::time::Duration;

use super::*;
use crate::tasking::suspend_on;

fn config() -> LocalityConfig {
    LocalityConfig { workers: 2, timeout: Duration::from_secs(10), ..Default::default() }
}

fn register_echo(world: &[Locality]) {
    for l in world {
        l.register_action("echo", |_, payload| Box::pin(async move { payload }));
    }
}

#[test]
fn echo_roundtrips_payload_including_to_self() {
    let world = inproc_world(2, &config()).unwrap();
    register_echo(&world);
    let payload: Vec<u8> = (0..=255).collect();
    for target in 0..2 {
        let t = world[0].remote_action(target, "echo", payload.clone()).unwrap();
        assert_eq!(t.wait_blocking_timeout(Duration::from_secs(5)).unwrap(), Ok(payload.clone()));
    }
    assert_eq!(world[0].message_stats().parcels_sent["echo"], 2);
    assert_eq!(world[0].message_stats().parcels_received["echo"], 1);
}

#[test]
fn unknown_target_and_action() {
    let world = inproc_world(2, &config()).unwrap();
    assert!(matches!(world[0].remote_action(5, "echo", vec![]), Err(DistribError::UnknownTarget(5))));
    let t = world[0].remote_action(1, "nope", vec![]).unwrap();
    assert_eq!(t.wait_blocking(), Err(RemoteError::UnknownAction("nope".into())));
}

#[test]
fn panicking_action_replies_with_error() {
    let world = inproc_world(1, &config()).unwrap();
    world[0].register_action("boom", |_, _| Box::pin(async { panic!("kaboom") }));
    let t = world[0].remote_action(0, "boom", vec![]).unwrap();
    assert_eq!(t.wait_blocking(), Err(RemoteError::ActionPanicked("kaboom".into())));
}

#[test]
fn n_actions_show_in_target_profile_with_schedule_parcel() {
    let world = inproc_world(2, &config()).unwrap();
    register_echo(&world);
    let h = world[0].handle();
    world[0]
        .runtime()
        .run_until_idle("sender", async move {
            let tokens: Vec<_> = (0..25).map(|i| h.remote_action(1, "echo", vec![i]).unwrap()).collect();
            for t in tokens {
                suspend_on(&t).await.unwrap().unwrap();
            }
        })
        .unwrap();
    on_each(&world, |l| l.quiesce().unwrap());
    let s = world[1].snapshot();
    assert_eq!(s.profile["echo"].calls, 25);
    assert_eq!(s.profile[SCHEDULE_PARCEL].calls, 25);
    assert_eq!(s.edges[&(SCHEDULE_PARCEL.to_string(), "echo".to_string())], 25);
    let echo = s.tasks.iter().find(|t| t.name == "echo").unwrap();
    let parent = s.tasks.iter().find(|t| Some(t.guid) == echo.parent).unwrap();
    assert_eq!(parent.name, SCHEDULE_PARCEL);
    assert_eq!(parent.parent, Some(Guid::ROOT));
}

#[test]
fn barrier_waits_for_last_entry() {
    let world = inproc_world(4, &config()).unwrap();
    let start = Instant::now();
    let exits = on_each(&world, |l| {
        std::thread::sleep(Duration::from_millis(20 * l.rank() as u64));
        let entered = start.elapsed();
        l.barrier().unwrap();
        (entered, start.elapsed())
    });
    let last_entry = exits.iter().map(|e| e.0).max().unwrap();
    assert!(exits.iter().all(|e| e.1 >= last_entry));
}

#[test]
fn consecutive_barriers_do_not_interleave() {
    let world = inproc_world(3, &config()).unwrap();
    let counter = AtomicU64::new(0);
    on_each(&world, |l| {
        for epoch in 0..20u64 {
            counter.fetch_add(1, Ordering::SeqCst);
            l.barrier().unwrap();
            // Everyone has incremented for this epoch and nobody for the next.
            assert_eq!(counter.load(Ordering::SeqCst), 3 * (epoch + 1));
            l.barrier().unwrap();
        }
    });
}

#[test]
fn single_locality_barrier_and_reduce_are_trivial() {
    let world = inproc_world(1, &config()).unwrap();
    world[0].barrier().unwrap();
    world[0].runtime().run_until_idle("x", async {}).unwrap();
    let r = world[0].reduce_profiles(0).unwrap().unwrap();
    assert_eq!(r.merged, world[0].snapshot());
}

#[test]
fn barrier_timeout_lists_missing_ranks() {
    let cfg = LocalityConfig { timeout: Duration::from_millis(50), ..config() };
    let world = inproc_world(3, &cfg).unwrap();
    match world[1].barrier() {
        Err(DistribError::Timeout { what: "barrier", missing }) => assert_eq!(missing, vec![0, 2]),
        other => panic!("{other:?}"),
    }
}

fn spawn_and_reduce(world: &[Locality]) -> Reduction {
    let results = on_each(world, |l| {
        let rt = l.runtime().clone();
        for _ in 0..10 {
            rt.spawn(Some("X"), async {}).unwrap();
        }
        l.quiesce().unwrap();
        l.reduce_profiles(0).unwrap()
    });
    results.into_iter().flatten().next().unwrap()
}

#[test]
fn reduce_world_to_non_zero_root() {
    let world = inproc_world(3, &config()).unwrap();
    for l in &world {
        l.runtime().spawn(Some("Y"), async {}).unwrap();
    }
    let r = reduce_world(&world, 2).unwrap();
    assert_eq!(r.merged.profile["Y"].calls, 3);
    assert_eq!(r.per_rank.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn reduce_four_inproc() {
    let world = inproc_world(4, &config()).unwrap();
    let r = spawn_and_reduce(&world);
    assert_eq!(r.merged.profile["X"].calls, 40);
    assert_eq!(r.per_rank.len(), 4);
    assert_eq!(r.merged.rank_label(), -1);
}

#[test]
fn reduce_four_tcp() {
    let world = tcp_loopback_world(4, &config()).unwrap();
    let r = spawn_and_reduce(&world);
    assert_eq!(r.merged.profile["X"].calls, 40);
    assert_eq!(r.merged.ranks.len(), 4);
}

#[test]
fn reduce_timeout_names_absent_ranks() {
    let cfg = LocalityConfig { timeout: Duration::from_millis(50), ..config() };
    let world = inproc_world(3, &cfg).unwrap();
    world[2].reduce_profiles(0).unwrap();
    match world[0].reduce_profiles(0) {
        Err(DistribError::Timeout { missing, .. }) => assert_eq!(missing, vec![1]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tcp_per_pair_fifo_and_stats_balance() {
    let world = tcp_loopback_world(3, &LocalityConfig { workers: 1, ..config() }).unwrap();
    let seen: Arc<Mutex<Vec<(u32, u32)>>> = Arc::default();
    for l in &world {
        let seen = seen.clone();
        l.register_action("seq", move |src, p| {
            let seen = seen.clone();
            Box::pin(async move {
                seen.lock().push((src, u32::from_le_bytes(p[..4].try_into().unwrap())));
                vec![]
            })
        });
    }
    on_each(&world, |l| {
        for i in 0..50u32 {
            let target = (l.rank() + 1) % 3;
            l.remote_action(target, "seq", i.to_le_bytes().to_vec()).unwrap();
        }
        l.quiesce().unwrap();
    });
    let seen = seen.lock();
    for src in 0..3 {
        let order: Vec<u32> = seen.iter().filter(|(s, _)| *s == src).map(|(_, i)| *i).collect();
        assert_eq!(order, (0..50).collect::<Vec<_>>());
    }
    let mut total = MessageStats::default();
    for l in &world {
        total.merge(&l.message_stats());
    }
    assert_eq!(total.total_sent(), total.total_received());
    assert_eq!(total.total_sent(), 150);
}
