//! Sequential vs rayon paths for the batch operations that have both.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use amtprof::profiler::{sampled_count, sampled_count_sequential, CounterStats, FlatProfileEntry, Snapshot};
use amtprof::workload::{mesh_state, mesh_state_sequential, Mesh, Refinement};

fn rank_snapshot(rank: u32) -> Snapshot {
    let mut s = Snapshot::default();
    s.ranks.insert(rank);
    for k in 0..64u64 {
        let name = format!("task_{k}");
        let mut e = FlatProfileEntry::new(&name);
        for c in 0..8 {
            e.record(1_000 + k * 17 + c * rank as u64, c);
        }
        s.profile.insert(name, e);
    }
    let mut c = CounterStats::new("queue_length");
    for t in 0..256 {
        c.record(t, (t % 13) as f64 + rank as f64 * 0.25);
    }
    s.counters.insert(c.name.clone(), c);
    s
}

fn folds(c: &mut Criterion) {
    let mut g = c.benchmark_group("snapshot_fold");
    for n in [16u32, 256] {
        let parts: Vec<Snapshot> = (0..n).map(rank_snapshot).collect();
        g.bench_with_input(BenchmarkId::new("sequential", n), &parts, |b, p| {
            b.iter(|| Snapshot::fold_sequential(black_box(p)))
        });
        g.bench_with_input(BenchmarkId::new("parallel", n), &parts, |b, p| b.iter(|| Snapshot::fold(black_box(p))));
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("sampled_count");
    let n = 100_000u64;
    g.bench_function("sequential", |b| b.iter(|| sampled_count_sequential(1, black_box(n), 0.01, 7)));
    g.bench_function("parallel", |b| b.iter(|| sampled_count(1, black_box(n), 0.01, 7)));
    g.finish();
}

fn mesh(c: &mut Criterion) {
    let mut g = c.benchmark_group("mesh_state");
    let m = Mesh::build(3, 1, 1, Refinement::Full, 8);
    g.bench_function("sequential", |b| b.iter(|| mesh_state_sequential(black_box(&m), 0, 0)));
    g.bench_function("parallel", |b| b.iter(|| mesh_state(black_box(&m), 0, 0)));
    g.finish();
}

criterion_group!(benches, folds, sampling, mesh);
criterion_main!(benches);
