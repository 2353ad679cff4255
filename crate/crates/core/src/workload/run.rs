use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::cells::{all_faces, compute_cells};
use super::config::{CommMode, WorkloadConfig};
use super::mesh::{opposite, Mesh, FACES};
use super::names::*;
use super::WorkloadError;
use crate::distrib::{Locality, LocalityHandle};
use crate::tasking::{current_task, make_promise, suspend_on, CompletionToken, Guid, Promise};

/// Promise slots keyed by `K`, created by whichever side arrives first.
struct Board<K, V> {
    slots: Mutex<HashMap<K, Promise<V>>>,
}

impl<K: Hash + Eq, V: Clone> Board<K, V> {
    fn new() -> Self {
        Board { slots: Mutex::new(HashMap::new()) }
    }

    fn publish(&self, key: K, value: V) {
        let mut slots = self.slots.lock();
        let p = slots.entry(key).or_insert_with(|| make_promise().0);
        let _ = p.fulfill(value);
    }

    fn token(&self, key: K) -> CompletionToken<V> {
        self.slots.lock().entry(key).or_insert_with(|| make_promise().0).token()
    }

    fn retain(&self, keep: impl Fn(&K) -> bool) {
        self.slots.lock().retain(|k, _| keep(k));
    }
}

/// (grid, face, step, iteration)
type GhostKey = (u32, u8, u32, u32);
/// (grid, step, iteration)
type BoundaryKey = (u32, u32, u32);
type Faces = Arc<[Vec<f64>; FACES]>;

fn encode_ghost(key: GhostKey, values: &[f64]) -> Vec<u8> {
    let mut b = Vec::with_capacity(17 + values.len() * 8);
    b.extend_from_slice(&key.0.to_le_bytes());
    b.push(key.1);
    b.extend_from_slice(&key.2.to_le_bytes());
    b.extend_from_slice(&key.3.to_le_bytes());
    b.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn decode_ghost(b: &[u8]) -> Option<(GhostKey, Vec<f64>)> {
    let u32_at = |i: usize| Some(u32::from_le_bytes(b.get(i..i + 4)?.try_into().ok()?));
    let key = (u32_at(0)?, *b.get(4)?, u32_at(5)?, u32_at(9)?);
    let n = u32_at(13)? as usize;
    let body = b.get(17..)?;
    if body.len() != n * 8 {
        return None;
    }
    Some((key, body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
}

#[derive(Debug, Clone, Copy)]
struct GridKernels {
    reconstruct_ns: u64,
    flux_ns: u64,
    gravity: &'static str,
    gravity_ns: u64,
}

fn kernel_duration(cfg: &WorkloadConfig, grid: u32, kernel: &str) -> u64 {
    let mut h = cfg.seed ^ 0x5851_F42D_4C95_7F2D ^ ((grid as u64) << 32);
    for b in kernel.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    h = (h ^ (h >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    cfg.kernel_min_ns + h % (cfg.kernel_max_ns - cfg.kernel_min_ns + 1)
}

/// Gravity kernel for a sub-grid: root, refined, next to refinement, or plain.
pub fn gravity_kernel(mesh: &Mesh, grid: u32) -> &'static str {
    let g = &mesh.grids[grid as usize];
    if g.is_root {
        MULTIPOLE_ROOT_KERNEL
    } else if g.has_children {
        MULTIPOLE_KERNEL
    } else if mesh.has_refined_neighbor(g) {
        P2M_KERNEL
    } else {
        P2P_KERNEL
    }
}

fn spin(ns: u64) {
    let end = Instant::now() + Duration::from_nanos(ns);
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

struct Local {
    loc: LocalityHandle,
    mesh: Arc<Mesh>,
    cfg: Arc<WorkloadConfig>,
    kernels: HashMap<u32, GridKernels>,
    ghosts: Arc<Board<GhostKey, Arc<Vec<f64>>>>,
    boundaries: Board<BoundaryKey, Faces>,
    log: Mutex<BTreeMap<(u32, u32), Vec<u64>>>,
    launches: AtomicU64,
}

impl Local {
    fn new(loc: LocalityHandle, mesh: Arc<Mesh>, cfg: Arc<WorkloadConfig>) -> Arc<Self> {
        let kernels = mesh
            .owned_by(loc.rank())
            .map(|g| {
                let gravity = gravity_kernel(&mesh, g.id);
                let k = GridKernels {
                    reconstruct_ns: kernel_duration(&cfg, g.id, RECONSTRUCT_KERNEL),
                    flux_ns: kernel_duration(&cfg, g.id, FLUX_KERNEL),
                    gravity,
                    gravity_ns: kernel_duration(&cfg, g.id, gravity),
                };
                (g.id, k)
            })
            .collect();
        let ghosts: Arc<Board<GhostKey, Arc<Vec<f64>>>> = Arc::new(Board::new());
        let board = ghosts.clone();
        loc.register_action(SET_GHOST, move |_, payload| {
            if let Some((key, values)) = decode_ghost(&payload) {
                board.publish(key, Arc::new(values));
            }
            Box::pin(async { Vec::new() })
        });
        Arc::new(Local {
            loc,
            mesh,
            cfg,
            kernels,
            ghosts,
            boundaries: Board::new(),
            log: Mutex::new(BTreeMap::new()),
            launches: AtomicU64::new(0),
        })
    }

    fn via_parcel(&self, neighbor: u32) -> bool {
        self.cfg.comm_mode == CommMode::RemoteAction || self.mesh.grids[neighbor as usize].owner != self.loc.rank()
    }

    fn collect_boundaries(&self, grid: u32, step: u32, iter: u32) {
        let n = self.mesh.n;
        let faces: Faces = Arc::new(all_faces(&compute_cells(grid, step, iter, n), n));
        let g = &self.mesh.grids[grid as usize];
        for (f, nb) in g.neighbors.iter().enumerate() {
            let Some(nb) = *nb else { continue };
            if self.via_parcel(nb) {
                let key = (nb, opposite(f) as u8, step, iter);
                let owner = self.mesh.grids[nb as usize].owner;
                // Fire and forget: the neighbour waits on the ghost itself.
                self.loc
                    .remote_action(owner, SET_GHOST, encode_ghost(key, &faces[f]))
                    .expect("ghost parcel send failed");
            }
        }
        if self.cfg.comm_mode == CommMode::DirectLocal {
            self.boundaries.publish((grid, step, iter), faces);
        }
    }

    async fn launch(&self, name: &str, duration_ns: u64) {
        let device = self.loc.device();
        let me = current_task().unwrap_or(Guid::ROOT);
        let token = device.launch_kernel(name, device.next_stream(), duration_ns, me).expect("kernel launch");
        self.launches.fetch_add(1, Ordering::Relaxed);
        suspend_on(&token).await.expect("inside task");
    }

    async fn compute_fluxes(&self, grid: u32) {
        let k = self.kernels[&grid];
        self.launch(RECONSTRUCT_KERNEL, k.reconstruct_ns).await;
        self.launch(FLUX_KERNEL, k.flux_ns).await;
    }

    async fn execute_step(self: Arc<Self>, grid: u32, step: u32) {
        let rt = self.loc.runtime().clone();
        let neighbors = self.mesh.grids[grid as usize].neighbors;
        let mut ghost_bits = Vec::new();
        for iter in 0..self.cfg.hydro_iterations {
            let me = self.clone();
            let t = rt
                .spawn(Some(COLLECT_HYDRO_BOUNDARIES), async move { me.collect_boundaries(grid, step, iter) })
                .expect("spawn");
            suspend_on(&t).await.expect("inside task");

            for (f, nb) in neighbors.iter().enumerate() {
                let Some(nb) = *nb else { continue };
                let values: Vec<f64> = if self.via_parcel(nb) {
                    let _hold = rt.hold();
                    let token = self.ghosts.token((grid, f as u8, step, iter));
                    suspend_on(&token).await.expect("inside task").to_vec()
                } else {
                    let token = self.boundaries.token((nb, step, iter));
                    suspend_on(&token).await.expect("inside task")[opposite(f)].clone()
                };
                ghost_bits.extend(values.iter().map(|v| v.to_bits()));
            }

            let me = self.clone();
            let t = rt.spawn(Some(COMPUTE_FLUXES), async move { me.compute_fluxes(grid).await }).expect("spawn");
            suspend_on(&t).await.expect("inside task");
        }
        let k = self.kernels[&grid];
        for _ in 0..self.cfg.gravity_iterations {
            self.launch(k.gravity, k.gravity_ns).await;
        }
        self.log.lock().insert((grid, step), ghost_bits);
    }
}

/// What a run produced besides the profiles.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    /// Computation time: from the start barrier to the end of the last step.
    pub elapsed: Duration,
    /// Ghost-layer bits per (grid, step), all hydro iterations concatenated.
    pub ghost_log: BTreeMap<(u32, u32), Vec<u64>>,
    pub ghost_parcels: u64,
    pub kernel_launches: u64,
    /// Completed tasks per name, summed over localities.
    pub completion_counts: BTreeMap<String, u64>,
}

fn regrid_once(local: &Arc<Local>) -> Result<(), WorkloadError> {
    let rt = local.loc.runtime().clone();
    let cost = local.cfg.regrid_task_ns;
    let inner = rt.clone();
    rt.spawn(Some(CHECK_FOR_REFINEMENT), async move {
        spin(cost);
        let t = inner
            .spawn(Some(REGRID_GATHER), async move {
                spin(cost);
            })
            .expect("spawn");
        suspend_on(&t).await.expect("inside task");
        let t = inner
            .spawn(Some(REGRID_SCATTER), async move {
                spin(cost);
            })
            .expect("spawn");
        suspend_on(&t).await.expect("inside task");
    })?;
    rt.wait_idle()?;
    Ok(())
}

fn run_locality(local: &Arc<Local>, loc: &Locality) -> Result<Duration, WorkloadError> {
    let rt = loc.runtime().clone();
    let owned: Vec<u32> =
        local.kernels.keys().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    loc.barrier()?;
    let start = Instant::now();
    regrid_once(local)?;
    for step in 0..local.cfg.num_steps {
        local.ghosts.retain(|k| k.2 >= step);
        local.boundaries.retain(|k| k.1 >= step);
        {
            // No deadlock verdict while the step's tasks are still being created.
            let _hold = rt.hold();
            for &g in &owned {
                let me = local.clone();
                rt.spawn(Some(EXECUTE_STEP), me.execute_step(g, step))?;
            }
        }
        rt.wait_idle()?;
        loc.device().flush();
        loc.barrier()?;
    }
    Ok(start.elapsed())
}

/// Runs the configured steps on `mesh` over `world` (one locality per
/// rank of the mesh partition). Each locality is driven by its own thread.
pub fn run_workload(world: &[Locality], mesh: &Arc<Mesh>, cfg: &WorkloadConfig) -> Result<RunOutcome, WorkloadError> {
    cfg.validate()?;
    if world.len() as u32 != mesh.world_size {
        return Err(WorkloadError::WorldMismatch { mesh: mesh.world_size, world: world.len() as u32 });
    }
    let cfg = Arc::new(cfg.clone());
    let before: u64 = world.iter().map(|l| l.message_stats().parcels_sent.get(SET_GHOST).copied().unwrap_or(0)).sum();
    let counts_before: Vec<_> = world.iter().map(|l| l.runtime().completion_counts()).collect();
    let locals: Vec<Arc<Local>> = world.iter().map(|l| Local::new(l.handle(), mesh.clone(), cfg.clone())).collect();

    let results: Vec<Result<Duration, WorkloadError>> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            world.iter().zip(&locals).map(|(loc, local)| scope.spawn(move || run_locality(local, loc))).collect();
        handles.into_iter().map(|h| h.join().expect("locality driver panicked")).collect()
    });
    let mut elapsed = Duration::ZERO;
    for r in results {
        elapsed = elapsed.max(r?);
    }

    let mut out = RunOutcome { elapsed, ..Default::default() };
    for local in &locals {
        out.ghost_log.extend(std::mem::take(&mut *local.log.lock()));
        out.kernel_launches += local.launches.load(Ordering::Relaxed);
    }
    for (l, before) in world.iter().zip(counts_before) {
        for (name, n) in l.runtime().completion_counts() {
            let prev = before.get(&name).copied().unwrap_or(0);
            *out.completion_counts.entry(name).or_insert(0) += n - prev;
        }
    }
    let after: u64 = world.iter().map(|l| l.message_stats().parcels_sent.get(SET_GHOST).copied().unwrap_or(0)).sum();
    out.ghost_parcels = after - before;
    Ok(out)
}
