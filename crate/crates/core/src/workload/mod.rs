//! A mini time-stepper: an octree of sub-grids advanced through hydro and
//! gravity phases, with simulated device kernels and ghost-cell exchange
//! between neighbouring sub-grids.
//!
//! Per step and sub-grid, an `execute_step` task runs the hydro iterations
//! (collect boundaries, exchange ghosts, compute fluxes on the device) and
//! then the gravity kernels. Steps are separated by a barrier across all
//! localities.

mod cells;
mod config;
mod mesh;
mod run;

use std::sync::Arc;

pub use cells::{all_faces, cell_value, compute_cells, face_values, ghost_oracle, mesh_state, mesh_state_sequential};
pub use config::{CommMode, ConfigParseError, InvalidConfig, WorkloadConfig};
pub use mesh::{opposite, Mesh, Refinement, SubGrid, FACES};
pub use run::{gravity_kernel, run_workload, RunOutcome};

use crate::device::DeviceConfig;
use crate::distrib::{DistribError, Locality, LocalityConfig};
use crate::profiler::ProfilerConfig;
use crate::tasking::RunError;

/// Task and kernel names emitted by the workload.
pub mod names {
    pub const EXECUTE_STEP: &str = "execute_step";
    pub const COLLECT_HYDRO_BOUNDARIES: &str = "collect_hydro_boundaries";
    pub const COMPUTE_FLUXES: &str = "compute_fluxes";
    pub const SET_GHOST: &str = "set_ghost";
    pub const CHECK_FOR_REFINEMENT: &str = "check_for_refinement";
    pub const REGRID_GATHER: &str = "regrid_gather";
    pub const REGRID_SCATTER: &str = "regrid_scatter";

    pub const RECONSTRUCT_KERNEL: &str = "reconstruct_kernel";
    pub const FLUX_KERNEL: &str = "flux_kernel";
    pub const MULTIPOLE_KERNEL: &str = "multipole_kernel";
    pub const MULTIPOLE_ROOT_KERNEL: &str = "multipole_root_kernel";
    pub const P2M_KERNEL: &str = "p2m_kernel";
    pub const P2P_KERNEL: &str = "p2p_kernel";

    pub const TASKS: [&str; 7] = [
        EXECUTE_STEP,
        COLLECT_HYDRO_BOUNDARIES,
        COMPUTE_FLUXES,
        SET_GHOST,
        CHECK_FOR_REFINEMENT,
        REGRID_GATHER,
        REGRID_SCATTER,
    ];
    pub const KERNELS: [&str; 6] =
        [RECONSTRUCT_KERNEL, FLUX_KERNEL, MULTIPOLE_KERNEL, MULTIPOLE_ROOT_KERNEL, P2M_KERNEL, P2P_KERNEL];
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Config(#[from] InvalidConfig),
    #[error("mesh is partitioned for {mesh} localities but the world has {world}")]
    WorldMismatch { mesh: u32, world: u32 },
    #[error(transparent)]
    Distrib(#[from] DistribError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Spawn(#[from] crate::tasking::SpawnError),
}

/// One point of a strong-scaling curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub n: u32,
    pub total_time_s: f64,
    pub cells_per_second: f64,
    /// Relative to the smallest locality count of the same sweep arm.
    pub speedup: f64,
}

pub fn cells_per_second(cells_per_subgrid: usize, num_subgrids: usize, num_steps: u32, time_s: f64) -> f64 {
    (cells_per_subgrid as f64 * num_subgrids as f64 * num_steps as f64) / time_s
}

/// Locality settings matching a workload configuration.
pub fn locality_config(cfg: &WorkloadConfig, profiler: Option<ProfilerConfig>) -> LocalityConfig {
    LocalityConfig {
        workers: cfg.workers,
        seed: cfg.seed,
        profiler,
        device: DeviceConfig { stream_count: cfg.stream_count, ..DeviceConfig::default() },
        ..LocalityConfig::default()
    }
}

pub fn build_mesh(cfg: &WorkloadConfig, world_size: u32) -> Arc<Mesh> {
    Arc::new(Mesh::build(cfg.levels, world_size, cfg.seed, cfg.refinement, cfg.n))
}

/// Builds the mesh for `world`, runs all steps and reports the scaling
/// metric. Only the stepping is timed.
pub fn run_benchmark(cfg: &WorkloadConfig, world: &[Locality]) -> Result<(ScalingPoint, RunOutcome), WorkloadError> {
    cfg.validate()?;
    let mesh = build_mesh(cfg, world.len() as u32);
    let outcome = run_workload(world, &mesh, cfg)?;
    let t = outcome.elapsed.as_secs_f64();
    let point = ScalingPoint {
        n: world.len() as u32,
        total_time_s: t,
        cells_per_second: cells_per_second(mesh.cells_per_subgrid(), mesh.len(), cfg.num_steps, t),
        speedup: 1.0,
    };
    Ok((point, outcome))
}
