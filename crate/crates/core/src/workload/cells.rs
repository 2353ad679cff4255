//! Stand-in cell physics: every cell value is a pure function of
//! (grid, step, iteration, cell index).

use super::mesh::{opposite, Mesh, FACES};

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn cell_value(grid: u32, step: u32, iter: u32, idx: usize) -> f64 {
    let key = ((grid as u64) << 40) ^ ((step as u64) << 20) ^ ((iter as u64) << 12);
    let h = mix(mix(key.wrapping_add(0x9E37_79B9_7F4A_7C15)) ^ idx as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// All N³ cells of one sub-grid, x fastest.
pub fn compute_cells(grid: u32, step: u32, iter: u32, n: usize) -> Vec<f64> {
    (0..n * n * n).map(|i| cell_value(grid, step, iter, i)).collect()
}

/// The N² boundary values on `face`, in (u, v) row order of the two
/// tangential axes.
pub fn face_values(cells: &[f64], n: usize, face: usize) -> Vec<f64> {
    let axis = face / 2;
    let fixed = if face.is_multiple_of(2) { 0 } else { n - 1 };
    let mut out = Vec::with_capacity(n * n);
    for v in 0..n {
        for u in 0..n {
            let (x, y, z) = match axis {
                0 => (fixed, u, v),
                1 => (u, fixed, v),
                _ => (u, v, fixed),
            };
            out.push(cells[x + n * (y + n * z)]);
        }
    }
    out
}

pub fn all_faces(cells: &[f64], n: usize) -> [Vec<f64>; FACES] {
    std::array::from_fn(|f| face_values(cells, n, f))
}

/// Cells of every sub-grid at (step, iter), one grid per element.
pub fn mesh_state_sequential(mesh: &Mesh, step: u32, iter: u32) -> Vec<Vec<f64>> {
    mesh.grids.iter().map(|g| compute_cells(g.id, step, iter, mesh.n)).collect()
}

/// Same as [`mesh_state_sequential`], one rayon task per sub-grid when the
/// `parallel` feature is on.
pub fn mesh_state(mesh: &Mesh, step: u32, iter: u32) -> Vec<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        mesh.grids.par_iter().map(|g| compute_cells(g.id, step, iter, mesh.n)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        mesh_state_sequential(mesh, step, iter)
    }
}

/// Expected ghost layers for every sub-grid after the exchange at
/// (step, iter): for each face with a neighbour, that neighbour's opposite
/// boundary. Faces without a neighbour are empty.
pub fn ghost_oracle(mesh: &Mesh, step: u32, iter: u32) -> Vec<[Vec<f64>; FACES]> {
    let state = mesh_state(mesh, step, iter);
    mesh.grids
        .iter()
        .map(|g| {
            std::array::from_fn(|f| match g.neighbors[f] {
                Some(nb) => face_values(&state[nb as usize], mesh.n, opposite(f)),
                None => Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::mesh::Refinement;

    #[test]
    fn values_are_deterministic_and_distinct() {
        assert_eq!(cell_value(3, 4, 1, 10), cell_value(3, 4, 1, 10));
        assert_ne!(cell_value(3, 4, 1, 10), cell_value(3, 5, 1, 10));
        assert_ne!(cell_value(3, 4, 1, 10), cell_value(2, 4, 1, 10));
        assert!((0.0..1.0).contains(&cell_value(0, 0, 0, 0)));
    }

    #[test]
    fn faces_pick_boundary_planes() {
        let n = 4;
        let cells: Vec<f64> = (0..n * n * n).map(|i| i as f64).collect();
        let f = all_faces(&cells, n);
        assert!(f.iter().all(|v| v.len() == n * n));
        assert_eq!(f[0][0], 0.0);
        assert_eq!(f[1][0], 3.0);
        assert_eq!(f[3][0], (n * (n - 1)) as f64);
        assert_eq!(f[5][0], (n * n * (n - 1)) as f64);
    }

    #[test]
    fn parallel_state_matches_sequential() {
        let m = Mesh::build(3, 2, 1, Refinement::Random(0.5), 8);
        assert_eq!(mesh_state(&m, 2, 1), mesh_state_sequential(&m, 2, 1));
    }

    #[test]
    fn oracle_matches_neighbor_faces() {
        let m = Mesh::line(3, 1, 4);
        let o = ghost_oracle(&m, 0, 0);
        let c0 = compute_cells(0, 0, 0, 4);
        assert_eq!(o[1][0], face_values(&c0, 4, 1));
        assert!(o[0][0].is_empty());
    }
}
