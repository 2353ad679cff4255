//! Octree of sub-grids, partitioned across localities in Morton order.

use std::collections::{BTreeSet, HashMap};

/// Face index: 0/1 = -x/+x, 2/3 = -y/+y, 4/5 = -z/+z.
pub const FACES: usize = 6;

pub fn opposite(face: usize) -> usize {
    face ^ 1
}

fn face_offset(face: usize) -> (usize, i64) {
    (face / 2, if face.is_multiple_of(2) { -1 } else { 1 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refinement {
    /// Every node above the finest level has children.
    Full,
    /// Below the root, each node is refined with this probability (seeded),
    /// then neighbours are refined as needed for proper nesting.
    Random(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubGrid {
    pub id: u32,
    pub level: u8,
    pub coords: [u32; 3],
    pub owner: u32,
    /// Same-level face neighbours by face index.
    pub neighbors: [Option<u32>; FACES],
    pub has_children: bool,
    pub is_root: bool,
}

impl SubGrid {
    pub fn neighbor_count(&self) -> usize {
        self.neighbors.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mesh {
    pub grids: Vec<SubGrid>,
    pub world_size: u32,
    /// Cells per sub-grid edge.
    pub n: usize,
}

type Node = (u8, [u32; 3]);

fn hash3(seed: u64, level: u8, c: [u32; 3]) -> f64 {
    let mut z = seed ^ ((level as u64) << 56) ^ ((c[0] as u64) << 36) ^ ((c[1] as u64) << 18) ^ c[2] as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn children(level: u8, c: [u32; 3]) -> impl Iterator<Item = Node> {
    (0..8u32).map(move |k| (level + 1, [2 * c[0] + (k & 1), 2 * c[1] + ((k >> 1) & 1), 2 * c[2] + (k >> 2)]))
}

fn neighbor_coord(c: [u32; 3], level: u8, face: usize) -> Option<[u32; 3]> {
    let (axis, d) = face_offset(face);
    let v = c[axis] as i64 + d;
    if v < 0 || v >= 1i64 << level {
        return None;
    }
    let mut out = c;
    out[axis] = v as u32;
    Some(out)
}

fn morton(c: [u32; 3]) -> u64 {
    let mut m = 0u64;
    for bit in 0..21 {
        for (axis, v) in c.iter().enumerate() {
            m |= (((*v as u64) >> bit) & 1) << (3 * bit + axis);
        }
    }
    m
}

impl Mesh {
    /// Builds an octree with `levels` levels (level 0 is the root). The
    /// root is always refined when `levels > 1`.
    pub fn build(levels: u8, world_size: u32, seed: u64, refinement: Refinement, n: usize) -> Mesh {
        assert!(levels >= 1, "levels must be at least 1");
        assert!(world_size >= 1, "world_size must be at least 1");
        let mut nodes: BTreeSet<Node> = BTreeSet::new();
        nodes.insert((0, [0, 0, 0]));
        for level in 0..levels.saturating_sub(1) {
            let here: Vec<Node> = nodes.iter().filter(|(l, _)| *l == level).copied().collect();
            for (l, c) in here {
                let refine = match refinement {
                    Refinement::Full => true,
                    Refinement::Random(_) if l == 0 => true,
                    Refinement::Random(p) => hash3(seed, l, c) < p,
                };
                if refine {
                    nodes.extend(children(l, c));
                }
            }
        }
        // Proper nesting: the parent of every node must have all its
        // same-level face neighbours present.
        loop {
            let mut add = Vec::new();
            for &(l, c) in &nodes {
                if l < 2 {
                    continue;
                }
                let pc = [c[0] / 2, c[1] / 2, c[2] / 2];
                for f in 0..FACES {
                    if let Some(nc) = neighbor_coord(pc, l - 1, f) {
                        if !nodes.contains(&(l - 1, nc)) {
                            let gc = [nc[0] / 2, nc[1] / 2, nc[2] / 2];
                            if nodes.contains(&(l - 2, gc)) {
                                add.extend(children(l - 2, gc));
                            }
                        }
                    }
                }
            }
            let before = nodes.len();
            nodes.extend(add);
            if nodes.len() == before {
                break;
            }
        }
        let depth = levels - 1;
        let mut order: Vec<Node> = nodes.iter().copied().collect();
        order.sort_by_key(|&(l, c)| {
            let s = depth - l;
            (morton([c[0] << s, c[1] << s, c[2] << s]), l)
        });
        let index: HashMap<Node, u32> = order.iter().enumerate().map(|(i, n)| (*n, i as u32)).collect();
        let count = order.len();
        let grids = order
            .iter()
            .enumerate()
            .map(|(i, &(l, c))| {
                let mut neighbors = [None; FACES];
                for (f, slot) in neighbors.iter_mut().enumerate() {
                    *slot = neighbor_coord(c, l, f).and_then(|nc| index.get(&(l, nc)).copied());
                }
                SubGrid {
                    id: i as u32,
                    level: l,
                    coords: c,
                    owner: (i as u64 * world_size as u64 / count as u64) as u32,
                    neighbors,
                    has_children: children(l, c).next().is_some_and(|ch| nodes.contains(&ch)),
                    is_root: l == 0,
                }
            })
            .collect();
        Mesh { grids, world_size, n }
    }

    /// `count` unrefined sub-grids in a row along x, split into contiguous
    /// chunks over `world_size` localities.
    pub fn line(count: u32, world_size: u32, n: usize) -> Mesh {
        let grids = (0..count)
            .map(|i| {
                let mut neighbors = [None; FACES];
                neighbors[0] = i.checked_sub(1);
                neighbors[1] = (i + 1 < count).then_some(i + 1);
                SubGrid {
                    id: i,
                    level: 0,
                    coords: [i, 0, 0],
                    owner: (i as u64 * world_size as u64 / count as u64) as u32,
                    neighbors,
                    has_children: false,
                    is_root: false,
                }
            })
            .collect();
        Mesh { grids, world_size, n }
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn owned_by(&self, rank: u32) -> impl Iterator<Item = &SubGrid> {
        self.grids.iter().filter(move |g| g.owner == rank)
    }

    pub fn directed_links(&self) -> usize {
        self.grids.iter().map(SubGrid::neighbor_count).sum()
    }

    /// Directed neighbour pairs whose ends live on different localities.
    pub fn cross_locality_links(&self) -> usize {
        self.grids
            .iter()
            .flat_map(|g| g.neighbors.iter().flatten().map(move |&n| (g.owner, n)))
            .filter(|&(owner, n)| self.grids[n as usize].owner != owner)
            .count()
    }

    /// Undirected neighbour pairs with both ends on the same locality.
    pub fn local_undirected_pairs(&self) -> usize {
        (self.directed_links() - self.cross_locality_links()) / 2
    }

    pub fn has_refined_neighbor(&self, g: &SubGrid) -> bool {
        g.neighbors.iter().flatten().any(|&n| self.grids[n as usize].has_children)
    }

    pub fn cells_per_subgrid(&self) -> usize {
        self.n * self.n * self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_level_is_just_the_root() {
        let m = Mesh::build(1, 1, 0, Refinement::Full, 8);
        assert_eq!(m.len(), 1);
        assert_eq!(m.directed_links(), 0);
        assert!(m.grids[0].is_root && !m.grids[0].has_children);
    }

    #[test]
    fn two_levels_full() {
        let m = Mesh::build(2, 1, 0, Refinement::Full, 8);
        assert_eq!(m.len(), 9);
        assert_eq!(m.grids.iter().filter(|g| g.level == 1).count(), 8);
        // 2x2x2 block: 3 axes x 4 lines x 1 internal face x 2 directions.
        assert_eq!(m.directed_links(), 24);
        assert!(m.grids[0].is_root && m.grids[0].has_children);
    }

    #[test]
    fn neighbor_relation_is_symmetric() {
        for seed in 0..10 {
            let m = Mesh::build(4, 3, seed, Refinement::Random(0.4), 8);
            for g in &m.grids {
                for (f, n) in g.neighbors.iter().enumerate() {
                    if let Some(n) = n {
                        assert_eq!(m.grids[*n as usize].neighbors[opposite(f)], Some(g.id));
                    }
                }
            }
        }
    }

    #[test]
    fn proper_nesting_holds() {
        for seed in 0..10 {
            let m = Mesh::build(4, 1, seed, Refinement::Random(0.3), 8);
            let present: BTreeSet<Node> = m.grids.iter().map(|g| (g.level, g.coords)).collect();
            for g in m.grids.iter().filter(|g| g.level >= 2) {
                let pc = g.coords.map(|v| v / 2);
                for f in 0..FACES {
                    if let Some(nc) = neighbor_coord(pc, g.level - 1, f) {
                        assert!(present.contains(&(g.level - 1, nc)), "seed {seed}: {:?}", g);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_and_contiguous_ownership() {
        let a = Mesh::build(3, 4, 7, Refinement::Random(0.5), 8);
        let b = Mesh::build(3, 4, 7, Refinement::Random(0.5), 8);
        assert_eq!(a, b);
        let owners: Vec<u32> = a.grids.iter().map(|g| g.owner).collect();
        assert!(owners.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*owners.last().unwrap(), 3);
    }

    #[test]
    fn line_split_over_two() {
        let m = Mesh::line(8, 2, 8);
        assert_eq!(m.directed_links(), 14);
        assert_eq!(m.cross_locality_links(), 2);
        assert_eq!(m.local_undirected_pairs(), 6);
        assert_eq!(m.owned_by(0).count(), 4);
    }
}
