//! Voxel association over the conceptual finest lattice.
//!
//! Three structures link the dense lattice at level `L` (grid `G = 2^L`) to
//! the multi-resolution sparse voxels:
//!
//! - **A**: an occupancy bitmask of length `G^3`, packed in 64-bit words;
//! - **B**: a sorted table of the `M` occupied cell indices;
//! - **C**: the voxel id covering each occupied cell, aligned with B.
//!
//! Only the bitmask scales with `G^3`; B and C scale with the occupied
//! region. The structures are immutable after a rebuild and are refreshed
//! only when the LoD hierarchy changes, never per iteration.

use rayon::prelude::*;

use crate::lattice::{linear_index, DenseCoord, OctreeState, SceneBounds, VoxelId};
use crate::{Error, Result};

/// Default association lattice cap (`L_cap`). Finer voxels are handled by
/// hierarchical routing, see [`crate::adapt::route_regularizers`].
pub const DEFAULT_L_CAP: u8 = 9;

#[derive(Clone, Debug)]
pub struct AssociationIndex {
    level: u8,
    g: u32,
    bitmask: Vec<u64>,
    table: Vec<u64>,
    voxel_of: Vec<VoxelId>,
}

impl AssociationIndex {
    /// Rebuild A/B/C from all leaf voxels. Fails if any leaf is finer than
    /// `level`; such octrees must be routed through the regularizer cap
    /// first.
    pub fn rebuild(octree: &OctreeState, level: u8) -> Result<Self> {
        if let Some(v) = octree.leaves().find(|v| v.level > level) {
            return Err(Error::domain(format!(
                "leaf voxel {} at level {} is finer than association level {level}",
                v.id, v.level
            )));
        }
        let ids: Vec<VoxelId> = octree.leaves().map(|v| v.id).collect();
        Self::rebuild_from(octree, &ids, level)
    }

    /// Rebuild from an explicit voxel list (the lattice work list produced
    /// by regularizer routing). The listed voxels must be pairwise disjoint
    /// and no finer than `level`.
    pub fn rebuild_from(octree: &OctreeState, ids: &[VoxelId], level: u8) -> Result<Self> {
        let g = SceneBounds::grid(level);
        // Per-voxel cell enumeration into an unsorted buffer, then one sort
        // of B with the identical permutation applied to C. Ties are
        // impossible because voxels are disjoint.
        let mut pairs: Vec<(u64, VoxelId)> = ids
            .par_iter()
            .map(|&id| -> Result<Vec<(u64, VoxelId)>> {
                let v = octree
                    .voxel(id)
                    .ok_or_else(|| Error::structural(format!("voxel {id} not found")))?;
                if v.level > level {
                    return Err(Error::domain(format!(
                        "voxel {id} at level {} is finer than association level {level}",
                        v.level
                    )));
                }
                Ok(v.cells_covered(level)?
                    .map(|c| (linear_index(c, g).expect("covered cell in grid"), id))
                    .collect())
            })
            .try_reduce(Vec::new, |mut a, mut b| {
                a.append(&mut b);
                Ok(a)
            })?;
        pairs.par_sort_unstable_by_key(|&(cell, _)| cell);

        let words = ((g as u64).pow(3) as usize).div_ceil(64);
        let mut bitmask = vec![0u64; words];
        let mut table = Vec::with_capacity(pairs.len());
        let mut voxel_of = Vec::with_capacity(pairs.len());
        for &(cell, id) in &pairs {
            debug_assert!(table.last().map_or(true, |&prev| prev < cell), "duplicate covered cell");
            bitmask[(cell >> 6) as usize] |= 1u64 << (cell & 63);
            table.push(cell);
            voxel_of.push(id);
        }
        Ok(AssociationIndex {
            level,
            g,
            bitmask,
            table,
            voxel_of,
        })
    }

    /// Empty index at `level` (no occupied cells).
    pub fn empty(level: u8) -> Self {
        let g = SceneBounds::grid(level);
        let words = ((g as u64).pow(3) as usize).div_ceil(64);
        AssociationIndex {
            level,
            g,
            bitmask: vec![0u64; words],
            table: Vec::new(),
            voxel_of: Vec::new(),
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn grid(&self) -> u32 {
        self.g
    }

    /// Number of occupied cells (`M`).
    pub fn occupied_count(&self) -> usize {
        self.table.len()
    }

    /// Sorted occupied-cell table (B).
    pub fn table(&self) -> &[u64] {
        &self.table
    }

    pub fn total_cells(&self) -> u64 {
        (self.g as u64).pow(3)
    }

    /// Single-word occupancy probe of the bitmask.
    pub fn occupied(&self, cell: u64) -> bool {
        self.bitmask[(cell >> 6) as usize] & (1u64 << (cell & 63)) != 0
    }

    /// Neighboring-voxel search: the unique voxel covering `cell`, if any.
    /// One bitmask word decides occupancy; occupied cells resolve through a
    /// binary search in B and the aligned entry of C.
    pub fn nvs_lookup(&self, cell: u64) -> Result<Option<VoxelId>> {
        if cell >= self.total_cells() {
            return Err(Error::domain(format!(
                "cell {cell} out of range for grid {}",
                self.g
            )));
        }
        if !self.occupied(cell) {
            return Ok(None);
        }
        let slot = self
            .table
            .binary_search(&cell)
            .expect("bitmask and table must agree");
        Ok(Some(self.voxel_of[slot]))
    }

    pub fn nvs_lookup_coord(&self, c: DenseCoord) -> Result<Option<VoxelId>> {
        self.nvs_lookup(linear_index(c, self.g)?)
    }

    /// Heap bytes of the occupancy-scaled tables B and C (excludes the
    /// bitmask, the only component that scales with `G^3`).
    pub fn table_bytes(&self) -> usize {
        self.table.len() * std::mem::size_of::<u64>()
            + self.voxel_of.len() * std::mem::size_of::<VoxelId>()
    }

    pub fn bitmask_bytes(&self) -> usize {
        self.bitmask.len() * 8
    }
}

impl PartialEq for AssociationIndex {
    fn eq(&self, other: &Self) -> bool {
        self.level == other.level
            && self.bitmask == other.bitmask
            && self.table == other.table
            && self.voxel_of == other.voxel_of
    }
}

/// The up-to-six face-adjacent cells of `c` that lie inside the lattice.
pub fn face_neighbors(c: DenseCoord, g: u32) -> impl Iterator<Item = DenseCoord> {
    let deltas: [[i64; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    deltas.into_iter().filter_map(move |d| {
        let i = c.i as i64 + d[0];
        let j = c.j as i64 + d[1];
        let k = c.k as i64 + d[2];
        if i < 0 || j < 0 || k < 0 || i >= g as i64 || j >= g as i64 || k >= g as i64 {
            None
        } else {
            Some(DenseCoord::new(i as u32, j as u32, k as u32))
        }
    })
}
