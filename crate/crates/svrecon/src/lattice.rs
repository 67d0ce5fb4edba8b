//! Coordinate systems, voxel records, and octree state.
//!
//! Two coordinate systems coexist: the *world* frame (metric units inside an
//! axis-aligned cube of edge `D`) and the *dense* lattice at a level `L`,
//! a conceptual uniform grid of `2^L` cells per axis. Cells are half-open
//! per axis, so a point on a shared face belongs to the cell with the larger
//! index origin (plain `floor`).
//!
//! Every voxel stores its own eight corner SDF values in world units,
//! duplicated at shared faces; field continuity comes from the training
//! losses, not from parameter sharing.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Corner offsets in z-fastest order: corner `k` sits at
/// `(k >> 2 & 1, k >> 1 & 1, k & 1)` in voxel-local coordinates.
pub const CORNER_OFFSETS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [0, 0, 1],
    [0, 1, 0],
    [0, 1, 1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, 0],
    [1, 1, 1],
];

/// Default maximum subdivision level.
pub const DEFAULT_L_MAX: u8 = 10;

const NO_SLOT: u32 = u32::MAX;

/// Axis-aligned reconstruction cube `[x_min, x_min + edge]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub x_min: [f64; 3],
    pub edge: f64,
}

impl SceneBounds {
    pub fn new(x_min: [f64; 3], edge: f64) -> Result<Self> {
        if !(edge > 0.0) || !edge.is_finite() {
            return Err(Error::domain(format!("scene edge must be positive, got {edge}")));
        }
        Ok(SceneBounds { x_min, edge })
    }

    /// World size of one cell at `level`: `h_L = D / 2^L`.
    pub fn cell_size(&self, level: u8) -> f64 {
        self.edge / (1u64 << level) as f64
    }

    /// Cells per axis at `level`.
    pub fn grid(level: u8) -> u32 {
        1u32 << level
    }

    pub fn x_max(&self) -> [f64; 3] {
        [
            self.x_min[0] + self.edge,
            self.x_min[1] + self.edge,
            self.x_min[2] + self.edge,
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        let h = 0.5 * self.edge;
        [self.x_min[0] + h, self.x_min[1] + h, self.x_min[2] + h]
    }

    /// True if `p` lies inside the closed cube.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.x_min[a] && p[a] <= self.x_min[a] + self.edge)
    }
}

/// Integer lattice coordinate at some level (`0 <= i,j,k < 2^L`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DenseCoord {
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

impl DenseCoord {
    pub fn new(i: u32, j: u32, k: u32) -> Self {
        DenseCoord { i, j, k }
    }

    pub fn in_grid(&self, g: u32) -> bool {
        self.i < g && self.j < g && self.k < g
    }
}

/// Linearized dense index `i*G^2 + j*G + k`. Bijective over the lattice.
pub fn linear_index(c: DenseCoord, g: u32) -> Result<u64> {
    if !c.in_grid(g) {
        return Err(Error::domain(format!("coordinate {c:?} out of range for grid {g}")));
    }
    let g = g as u64;
    Ok(c.i as u64 * g * g + c.j as u64 * g + c.k as u64)
}

/// Inverse of [`linear_index`].
pub fn inverse_index(idx: u64, g: u32) -> Result<DenseCoord> {
    let g64 = g as u64;
    if idx >= g64 * g64 * g64 {
        return Err(Error::domain(format!("index {idx} out of range for grid {g}")));
    }
    Ok(DenseCoord {
        i: (idx / (g64 * g64)) as u32,
        j: (idx / g64 % g64) as u32,
        k: (idx % g64) as u32,
    })
}

/// Map a dense coordinate plus fractional offset at `level` to world space:
/// `x_min + (c + offset) * h_L` per axis.
pub fn world_from_dense(c: DenseCoord, offset: [f64; 3], level: u8, b: &SceneBounds) -> [f64; 3] {
    let h = b.cell_size(level);
    [
        b.x_min[0] + (c.i as f64 + offset[0]) * h,
        b.x_min[1] + (c.j as f64 + offset[1]) * h,
        b.x_min[2] + (c.k as f64 + offset[2]) * h,
    ]
}

/// Containing cell and in-cell fraction of a world point at `level`.
///
/// Points exactly on the far boundary are clamped into the last cell so the
/// closed cube is fully covered.
pub fn dense_from_world(p: [f64; 3], level: u8, b: &SceneBounds) -> Result<(DenseCoord, [f64; 3])> {
    if !b.contains(p) {
        return Err(Error::domain(format!("point {p:?} outside scene bounds")));
    }
    let g = SceneBounds::grid(level);
    let h = b.cell_size(level);
    let mut cell = [0u32; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let u = (p[a] - b.x_min[a]) / h;
        let c = (u.floor() as i64).clamp(0, g as i64 - 1) as u32;
        cell[a] = c;
        frac[a] = u - c as f64;
    }
    Ok((DenseCoord::new(cell[0], cell[1], cell[2]), frac))
}

/// Stable voxel handle. Survives pruning and subdivision of other voxels.
pub type VoxelId = u32;

/// One sparse voxel: level, anchor (min corner at its own level), eight
/// corner SDF values in world units (z-fastest order), and a diffuse color.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub id: VoxelId,
    pub level: u8,
    pub anchor: DenseCoord,
    pub geo: [f64; 8],
    pub color: [f64; 3],
    /// False for internal parents retained past the association cap.
    pub leaf: bool,
}

impl Voxel {
    /// World edge length `h_v = D / 2^level`.
    pub fn size(&self, b: &SceneBounds) -> f64 {
        b.cell_size(self.level)
    }

    pub fn min_world(&self, b: &SceneBounds) -> [f64; 3] {
        world_from_dense(self.anchor, [0.0; 3], self.level, b)
    }

    pub fn max_world(&self, b: &SceneBounds) -> [f64; 3] {
        world_from_dense(self.anchor, [1.0; 3], self.level, b)
    }

    pub fn center_world(&self, b: &SceneBounds) -> [f64; 3] {
        world_from_dense(self.anchor, [0.5; 3], self.level, b)
    }

    /// World position of corner `k` (z-fastest order).
    pub fn corner_world(&self, k: usize, b: &SceneBounds) -> [f64; 3] {
        let o = CORNER_OFFSETS[k];
        world_from_dense(self.anchor, [o[0] as f64, o[1] as f64, o[2] as f64], self.level, b)
    }

    /// Cells covered by this voxel at `l_target >= level`: the axis-aligned
    /// block of side `2^(l_target - level)` starting at the shifted anchor.
    pub fn cells_covered(&self, l_target: u8) -> Result<impl Iterator<Item = DenseCoord>> {
        if l_target < self.level {
            return Err(Error::domain(format!(
                "target level {l_target} coarser than voxel level {}",
                self.level
            )));
        }
        let shift = l_target - self.level;
        let side = 1u32 << shift;
        let base = [self.anchor.i << shift, self.anchor.j << shift, self.anchor.k << shift];
        Ok((0..side).flat_map(move |di| {
            (0..side).flat_map(move |dj| {
                (0..side).map(move |dk| DenseCoord::new(base[0] + di, base[1] + dj, base[2] + dk))
            })
        }))
    }

    /// True if all eight corners share a strict sign (a zero corner counts
    /// as a crossing).
    pub fn uniform_sign(&self) -> bool {
        self.geo.iter().all(|&f| f > 0.0) || self.geo.iter().all(|&f| f < 0.0)
    }

    pub fn min_abs_geo(&self) -> f64 {
        self.geo.iter().fold(f64::INFINITY, |m, &f| m.min(f.abs()))
    }
}

/// The single mutable training state: scene bounds plus the set of active
/// voxels (leaves, and internal parents retained past the association cap).
#[derive(Clone, Debug)]
pub struct OctreeState {
    pub bounds: SceneBounds,
    voxels: Vec<Voxel>,
    slot_of: Vec<u32>,
    next_id: VoxelId,
    /// child id -> parent id, for children whose parent is retained.
    pub parent_links: HashMap<VoxelId, VoxelId>,
    pub l_max: u8,
}

impl OctreeState {
    pub fn new(bounds: SceneBounds, l_max: u8) -> Self {
        OctreeState {
            bounds,
            voxels: Vec::new(),
            slot_of: Vec::new(),
            next_id: 0,
            parent_links: HashMap::new(),
            l_max,
        }
    }

    /// Insert a new leaf voxel and return its id.
    pub fn insert(&mut self, level: u8, anchor: DenseCoord, geo: [f64; 8], color: [f64; 3]) -> VoxelId {
        debug_assert!(anchor.in_grid(SceneBounds::grid(level)));
        let id = self.next_id;
        self.next_id += 1;
        self.slot_of.push(self.voxels.len() as u32);
        self.voxels.push(Voxel {
            id,
            level,
            anchor,
            geo,
            color,
            leaf: true,
        });
        id
    }

    pub fn slot(&self, id: VoxelId) -> Option<usize> {
        match self.slot_of.get(id as usize) {
            Some(&s) if s != NO_SLOT => Some(s as usize),
            _ => None,
        }
    }

    pub fn voxel(&self, id: VoxelId) -> Option<&Voxel> {
        self.slot(id).map(|s| &self.voxels[s])
    }

    pub fn voxel_mut(&mut self, id: VoxelId) -> Option<&mut Voxel> {
        let s = self.slot(id)?;
        Some(&mut self.voxels[s])
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [Voxel] {
        &mut self.voxels
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Voxel> {
        self.voxels.iter().filter(|v| v.leaf)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Finest level among active leaves (0 for an empty octree).
    pub fn finest_leaf_level(&self) -> u8 {
        self.leaves().map(|v| v.level).max().unwrap_or(0)
    }

    /// Remove the given voxels. The survivors keep their ids; slots compact.
    pub fn remove(&mut self, ids: &[VoxelId]) {
        if ids.is_empty() {
            return;
        }
        let mut dead = vec![false; self.slot_of.len()];
        for &id in ids {
            dead[id as usize] = true;
            self.parent_links.remove(&id);
        }
        self.voxels.retain(|v| !dead[v.id as usize]);
        for s in self.slot_of.iter_mut() {
            *s = NO_SLOT;
        }
        for (slot, v) in self.voxels.iter().enumerate() {
            self.slot_of[v.id as usize] = slot as u32;
        }
    }

    /// Demote a leaf to an internal parent (used when it is retained past
    /// the association cap).
    pub fn mark_internal(&mut self, id: VoxelId) {
        if let Some(v) = self.voxel_mut(id) {
            v.leaf = false;
        }
    }

    /// Walk parent links up to the ancestor at exactly `level`.
    pub fn ancestor_at(&self, id: VoxelId, level: u8) -> Result<VoxelId> {
        let mut cur = id;
        loop {
            let v = self
                .voxel(cur)
                .ok_or_else(|| Error::structural(format!("voxel {cur} not found")))?;
            if v.level == level {
                return Ok(cur);
            }
            if v.level < level {
                return Err(Error::structural(format!(
                    "voxel {id} has no ancestor at level {level}"
                )));
            }
            cur = *self
                .parent_links
                .get(&cur)
                .ok_or_else(|| Error::structural(format!("missing parent link for voxel {cur}")))?;
        }
    }

    /// Sum of leaf volumes in world units.
    pub fn leaf_volume(&self) -> f64 {
        self.leaves()
            .map(|v| {
                let h = v.size(&self.bounds);
                h * h * h
            })
            .sum()
    }
}

// --- Checkpoint serialization -------------------------------------------
//
// Versioned little-endian binary: magic "SVRX", u32 version, bounds
// (x_min as 3 f64 + edge f64), u64 voxel count, then per voxel
// {level u8, anchor 3xu32, geo 8xf32, color 3xf32}. Corner order is
// z-fastest (asserted in tests). Internal parents are stored like leaves
// and re-detected on load: a voxel whose eight children are all present
// is an internal parent.

const CHECKPOINT_MAGIC: &[u8; 4] = b"SVRX";
const CHECKPOINT_VERSION: u32 = 1;

impl OctreeState {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for a in 0..3 {
            w.write_all(&self.bounds.x_min[a].to_le_bytes())?;
        }
        w.write_all(&self.bounds.edge.to_le_bytes())?;
        w.write_all(&(self.voxels.len() as u64).to_le_bytes())?;
        for v in &self.voxels {
            w.write_all(&[v.level])?;
            w.write_all(&v.anchor.i.to_le_bytes())?;
            w.write_all(&v.anchor.j.to_le_bytes())?;
            w.write_all(&v.anchor.k.to_le_bytes())?;
            for &g in &v.geo {
                w.write_all(&(g as f32).to_le_bytes())?;
            }
            for &c in &v.color {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)?;
            Ok(buf)
        }
        let magic: [u8; 4] = read_exact(r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("<checkpoint>", "bad magic (expected SVRX)"));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "<checkpoint>",
                format!("unsupported version {version}"),
            ));
        }
        let x_min = [
            f64::from_le_bytes(read_exact(r)?),
            f64::from_le_bytes(read_exact(r)?),
            f64::from_le_bytes(read_exact(r)?),
        ];
        let edge = f64::from_le_bytes(read_exact(r)?);
        let bounds = SceneBounds::new(x_min, edge)?;
        let count = u64::from_le_bytes(read_exact(r)?);
        let mut octree = OctreeState::new(bounds, DEFAULT_L_MAX);
        let mut by_key: HashMap<(u8, DenseCoord), VoxelId> = HashMap::new();
        for _ in 0..count {
            let level = read_exact::<1>(r)?[0];
            let anchor = DenseCoord::new(
                u32::from_le_bytes(read_exact(r)?),
                u32::from_le_bytes(read_exact(r)?),
                u32::from_le_bytes(read_exact(r)?),
            );
            if !anchor.in_grid(SceneBounds::grid(level)) {
                return Err(Error::format(
                    "<checkpoint>",
                    format!("anchor {anchor:?} out of range at level {level}"),
                ));
            }
            let mut geo = [0.0; 8];
            for g in geo.iter_mut() {
                *g = f32::from_le_bytes(read_exact(r)?) as f64;
            }
            let mut color = [0.0; 3];
            for c in color.iter_mut() {
                *c = f32::from_le_bytes(read_exact(r)?) as f64;
            }
            let id = octree.insert(level, anchor, geo, color);
            by_key.insert((level, anchor), id);
        }
        // Re-detect internal parents: all eight children present.
        let mut links = Vec::new();
        for v in octree.voxels() {
            if v.level == u8::MAX {
                continue;
            }
            let child_base =
                DenseCoord::new(v.anchor.i << 1, v.anchor.j << 1, v.anchor.k << 1);
            let children: Vec<_> = CORNER_OFFSETS
                .iter()
                .filter_map(|o| {
                    by_key
                        .get(&(
                            v.level + 1,
                            DenseCoord::new(child_base.i + o[0], child_base.j + o[1], child_base.k + o[2]),
                        ))
                        .copied()
                })
                .collect();
            if children.len() == 8 {
                links.push((v.id, children));
            }
        }
        for (parent, children) in links {
            octree.mark_internal(parent);
            for c in children {
                octree.parent_links.insert(c, parent);
            }
        }
        octree.l_max = DEFAULT_L_MAX.max(octree.finest_leaf_level());
        Ok(octree)
    }
}
