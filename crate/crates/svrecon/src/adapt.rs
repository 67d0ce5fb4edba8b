//! Progressive voxel allocation: pruning far-from-surface voxels,
//! field-preserving subdivision, and routing of the spatial regularizers
//! across the association-cap boundary.

use std::collections::HashMap;

use crate::field::interp;
use crate::lattice::{DenseCoord, OctreeState, Voxel, VoxelId, CORNER_OFFSETS};
use crate::losses::GradAccumulator;
use crate::render::learning_thickness;
use crate::{Error, Result};

/// True when the voxel is prunable: uniform strict corner sign with every
/// magnitude outside the learning band plus a safety margin tied to the
/// voxel size. Voxels with a corner sign change are never prunable.
pub fn prune_predicate(v: &Voxel, h_v: f64, s: f64, kappa: f64) -> bool {
    v.uniform_sign() && v.min_abs_geo() > 0.5 * learning_thickness(s) + kappa * h_v
}

#[derive(Clone, Debug, Default)]
pub struct PruneReport {
    pub removed: Vec<VoxelId>,
}

/// Remove prunable leaf voxels. Leaves living under a retained internal
/// parent are exempt so the parent-child hierarchy stays complete.
pub fn prune(octree: &mut OctreeState, s: f64, kappa: f64) -> PruneReport {
    let removed: Vec<VoxelId> = octree
        .leaves()
        .filter(|v| {
            !octree.parent_links.contains_key(&v.id)
                && prune_predicate(v, v.size(&octree.bounds), s, kappa)
        })
        .map(|v| v.id)
        .collect();
    octree.remove(&removed);
    PruneReport { removed }
}

/// True when the voxel is split-worthy: a corner sign change, or some
/// corner inside the learning band.
pub fn split_eligible(v: &Voxel, s: f64) -> bool {
    !v.uniform_sign() || v.min_abs_geo() <= 0.5 * learning_thickness(s)
}

#[derive(Clone, Debug, Default)]
pub struct SubdivReport {
    /// Each split parent with its eight children, in creation order.
    pub split: Vec<(VoxelId, [VoxelId; 8])>,
    pub skipped_at_max: usize,
}

/// Split eligible leaves below `target_level`. Children interpolate the
/// parent field at their corners (exact for the trilinear interpolant) and
/// copy the parent color. Parents at or above `l_cap` stay as internal
/// nodes; splits from those levels are gated to the `top_q` fraction with
/// the largest `loss_stat`.
pub fn subdivide(
    octree: &mut OctreeState,
    target_level: u8,
    s: f64,
    l_cap: u8,
    top_q: f64,
    loss_stat: impl Fn(VoxelId) -> f64,
) -> SubdivReport {
    let mut report = SubdivReport::default();
    let mut plain: Vec<VoxelId> = Vec::new();
    let mut gated: Vec<VoxelId> = Vec::new();
    for v in octree.leaves() {
        if v.level >= target_level || !split_eligible(v, s) {
            continue;
        }
        if v.level >= octree.l_max {
            report.skipped_at_max += 1;
            continue;
        }
        if v.level >= l_cap {
            gated.push(v.id);
        } else {
            plain.push(v.id);
        }
    }
    if !gated.is_empty() {
        gated.sort_by(|&a, &b| loss_stat(b).total_cmp(&loss_stat(a)).then(a.cmp(&b)));
        let keep = ((top_q * gated.len() as f64).round() as usize).min(gated.len());
        gated.truncate(keep);
    }

    let mut removed_parents = Vec::new();
    for id in plain.into_iter().chain(gated) {
        let parent = octree.voxel(id).expect("eligible voxel exists").clone();
        let mut children = [0 as VoxelId; 8];
        for (slot, o) in CORNER_OFFSETS.iter().enumerate() {
            let anchor = DenseCoord::new(
                2 * parent.anchor.i + o[0],
                2 * parent.anchor.j + o[1],
                2 * parent.anchor.k + o[2],
            );
            let mut geo = [0.0; 8];
            for (c, q) in CORNER_OFFSETS.iter().enumerate() {
                let local = [
                    0.5 * (o[0] + q[0]) as f64,
                    0.5 * (o[1] + q[1]) as f64,
                    0.5 * (o[2] + q[2]) as f64,
                ];
                geo[c] = interp(&parent.geo, local);
            }
            children[slot] = octree.insert(parent.level + 1, anchor, geo, parent.color);
        }
        if parent.level >= l_cap {
            octree.mark_internal(id);
            for c in children {
                octree.parent_links.insert(c, id);
            }
        } else {
            removed_parents.push(id);
        }
        report.split.push((id, children));
    }
    octree.remove(&removed_parents);
    report
}

/// Work lists for the two regularizer families.
#[derive(Clone, Debug)]
pub struct Routing {
    /// Voxels forming the capped association lattice: leaves at or below
    /// the cap plus retained internal ancestors at exactly the cap.
    pub lattice: Vec<VoxelId>,
    /// Voxels eligible for the local per-voxel Eikonal term: every active
    /// voxel (leaf or internal parent) at or above the cap.
    pub local: Vec<VoxelId>,
    /// Level of the capped lattice.
    pub lattice_level: u8,
}

/// Partition regularizer coverage at the cap: lattice-sampled terms act on
/// the octree restricted to `level <= l_cap` (finer leaves represented by
/// their cap-level ancestors), the local Eikonal covers everything at
/// `level >= l_cap`.
pub fn route_regularizers(octree: &OctreeState, l_cap: u8) -> Result<Routing> {
    let mut lattice = Vec::new();
    let mut local = Vec::new();
    for v in octree.voxels() {
        if v.leaf && v.level <= l_cap {
            lattice.push(v.id);
        }
        if !v.leaf && v.level == l_cap {
            lattice.push(v.id);
        }
        if v.level >= l_cap {
            local.push(v.id);
        }
        if v.leaf && v.level > l_cap {
            // must be reachable from a retained cap-level ancestor
            octree.ancestor_at(v.id, l_cap)?;
        }
    }
    let lattice_level = octree.finest_leaf_level().min(l_cap);
    Ok(Routing {
        lattice,
        local,
        lattice_level,
    })
}

/// Push gradients accumulated on retained cap-level ancestors down to all
/// descendant corner parameters through the trilinear prolongation
/// weights (fixed by the split geometry).
pub fn prolongate(octree: &OctreeState, roots: &[VoxelId], grads: &mut GradAccumulator) -> Result<()> {
    let mut children_of: HashMap<VoxelId, Vec<VoxelId>> = HashMap::new();
    for (&child, &parent) in &octree.parent_links {
        children_of.entry(parent).or_default().push(child);
    }
    for list in children_of.values_mut() {
        list.sort_unstable();
    }
    for &root in roots {
        let root_slot = octree
            .slot(root)
            .ok_or_else(|| Error::structural(format!("prolongation root {root} not found")))?;
        let root_grad = grads.geo[root_slot];
        if root_grad.iter().all(|&g| g == 0.0) {
            continue;
        }
        let root_voxel = &octree.voxels()[root_slot];
        let mut stack: Vec<VoxelId> = children_of.get(&root).cloned().unwrap_or_default();
        while let Some(id) = stack.pop() {
            let slot = octree
                .slot(id)
                .ok_or_else(|| Error::structural(format!("descendant {id} not found")))?;
            let v = &octree.voxels()[slot];
            let shift = v.level - root_voxel.level;
            let scale = 1.0 / (1u64 << shift) as f64;
            let base = [
                v.anchor.i as f64 * scale - root_voxel.anchor.i as f64,
                v.anchor.j as f64 * scale - root_voxel.anchor.j as f64,
                v.anchor.k as f64 * scale - root_voxel.anchor.k as f64,
            ];
            for (j, q) in CORNER_OFFSETS.iter().enumerate() {
                let local = [
                    base[0] + q[0] as f64 * scale,
                    base[1] + q[1] as f64 * scale,
                    base[2] + q[2] as f64 * scale,
                ];
                let w = crate::field::corner_weights(local);
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += w[k] * root_grad[k];
                }
                grads.geo[slot][j] += acc;
            }
            if let Some(kids) = children_of.get(&id) {
                stack.extend(kids.iter().copied());
            }
        }
    }
    Ok(())
}
