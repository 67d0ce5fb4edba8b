//! Trilinear SDF evaluation inside voxels and analytic corner gradients.
//!
//! SDF values are stored and interpreted in world metric units at every
//! level, so the Eikonal target `||grad f|| = 1` is level-independent.

use crate::assoc::AssociationIndex;
use crate::lattice::{dense_from_world, OctreeState, SceneBounds, Voxel, VoxelId};
use crate::{Error, Result};

/// Gradient norms at or below this are treated as degenerate; such voxels
/// are skipped in normal rendering.
pub const EPS_NORMAL: f64 = 1e-12;

/// One field evaluation: interpolated value, the covering voxel, the local
/// offset `q` in `[0,1]^3`, and the eight trilinear corner weights.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub value: f64,
    pub voxel: VoxelId,
    pub local: [f64; 3],
    pub corner_weights: [f64; 8],
}

/// Trilinear weights at local offset `q`, z-fastest corner order. The
/// weights are nonnegative and sum to one; `d value / d geo_k` equals
/// weight `k` exactly.
#[inline]
pub fn corner_weights(q: [f64; 3]) -> [f64; 8] {
    let wx = [1.0 - q[0], q[0]];
    let wy = [1.0 - q[1], q[1]];
    let wz = [1.0 - q[2], q[2]];
    let mut w = [0.0; 8];
    for k in 0..8 {
        w[k] = wx[k >> 2 & 1] * wy[k >> 1 & 1] * wz[k & 1];
    }
    w
}

/// Trilinear interpolation of the eight corner values at `q`.
#[inline]
pub fn interp(geo: &[f64; 8], q: [f64; 3]) -> f64 {
    let w = corner_weights(q);
    (0..8).map(|k| w[k] * geo[k]).sum()
}

/// Evaluate the field at a world point through one specific voxel. Local
/// coordinates are clamped to the unit cube to absorb floating-point drift
/// at voxel faces.
pub fn sample_in_voxel(v: &Voxel, b: &SceneBounds, p: [f64; 3]) -> FieldSample {
    let h = v.size(b);
    let min = v.min_world(b);
    let mut q = [0.0; 3];
    for a in 0..3 {
        q[a] = ((p[a] - min[a]) / h).clamp(0.0, 1.0);
    }
    let corner_weights = corner_weights(q);
    let value = (0..8).map(|k| corner_weights[k] * v.geo[k]).sum();
    FieldSample {
        value,
        voxel: v.id,
        local: q,
        corner_weights,
    }
}

/// SDF at a world point: `None` when the containing cell is unoccupied,
/// otherwise the covering voxel's trilinear interpolant. Errors when `p`
/// leaves the scene bounds.
pub fn sdf_at(octree: &OctreeState, index: &AssociationIndex, p: [f64; 3]) -> Result<Option<FieldSample>> {
    let (cell, _) = dense_from_world(p, index.level(), &octree.bounds)?;
    let Some(id) = index.nvs_lookup_coord(cell)? else {
        return Ok(None);
    };
    let v = octree
        .voxel(id)
        .ok_or_else(|| Error::structural(format!("index referenced missing voxel {id}")))?;
    Ok(Some(sample_in_voxel(v, &octree.bounds, p)))
}

/// Gradient of the trilinear interpolant at the voxel center with respect
/// to *local* coordinates: per axis the mean of the four corner
/// differences, e.g. `d f / d qx = (1/4) sum_{j,k} (f_{1jk} - f_{0jk})`.
#[inline]
pub fn grad_local_center(geo: &[f64; 8]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for j in 0..2 {
        for k in 0..2 {
            g[0] += geo[4 + 2 * j + k] - geo[2 * j + k];
            g[1] += geo[2 + 4 * j + k] - geo[4 * j + k];
            g[2] += geo[1 + 4 * j + 2 * k] - geo[4 * j + 2 * k];
        }
    }
    [g[0] * 0.25, g[1] * 0.25, g[2] * 0.25]
}

/// Exact world-space gradient of the interpolant at the voxel center, in
/// units of SDF per world length.
pub fn grad_center(v: &Voxel, b: &SceneBounds) -> [f64; 3] {
    let h = v.size(b);
    let g = grad_local_center(&v.geo);
    [g[0] / h, g[1] / h, g[2] / h]
}

/// Unit normal at the voxel center, or `None` when the gradient is
/// degenerate (norm <= [`EPS_NORMAL`]).
pub fn normal_at_center(v: &Voxel, b: &SceneBounds) -> Option<[f64; 3]> {
    let g = grad_center(v, b);
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if n <= EPS_NORMAL {
        None
    } else {
        Some([g[0] / n, g[1] / n, g[2] / n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc::AssociationIndex;
    use crate::lattice::{DenseCoord, OctreeState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> SceneBounds {
        SceneBounds::new([0.0; 3], 2.0).unwrap()
    }

    /// Voxel whose corners sample the world-affine field `a . x + c`.
    fn affine_voxel(level: u8, anchor: DenseCoord, a: [f64; 3], c: f64, b: &SceneBounds) -> [f64; 8] {
        let mut geo = [0.0; 8];
        let v = Voxel {
            id: 0,
            level,
            anchor,
            geo,
            color: [0.0; 3],
            leaf: true,
        };
        for k in 0..8 {
            let p = v.corner_world(k, b);
            geo[k] = a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + c;
        }
        geo
    }

    #[test]
    fn weights_sum_to_one_and_match_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let w = corner_weights(q);
            assert!(w.iter().all(|&x| x >= 0.0));
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-14);
            // independent 8-term trilinear expansion
            let geo: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>() * 4.0 - 2.0);
            let expect: f64 = (0..8)
                .map(|k| {
                    let (dx, dy, dz) = ((k >> 2 & 1) as f64, (k >> 1 & 1) as f64, (k & 1) as f64);
                    let wx = if dx > 0.5 { q[0] } else { 1.0 - q[0] };
                    let wy = if dy > 0.5 { q[1] } else { 1.0 - q[1] };
                    let wz = if dz > 0.5 { q[2] } else { 1.0 - q[2] };
                    wx * wy * wz * geo[k]
                })
                .sum();
            assert!((interp(&geo, q) - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn interpolation_exact_at_corners_and_center() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let geo: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>() * 8.0 - 4.0);
        let v = Voxel { id: 0, level: 1, anchor: DenseCoord::new(1, 0, 1), geo, color: [0.0; 3], leaf: true };
        for k in 0..8 {
            let s = sample_in_voxel(&v, &b, v.corner_world(k, &b));
            assert_eq!(s.value, geo[k], "corner {k}");
        }
        let center = sample_in_voxel(&v, &b, v.center_world(&b));
        let mean: f64 = geo.iter().sum::<f64>() / 8.0;
        assert!((center.value - mean).abs() < 1e-12);
    }

    #[test]
    fn sdf_at_resolves_covering_voxel() {
        // a continuous affine field over a dense octree evaluates exactly,
        // including at shared corners (the floor convention picks a
        // covering voxel whose corner carries the same value)
        let b = bounds();
        let mut oct = OctreeState::new(b, 6);
        let field = |p: [f64; 3]| 0.7 * p[0] - 0.3 * p[1] + 0.45 * p[2] - 0.2;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    if (i, j, k) == (0, 0, 0) {
                        continue; // leave one cell unoccupied
                    }
                    let anchor = DenseCoord::new(i, j, k);
                    let v = Voxel { id: 0, level: 1, anchor, geo: [0.0; 8], color: [0.0; 3], leaf: true };
                    let geo: [f64; 8] = std::array::from_fn(|c| field(v.corner_world(c, &b)));
                    oct.insert(1, anchor, geo, [0.0; 3]);
                }
            }
        }
        let idx = AssociationIndex::rebuild(&oct, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0];
            if let Some(s) = sdf_at(&oct, &idx, p).unwrap() {
                assert!((s.value - field(p)).abs() < 1e-12);
            }
        }
        // corner shared by several voxels evaluates to the field value
        let shared = [1.0, 1.0, 1.0];
        let s = sdf_at(&oct, &idx, shared).unwrap().unwrap();
        assert!((s.value - field(shared)).abs() < 1e-12);
        // unoccupied cell
        assert!(sdf_at(&oct, &idx, [0.1, 0.1, 0.1]).unwrap().is_none());
        // outside bounds
        assert!(sdf_at(&oct, &idx, [5.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn axis_restriction_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geo: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>());
        for axis in 0..3 {
            let mut q0 = [rng.random::<f64>(); 3];
            let mut q1 = q0;
            let mut qm = q0;
            q0[axis] = 0.1;
            q1[axis] = 0.9;
            qm[axis] = 0.5;
            // 3-point collinearity along the axis
            let (f0, f1, fm) = (interp(&geo, q0), interp(&geo, q1), interp(&geo, qm));
            assert!((fm - 0.5 * (f0 + f1)).abs() < 1e-13);
        }
    }

    #[test]
    fn grad_center_unit_slope() {
        let b = bounds();
        let anchor = DenseCoord::new(2, 1, 3);
        let geo = affine_voxel(2, anchor, [1.0, 0.0, 0.0], 0.3, &b);
        let v = Voxel { id: 0, level: 2, anchor, geo, color: [0.0; 3], leaf: true };
        let g = grad_center(&v, &b);
        assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12 && g[2].abs() < 1e-12);

        let flat = Voxel { geo: [7.0; 8], ..v.clone() };
        assert_eq!(grad_center(&flat, &b), [0.0; 3]);
    }

    #[test]
    fn grad_center_matches_finite_difference() {
        // random geo, h_v = 0.25: central FD of the interpolant at center
        let b = SceneBounds::new([0.0; 3], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let geo: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
            let v = Voxel { id: 0, level: 2, anchor: DenseCoord::new(1, 2, 3), geo, color: [0.0; 3], leaf: true };
            assert_eq!(v.size(&b), 0.25);
            let g = grad_center(&v, &b);
            let h_v = v.size(&b);
            let step = 1e-5;
            for axis in 0..3 {
                let mut qp = [0.5; 3];
                let mut qm = [0.5; 3];
                qp[axis] += step / h_v;
                qm[axis] -= step / h_v;
                let fd = (interp(&geo, qp) - interp(&geo, qm)) / (2.0 * step);
                let denom = fd.abs().max(1e-9);
                assert!(((g[axis] - fd) / denom).abs() < 1e-6, "axis {axis}: {} vs {}", g[axis], fd);
            }
        }
    }

    #[test]
    fn grad_center_exact_for_affine_any_level() {
        let b = bounds();
        for level in 1..=5u8 {
            let geo = affine_voxel(level, DenseCoord::new(0, 1, 1), [0.5, -2.0, 1.25], -0.7, &b);
            let v = Voxel { id: 0, level, anchor: DenseCoord::new(0, 1, 1), geo, color: [0.0; 3], leaf: true };
            let g = grad_center(&v, &b);
            assert!((g[0] - 0.5).abs() < 1e-11);
            assert!((g[1] + 2.0).abs() < 1e-11);
            assert!((g[2] - 1.25).abs() < 1e-11);
        }
    }

    #[test]
    fn normals() {
        let b = bounds();
        let anchor = DenseCoord::new(0, 0, 0);
        let geo = affine_voxel(1, anchor, [2.0, 0.0, 0.0], 0.0, &b);
        let v = Voxel { id: 0, level: 1, anchor, geo, color: [0.0; 3], leaf: true };
        assert_eq!(normal_at_center(&v, &b), Some([1.0, 0.0, 0.0]));

        let geo = affine_voxel(1, anchor, [0.0, 0.0, -1.0], 0.0, &b);
        let v = Voxel { geo, ..v };
        let n = normal_at_center(&v, &b).unwrap();
        assert!((n[2] + 1.0).abs() < 1e-12 && n[0].abs() < 1e-12);

        let degenerate = Voxel { geo: [1.0; 8], ..v };
        assert_eq!(normal_at_center(&degenerate, &b), None);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let geo: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>());
            let v = Voxel { geo, ..v.clone() };
            if let Some(n) = normal_at_center(&v, &b) {
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }
}
