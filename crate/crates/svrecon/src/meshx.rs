//! Mesh extraction via marching cubes over the occupied fine lattice, and
//! reconstruction metrics (Chamfer distance, precision/recall/F1).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assoc::AssociationIndex;
use crate::field::sample_in_voxel;
use crate::kdtree::KdTree;
use crate::lattice::{OctreeState, SceneBounds};
use crate::mc_tables::{CORNER_POS, EDGE_ENDPOINTS, TRI_TABLE};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Area-weighted uniform surface samples (deterministic per seed).
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<[f64; 3]> {
        if self.triangles.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.triangle_area(t);
            cumulative.push(total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let target = rng.random::<f64>() * total;
                let t = cumulative.partition_point(|&c| c < target).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangles[t];
                let (a, b, c) = (
                    self.vertices[a as usize],
                    self.vertices[b as usize],
                    self.vertices[c as usize],
                );
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let (wa, wb, wc) = (1.0 - r1.sqrt(), r1.sqrt() * (1.0 - r2), r1.sqrt() * r2);
                [
                    wa * a[0] + wb * b[0] + wc * c[0],
                    wa * a[1] + wb * b[1] + wc * c[1],
                    wa * a[2] + wb * b[2] + wc * c[2],
                ]
            })
            .collect()
    }
}

/// Standard 256-case marching cubes over the occupied cells of the
/// `l_extract` lattice. Node values come from the covering voxel's
/// trilinear interpolant (first occupied cell adjacent to the node, in a
/// fixed order); nodes with no occupied neighbor take `outside` (positive).
/// Vertices are welded at `1e-7 * D`; triangles are wound outward (toward
/// positive SDF). Returns an empty mesh when no cell crosses zero.
pub fn marching_cubes(
    octree: &OctreeState,
    index: &AssociationIndex,
    l_extract: u8,
    outside: f64,
) -> Result<TriangleMesh> {
    if octree.leaves().next().is_none() {
        return Ok(TriangleMesh::default());
    }
    let finest = octree.finest_leaf_level();
    if l_extract < finest || l_extract > finest + 1 {
        return Err(Error::domain(format!(
            "extraction level {l_extract} must be the finest leaf level ({finest}) or one deeper"
        )));
    }
    let rebuilt;
    let index = if index.level() == l_extract {
        index
    } else {
        rebuilt = AssociationIndex::rebuild(octree, l_extract)?;
        &rebuilt
    };

    let b = &octree.bounds;
    let g = SceneBounds::grid(l_extract);
    let h = b.cell_size(l_extract);
    let weld_tol = 1e-7 * b.edge;
    let nodes1 = g as u64 + 1;

    // Lazily resolved node values, shared across cells so the surface is
    // single-valued even where neighboring voxels disagree.
    let mut node_cache: HashMap<u64, f64> = HashMap::new();
    let mut node_value = |ni: u32, nj: u32, nk: u32| -> f64 {
        let key = ni as u64 * nodes1 * nodes1 + nj as u64 * nodes1 + nk as u64;
        if let Some(&v) = node_cache.get(&key) {
            return v;
        }
        let p = crate::lattice::world_from_dense(
            crate::lattice::DenseCoord::new(ni.min(g - 1), nj.min(g - 1), nk.min(g - 1)),
            [
                if ni == g { 1.0 } else { 0.0 },
                if nj == g { 1.0 } else { 0.0 },
                if nk == g { 1.0 } else { 0.0 },
            ],
            l_extract,
            b,
        );
        let mut value = outside;
        'cells: for off in crate::lattice::CORNER_OFFSETS {
            let (ci, cj, ck) = (
                ni as i64 - off[0] as i64,
                nj as i64 - off[1] as i64,
                nk as i64 - off[2] as i64,
            );
            if ci < 0 || cj < 0 || ck < 0 || ci >= g as i64 || cj >= g as i64 || ck >= g as i64 {
                continue;
            }
            let cell = crate::lattice::DenseCoord::new(ci as u32, cj as u32, ck as u32);
            if let Some(id) = index.nvs_lookup_coord(cell).expect("cell in grid") {
                let v = octree.voxel(id).expect("live voxel");
                value = sample_in_voxel(v, b, p).value;
                break 'cells;
            }
        }
        node_cache.insert(key, value);
        value
    };

    let mut mesh = TriangleMesh::default();
    let mut weld: HashMap<(i64, i64, i64), u32> = HashMap::new();
    let mut corner_vals = [0.0f64; 8];
    let mut corner_pos = [[0.0f64; 3]; 8];

    for &cell_idx in index.table() {
        let c = crate::lattice::inverse_index(cell_idx, g).expect("table cell in grid");
        let mut config = 0usize;
        for (v, off) in CORNER_POS.iter().enumerate() {
            let (ni, nj, nk) = (c.i + off[0], c.j + off[1], c.k + off[2]);
            let val = node_value(ni, nj, nk);
            corner_vals[v] = val;
            corner_pos[v] = [
                b.x_min[0] + ni as f64 * h,
                b.x_min[1] + nj as f64 * h,
                b.x_min[2] + nk as f64 * h,
            ];
            if val < 0.0 {
                config |= 1 << v;
            }
        }
        let row = &TRI_TABLE[config];
        let mut e = 0;
        while row[e] >= 0 {
            let mut tri = [0u32; 3];
            for (slot, &edge) in row[e..e + 3].iter().enumerate() {
                let [a, bb] = EDGE_ENDPOINTS[edge as usize];
                let (fa, fb) = (corner_vals[a], corner_vals[bb]);
                let t = fa / (fa - fb);
                let pa = corner_pos[a];
                let pb = corner_pos[bb];
                let p = [
                    pa[0] + t * (pb[0] - pa[0]),
                    pa[1] + t * (pb[1] - pa[1]),
                    pa[2] + t * (pb[2] - pa[2]),
                ];
                let key = (
                    (p[0] / weld_tol).round() as i64,
                    (p[1] / weld_tol).round() as i64,
                    (p[2] / weld_tol).round() as i64,
                );
                let idx = *weld.entry(key).or_insert_with(|| {
                    mesh.vertices.push(p);
                    (mesh.vertices.len() - 1) as u32
                });
                tri[slot] = idx;
            }
            // table order winds toward the inside; flip for outward normals
            let tri = [tri[0], tri[2], tri[1]];
            if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                mesh.triangles.push(tri);
            }
            e += 3;
        }
    }
    mesh.triangles.retain({
        let vertices = mesh.vertices.clone();
        move |t| {
            let (a, b, c) = (
                vertices[t[0] as usize],
                vertices[t[1] as usize],
                vertices[t[2] as usize],
            );
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() > 1e-12
        }
    });
    Ok(mesh)
}

/// Symmetric mean nearest-neighbor distance between two point sets, with
/// exact neighbors.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("chamfer distance of an empty point set"));
    }
    let mean_nn = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let tree = KdTree::build(to);
        from.iter().map(|&p| tree.nearest(p).unwrap().1).sum::<f64>() / from.len() as f64
    };
    Ok(0.5 * (mean_nn(a, b) + mean_nn(b, a)))
}

/// Precision (pred within `threshold` of gt), recall (gt within
/// `threshold` of pred), and their harmonic mean (0 when both vanish).
pub fn f1_score(pred: &[[f64; 3]], gt: &[[f64; 3]], threshold: f64) -> Result<(f64, f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::domain("f1 score of an empty point set"));
    }
    if !(threshold > 0.0) {
        return Err(Error::domain(format!("threshold must be positive, got {threshold}")));
    }
    let frac_within = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let tree = KdTree::build(to);
        from.iter().filter(|&&p| tree.nearest(p).unwrap().1 <= threshold).count() as f64
            / from.len() as f64
    };
    let precision = frac_within(pred, gt);
    let recall = frac_within(gt, pred);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{analytic_sdf, dense_octree_from_field, Shape};
    use rand::Rng;

    fn sphere_octree(level: u8) -> (OctreeState, AssociationIndex) {
        let b = SceneBounds::new([-2.0, -2.0, -2.0], 4.0).unwrap();
        let oct = dense_octree_from_field(b, level, level + 1, |p| {
            analytic_sdf(Shape::Sphere { radius: 1.0 }, [0.0; 3], p)
        });
        let idx = AssociationIndex::rebuild(&oct, level).unwrap();
        (oct, idx)
    }

    #[test]
    fn sphere_mesh_radial_error() {
        let (oct, idx) = sphere_octree(5);
        let mesh = marching_cubes(&oct, &idx, 5, 4.0).unwrap();
        assert!(!mesh.is_empty());
        let h = oct.bounds.cell_size(5);
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < h, "vertex radial error {} >= {h}", (r - 1.0).abs());
        }
    }

    #[test]
    fn sphere_mesh_is_watertight_and_outward() {
        let (oct, idx) = sphere_octree(4);
        let mesh = marching_cubes(&oct, &idx, 4, 4.0).unwrap();
        // closed orientable surface: every directed edge appears exactly once
        let mut edges = HashMap::new();
        for t in &mesh.triangles {
            for e in 0..3 {
                let key = (t[e], t[(e + 1) % 3]);
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        for (&(a, b), &count) in &edges {
            assert_eq!(count, 1, "directed edge ({a},{b}) seen {count} times");
            assert_eq!(edges.get(&(b, a)), Some(&1), "unpaired edge ({a},{b})");
        }
        // Euler characteristic of a sphere
        let v = mesh.vertices.len() as i64;
        let e = edges.len() as i64 / 2;
        let f = mesh.triangles.len() as i64;
        assert_eq!(v - e + f, 2);
        // outward orientation: triangle normals point away from the center
        let mut outward = 0;
        for (t, _) in mesh.triangles.iter().zip(0..) {
            let (a, b, c) = (
                mesh.vertices[t[0] as usize],
                mesh.vertices[t[1] as usize],
                mesh.vertices[t[2] as usize],
            );
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * w[2] - u[2] * w[1],
                u[2] * w[0] - u[0] * w[2],
                u[0] * w[1] - u[1] * w[0],
            ];
            if n[0] * a[0] + n[1] * a[1] + n[2] * a[2] > 0.0 {
                outward += 1;
            }
        }
        assert_eq!(outward, mesh.triangles.len());
    }

    /// Random interior node values under a positive boundary shell give
    /// closed surfaces: exercises essentially all 256 configurations and
    /// catches any case-table inconsistency through edge pairing.
    #[test]
    fn random_fields_are_watertight() {
        let b = SceneBounds::new([0.0; 3], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..60 {
            // shared random node grid, +1 on the boundary shell
            let mut node_vals = HashMap::new();
            let mut node = |i: u32, j: u32, k: u32, rng: &mut ChaCha8Rng| {
                *node_vals.entry((i, j, k)).or_insert_with(|| {
                    if [i, j, k].iter().any(|&c| c == 0 || c == 8) {
                        1.0
                    } else {
                        rng.random::<f64>() * 2.0 - 1.0
                    }
                })
            };
            let mut oct = OctreeState::new(b, 4);
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..8 {
                        let mut geo = [0.0; 8];
                        for (c, o) in crate::lattice::CORNER_OFFSETS.iter().enumerate() {
                            geo[c] = node(i + o[0], j + o[1], k + o[2], &mut rng);
                        }
                        oct.insert(3, crate::lattice::DenseCoord::new(i, j, k), geo, [0.5; 3]);
                    }
                }
            }
            let idx = AssociationIndex::rebuild(&oct, 3).unwrap();
            let mesh = marching_cubes(&oct, &idx, 3, 1.0).unwrap();
            assert!(!mesh.is_empty());
            let mut edges = HashMap::new();
            for t in &mesh.triangles {
                for e in 0..3 {
                    *edges.entry((t[e], t[(e + 1) % 3])).or_insert(0i32) += 1;
                }
            }
            for (&(a, bb), &count) in &edges {
                assert_eq!(count, 1, "trial {trial}: duplicated directed edge");
                assert_eq!(edges.get(&(bb, a)), Some(&1), "trial {trial}: unpaired edge ({a},{bb})");
            }
        }
    }

    #[test]
    fn affine_plane_is_exact() {
        let b = SceneBounds::new([0.0; 3], 1.0).unwrap();
        let c = 0.53125; // between lattice nodes at level 3
        let oct = dense_octree_from_field(b, 3, 4, |p| p[2] - c);
        let idx = AssociationIndex::rebuild(&oct, 3).unwrap();
        let mesh = marching_cubes(&oct, &idx, 3, 1.0).unwrap();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v[2] - c).abs() < 1e-9, "plane vertex off by {}", (v[2] - c).abs());
        }
    }

    #[test]
    fn all_positive_field_gives_empty_mesh() {
        let b = SceneBounds::new([0.0; 3], 1.0).unwrap();
        let oct = dense_octree_from_field(b, 2, 3, |_| 0.5);
        let idx = AssociationIndex::rebuild(&oct, 2).unwrap();
        let mesh = marching_cubes(&oct, &idx, 2, 1.0).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn surface_consistency_with_field() {
        // |f| at mesh vertices stays below the lattice spacing
        let (oct, idx) = sphere_octree(4);
        let mesh = marching_cubes(&oct, &idx, 4, 4.0).unwrap();
        let h = oct.bounds.cell_size(4);
        for v in mesh.vertices.iter().step_by(7) {
            let s = crate::field::sdf_at(&oct, &idx, *v).unwrap().unwrap();
            assert!(s.value.abs() < h);
        }
    }

    #[test]
    fn chamfer_and_f1_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        assert!(chamfer(&[], &[[0.0; 3]]).is_err());
        assert!(f1_score(&[[0.0; 3]], &[], 0.5).is_err());
        let brute_chamfer = |a: &[[f64; 3]], b: &[[f64; 3]]| {
            let nn = |from: &[[f64; 3]], to: &[[f64; 3]]| {
                from.iter()
                    .map(|p| {
                        to.iter()
                            .map(|q| {
                                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                                    .sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum::<f64>()
                    / from.len() as f64
            };
            0.5 * (nn(a, b) + nn(b, a))
        };
        for _ in 0..20 {
            let n = rng.random_range(1..200);
            let m = rng.random_range(1..200);
            let a: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
            let b: Vec<[f64; 3]> = (0..m).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
            let got = chamfer(&a, &b).unwrap();
            let expect = brute_chamfer(&a, &b);
            assert!((got - expect).abs() < 1e-12);
            // symmetry
            assert!((chamfer(&b, &a).unwrap() - got).abs() < 1e-12);

            let d = 0.15;
            let (p, r, f1) = f1_score(&a, &b, d).unwrap();
            let frac = |from: &[[f64; 3]], to: &[[f64; 3]]| {
                from.iter()
                    .filter(|p| {
                        to.iter().any(|q| {
                            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                                <= d
                        })
                    })
                    .count() as f64
                    / from.len() as f64
            };
            assert!((p - frac(&a, &b)).abs() < 1e-12);
            assert!((r - frac(&b, &a)).abs() < 1e-12);
            let expect_f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert!((f1 - expect_f1).abs() < 1e-12);
            // swapping operands swaps precision and recall
            let (p2, r2, f12) = f1_score(&b, &a, d).unwrap();
            assert!((p2 - r).abs() < 1e-12 && (r2 - p).abs() < 1e-12 && (f12 - f1).abs() < 1e-12);
        }
        // identical and disjoint sets
        let a: Vec<[f64; 3]> = (0..50).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(f1_score(&a, &a, 0.01).unwrap(), (1.0, 1.0, 1.0));
        let far: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 100.0, p[1], p[2]]).collect();
        assert_eq!(f1_score(&a, &far, 0.5).unwrap(), (0.0, 0.0, 0.0));
        let two_a = vec![[0.0, 0.0, 0.0]];
        let two_b = vec![[3.0, 0.0, 0.0]];
        assert_eq!(chamfer(&two_a, &two_b).unwrap(), 3.0);
    }

    #[test]
    fn mesh_sampling_is_on_surface_and_deterministic() {
        let (oct, idx) = sphere_octree(4);
        let mesh = marching_cubes(&oct, &idx, 4, 4.0).unwrap();
        let s1 = mesh.sample_surface(500, 42);
        let s2 = mesh.sample_surface(500, 42);
        assert_eq!(s1, s2);
        let h = oct.bounds.cell_size(4);
        for p in &s1 {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < h);
        }
    }
}
