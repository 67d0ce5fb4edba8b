//! Geometric initialization from per-view point maps.
//!
//! Builds the initial coarse SDF in three steps: (1) a closed-form 7-DoF
//! similarity aligns estimated camera centers to ground-truth centers and
//! warps the point maps into the ground-truth frame; (2) every corner node
//! of a uniform dense grid receives the *negative* distance to the nearest
//! point (all corners start "inside"); (3) visibility carving flips corners
//! to positive when some camera sees them in front of the point map, or
//! when they fall outside every frustum.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;
use crate::lattice::{DenseCoord, OctreeState, SceneBounds};
use crate::{Error, Result};

/// Pinhole camera: world-to-camera rotation `R` and translation `t`,
/// upper-triangular intrinsics `K`, and the image size in pixels.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub k: Matrix3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Camera position in world coordinates: `C = -R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Project a world point to (pixel u, pixel v, camera depth). `None`
    /// when the point is at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let x = self.r * Vector3::new(p[0], p[1], p[2]) + self.t;
        if x.z <= 1e-12 {
            return None;
        }
        let u = self.k[(0, 0)] * x.x / x.z + self.k[(0, 1)] * x.y / x.z + self.k[(0, 2)];
        let v = self.k[(1, 1)] * x.y / x.z + self.k[(1, 2)];
        Some((u, v, x.z))
    }

    /// True when (u, v) lies inside the image rectangle.
    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// World-space unit ray through pixel coordinates (u, v).
    pub fn ray(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        let fx = self.k[(0, 0)];
        let fy = self.k[(1, 1)];
        let cx = self.k[(0, 2)];
        let cy = self.k[(1, 2)];
        let skew = self.k[(0, 1)];
        let yc = (v - cy) / fy;
        let xc = (u - cx - skew * yc) / fx;
        let dir_cam = Vector3::new(xc, yc, 1.0);
        let dir = (self.r.transpose() * dir_cam).normalize();
        let c = self.center();
        ([c.x, c.y, c.z], [dir.x, dir.y, dir.z])
    }
}

/// Per-view point map: an `H x W` grid of 3D points with confidences.
#[derive(Clone, Debug, Default)]
pub struct PointMapView {
    pub width: u32,
    pub height: u32,
    /// Row-major `height * width` points.
    pub points: Vec<[f64; 3]>,
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct PointMapSet {
    pub views: Vec<PointMapView>,
}

impl PointMapSet {
    pub fn total_points(&self) -> usize {
        self.views.iter().map(|v| v.points.len()).sum()
    }
}

/// 7-DoF similarity transform `p -> s R p + t` with `s > 0` and `R` a
/// proper rotation.
#[derive(Clone, Debug)]
pub struct Similarity7 {
    pub scale: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Similarity7 {
    pub fn identity() -> Self {
        Similarity7 {
            scale: 1.0,
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.scale * (self.r * Vector3::new(p[0], p[1], p[2])) + self.t;
        [q.x, q.y, q.z]
    }
}

/// Camera position in world coordinates for a pose `[R | t]`.
pub fn camera_center(r: &Matrix3<f64>, t: &Vector3<f64>) -> Vector3<f64> {
    -(r.transpose() * t)
}

/// Closed-form least-squares similarity aligning `src` onto `dst`:
/// minimizes `sum ||s R src_i + t - dst_i||^2` via the SVD of the centered
/// covariance, with the reflection correction applied on the smallest
/// singular direction.
pub fn umeyama_align(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Similarity7> {
    if src.len() != dst.len() {
        return Err(Error::domain(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::degenerate(format!("need at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mean = |pts: &[[f64; 3]]| {
        let mut m = Vector3::zeros();
        for p in pts {
            m += Vector3::new(p[0], p[1], p[2]);
        }
        m / nf
    };
    let mu_src = mean(src);
    let mu_dst = mean(dst);

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (ps, pd) in src.iter().zip(dst) {
        let x = Vector3::new(ps[0], ps[1], ps[2]) - mu_src;
        let y = Vector3::new(pd[0], pd[1], pd[2]) - mu_dst;
        cov += y * x.transpose();
        var_src += x.norm_squared();
    }
    cov /= nf;
    var_src /= nf;
    if var_src < 1e-24 {
        return Err(Error::degenerate("source points are coincident"));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd with u requested");
    let v_t = svd.v_t.expect("svd with v_t requested");
    // order singular triplets descending
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut uu = Matrix3::zeros();
    let mut vv = Matrix3::zeros();
    let mut sv = [0.0; 3];
    for (dst_col, &src_col) in order.iter().enumerate() {
        uu.set_column(dst_col, &u.column(src_col));
        vv.set_column(dst_col, &v_t.transpose().column(src_col));
        sv[dst_col] = svd.singular_values[src_col];
    }
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::degenerate(
            "rank-deficient correspondence (points nearly collinear)",
        ));
    }
    let det_sign = if (uu.determinant() * vv.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det_sign));
    let r = uu * d * vv.transpose();
    let scale = (sv[0] + sv[1] + det_sign * sv[2]) / var_src;
    if !(scale > 0.0) {
        return Err(Error::degenerate(format!("non-positive scale {scale}")));
    }
    let t = mu_dst - scale * (r * mu_src);
    Ok(Similarity7 { scale, r, t })
}

/// Apply a similarity to every point, preserving count and order.
pub fn warp_points(points: &[[f64; 3]], sim: &Similarity7) -> Vec<[f64; 3]> {
    points.iter().map(|&p| sim.apply(p)).collect()
}

/// Voxel-grid downsample at `pitch`, keeping the highest-confidence point
/// per cell; points below `conf_threshold` are dropped first. Ties break
/// on input order, so the result is deterministic.
pub fn subsample_points(
    points: &[[f64; 3]],
    confidence: &[f64],
    pitch: f64,
    conf_threshold: f64,
) -> Vec<[f64; 3]> {
    use std::collections::HashMap;
    let mut best: HashMap<(i64, i64, i64), (f64, usize)> = HashMap::new();
    for (i, (p, &c)) in points.iter().zip(confidence).enumerate() {
        if c < conf_threshold || !p.iter().all(|x| x.is_finite()) {
            continue;
        }
        let key = (
            (p[0] / pitch).floor() as i64,
            (p[1] / pitch).floor() as i64,
            (p[2] / pitch).floor() as i64,
        );
        match best.get(&key) {
            Some(&(bc, _)) if bc >= c => {}
            _ => {
                best.insert(key, (c, i));
            }
        }
    }
    let mut picked: Vec<usize> = best.values().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| points[i]).collect()
}

/// Corner-node SDF values of the dense grid at `level`: `(G+1)^3` values,
/// node-linear order `i*(G+1)^2 + j*(G+1) + k`.
#[derive(Clone, Debug)]
pub struct NodeField {
    pub level: u8,
    pub values: Vec<f64>,
}

impl NodeField {
    pub fn nodes_per_axis(&self) -> usize {
        (SceneBounds::grid(self.level) + 1) as usize
    }

    #[inline]
    pub fn node_index(&self, i: u32, j: u32, k: u32) -> usize {
        let n = self.nodes_per_axis();
        i as usize * n * n + j as usize * n + k as usize
    }

    pub fn node_world(&self, i: u32, j: u32, k: u32, b: &SceneBounds) -> [f64; 3] {
        let h = b.cell_size(self.level);
        [
            b.x_min[0] + i as f64 * h,
            b.x_min[1] + j as f64 * h,
            b.x_min[2] + k as f64 * h,
        ]
    }

    /// Materialize the dense octree at this level: one leaf voxel per cell,
    /// corners taken from the shared node values.
    pub fn to_octree(&self, b: SceneBounds, l_max: u8, color: [f64; 3]) -> OctreeState {
        let g = SceneBounds::grid(self.level);
        let mut oct = OctreeState::new(b, l_max);
        for i in 0..g {
            for j in 0..g {
                for k in 0..g {
                    let mut geo = [0.0; 8];
                    for (c, o) in crate::lattice::CORNER_OFFSETS.iter().enumerate() {
                        geo[c] = self.values[self.node_index(i + o[0], j + o[1], k + o[2])];
                    }
                    oct.insert(self.level, DenseCoord::new(i, j, k), geo, color);
                }
            }
        }
        oct
    }
}

/// Assign every corner node its negative distance to the nearest point:
/// `f(node) = -min_p ||node - p||`. All values end up <= 0.
pub fn init_unsigned(bounds: &SceneBounds, level: u8, points: &[[f64; 3]]) -> Result<NodeField> {
    if points.is_empty() {
        return Err(Error::degenerate("cannot initialize from an empty point set"));
    }
    let tree = KdTree::build(points);
    let n = (SceneBounds::grid(level) + 1) as usize;
    let h = bounds.cell_size(level);
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let i = idx / (n * n);
            let j = idx / n % n;
            let k = idx % n;
            let p = [
                bounds.x_min[0] + i as f64 * h,
                bounds.x_min[1] + j as f64 * h,
                bounds.x_min[2] + k as f64 * h,
            ];
            let (_, dist) = tree.nearest(p).expect("nonempty tree");
            -dist
        })
        .collect();
    Ok(NodeField { level, values })
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CarveReport {
    /// Corners flipped because a camera sees them in front of the point map.
    pub flipped_visible: usize,
    /// Corners flipped because they project into no camera frustum.
    pub flipped_outside: usize,
    pub total_nodes: usize,
}

/// Flip corner signs to positive where the corner is visible: either some
/// camera sees it strictly closer than the nearest point binned at the
/// same low-resolution pixel, or it projects into no frustum at all.
///
/// `bin_factor` shrinks the native resolution per axis for depth binning;
/// `margin` is subtracted from the binned depth before the comparison.
pub fn carve_signs(
    field: &mut NodeField,
    bounds: &SceneBounds,
    cameras: &[CameraModel],
    points: &[[f64; 3]],
    bin_factor: u32,
    margin: f64,
) -> Result<CarveReport> {
    if let Some(c) = cameras.iter().find(|c| c.width == 0 || c.height == 0) {
        return Err(Error::degenerate(format!(
            "camera with zero-area frustum ({}x{})",
            c.width, c.height
        )));
    }
    let bin_factor = bin_factor.max(1);
    // per-camera min-depth bins over the point map
    let bins: Vec<DepthBins> = cameras
        .par_iter()
        .map(|cam| DepthBins::build(cam, points, bin_factor))
        .collect();

    let n = field.nodes_per_axis();
    let flips: Vec<u8> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let i = (idx / (n * n)) as u32;
            let j = (idx / n % n) as u32;
            let k = (idx % n) as u32;
            let p = field.node_world(i, j, k, bounds);
            let mut in_any = false;
            for (cam, bin) in cameras.iter().zip(&bins) {
                let Some((u, v, depth)) = cam.project(p) else {
                    continue;
                };
                if !cam.in_image(u, v) {
                    continue;
                }
                in_any = true;
                // empty bins have no occluder: min over the empty set is
                // +inf, so the corner counts as visible
                if depth < bin.min_at(u, v) - margin {
                    return 1; // visible in front of the point map
                }
            }
            if in_any {
                0
            } else {
                2 // outside all camera frustums
            }
        })
        .collect();

    let mut report = CarveReport {
        total_nodes: n * n * n,
        ..Default::default()
    };
    for (value, &flip) in field.values.iter_mut().zip(&flips) {
        match flip {
            1 => {
                *value = value.abs();
                report.flipped_visible += 1;
            }
            2 => {
                *value = value.abs();
                report.flipped_outside += 1;
            }
            _ => {}
        }
    }
    Ok(report)
}

struct DepthBins {
    cols: u32,
    rows: u32,
    factor: u32,
    min_depth: Vec<f64>,
}

impl DepthBins {
    fn build(cam: &CameraModel, points: &[[f64; 3]], factor: u32) -> Self {
        let cols = cam.width.div_ceil(factor);
        let rows = cam.height.div_ceil(factor);
        let mut min_depth = vec![f64::INFINITY; (cols * rows) as usize];
        for &p in points {
            if let Some((u, v, depth)) = cam.project(p) {
                if cam.in_image(u, v) {
                    let bu = (u as u32 / factor).min(cols - 1);
                    let bv = (v as u32 / factor).min(rows - 1);
                    let slot = (bv * cols + bu) as usize;
                    if depth < min_depth[slot] {
                        min_depth[slot] = depth;
                    }
                }
            }
        }
        DepthBins {
            cols,
            rows,
            factor,
            min_depth,
        }
    }

    fn min_at(&self, u: f64, v: f64) -> f64 {
        let bu = ((u as u32) / self.factor).min(self.cols - 1);
        let bv = ((v as u32) / self.factor).min(self.rows - 1);
        self.min_depth[(bv * self.cols + bu) as usize]
    }
}

/// Parameters of the initialization stage. Subsample pitch and bin factor
/// are unspecified upstream; the defaults here are surfaced in the run
/// configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitParams {
    pub level: u8,
    pub conf_threshold: f64,
    /// Subsample pitch in units of the init-level cell size.
    pub pitch_cells: f64,
    /// Low-resolution binning factor per axis for depth comparison.
    pub bin_factor: u32,
    /// Depth margin in units of the init-level cell size.
    pub margin_cells: f64,
    pub init_color: [f64; 3],
}

impl Default for InitParams {
    fn default() -> Self {
        InitParams {
            level: 6,
            conf_threshold: 0.1,
            pitch_cells: 0.5,
            bin_factor: 8,
            margin_cells: 0.25,
            init_color: [0.5, 0.5, 0.5],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitReport {
    pub aligned: bool,
    pub similarity_scale: f64,
    pub points_total: usize,
    pub points_subsampled: usize,
    pub carve: CarveReport,
}

/// Full initialization: optional similarity alignment of estimated poses
/// onto ground truth, point warping, negative-distance assignment, and
/// sign carving. Returns the dense octree at the init level.
pub fn run_init(
    bounds: SceneBounds,
    l_max: u8,
    cameras: &[CameraModel],
    estimated_poses: Option<&[(Matrix3<f64>, Vector3<f64>)]>,
    pointmaps: &PointMapSet,
    params: &InitParams,
) -> Result<(OctreeState, InitReport)> {
    if pointmaps.total_points() == 0 {
        return Err(Error::degenerate("point maps are empty"));
    }
    let sim = match estimated_poses {
        Some(est) => {
            if est.len() != cameras.len() {
                return Err(Error::domain(format!(
                    "estimated pose count {} != camera count {}",
                    est.len(),
                    cameras.len()
                )));
            }
            let src: Vec<[f64; 3]> = est
                .iter()
                .map(|(r, t)| {
                    let c = camera_center(r, t);
                    [c.x, c.y, c.z]
                })
                .collect();
            let dst: Vec<[f64; 3]> = cameras
                .iter()
                .map(|c| {
                    let c = c.center();
                    [c.x, c.y, c.z]
                })
                .collect();
            Some(umeyama_align(&src, &dst)?)
        }
        None => None,
    };
    let aligned = sim.is_some();
    let sim = sim.unwrap_or_else(Similarity7::identity);

    let mut all_points = Vec::with_capacity(pointmaps.total_points());
    let mut all_conf = Vec::with_capacity(pointmaps.total_points());
    for view in &pointmaps.views {
        for (p, &c) in view.points.iter().zip(&view.confidence) {
            all_points.push(sim.apply(*p));
            all_conf.push(c);
        }
    }

    let h = bounds.cell_size(params.level);
    let mut kept = Vec::new();
    let mut kept_conf = Vec::new();
    for (p, &c) in all_points.iter().zip(&all_conf) {
        if c >= params.conf_threshold && bounds.contains(*p) {
            kept.push(*p);
            kept_conf.push(c);
        }
    }
    let subsampled = subsample_points(&kept, &kept_conf, params.pitch_cells * h, 0.0);
    if subsampled.is_empty() {
        return Err(Error::degenerate(
            "no confident in-bounds points survive subsampling",
        ));
    }

    let mut field = init_unsigned(&bounds, params.level, &subsampled)?;
    let carve = carve_signs(
        &mut field,
        &bounds,
        cameras,
        &kept,
        params.bin_factor,
        params.margin_cells * h,
    )?;
    let octree = field.to_octree(bounds, l_max, params.init_color);
    let report = InitReport {
        aligned,
        similarity_scale: sim.scale,
        points_total: all_points.len(),
        points_subsampled: subsampled.len(),
        carve,
    };
    Ok((octree, report))
}
