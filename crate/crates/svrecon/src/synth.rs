//! Desk-scale ground-truth generation: analytic SDF shapes, posed cameras,
//! sphere-traced reference views (images, masks, depth, point maps,
//! normals), and randomized octree fixtures for tests.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geoinit::{CameraModel, Similarity7};
use crate::lattice::{DenseCoord, OctreeState, SceneBounds};
use crate::{Error, Result};

/// Analytic test shapes, positioned relative to a given center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half: [f64; 3] },
    Torus { major: f64, minor: f64 },
}

/// Exact signed distance from `p` to the shape centered at `center`.
pub fn analytic_sdf(shape: Shape, center: [f64; 3], p: [f64; 3]) -> f64 {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    match shape {
        Shape::Sphere { radius } => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius,
        Shape::Cuboid { half } => {
            let q = [d[0].abs() - half[0], d[1].abs() - half[1], d[2].abs() - half[2]];
            let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
            let out_len = (outside[0] * outside[0] + outside[1] * outside[1] + outside[2] * outside[2]).sqrt();
            out_len + q[0].max(q[1]).max(q[2]).min(0.0)
        }
        Shape::Torus { major, minor } => {
            let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major;
            (ring * ring + d[2] * d[2]).sqrt() - minor
        }
    }
}

/// Unit outward normal (the analytic SDF gradient).
pub fn analytic_normal(shape: Shape, center: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let n = match shape {
        Shape::Sphere { .. } => d,
        Shape::Cuboid { half } => {
            let q = [d[0].abs() - half[0], d[1].abs() - half[1], d[2].abs() - half[2]];
            if q.iter().any(|&x| x > 0.0) {
                // outside: gradient of ||max(q, 0)||
                [
                    q[0].max(0.0) * d[0].signum(),
                    q[1].max(0.0) * d[1].signum(),
                    q[2].max(0.0) * d[2].signum(),
                ]
            } else {
                // inside: the face with the least penetration
                let axis = (0..3).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
                let mut g = [0.0; 3];
                g[axis] = d[axis].signum();
                g
            }
        }
        Shape::Torus { major, .. } => {
            let rr = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if rr < 1e-12 {
                [0.0, 0.0, d[2].signum()]
            } else {
                let ring = rr - major;
                [ring * d[0] / rr, ring * d[1] / rr, d[2]]
            }
        }
    };
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-300);
    [n[0] / len, n[1] / len, n[2] / len]
}

/// Sphere-trace from `origin` along unit `dir`; returns the hit parameter
/// once `|f| < tol`, or `None` past `t_max`.
pub fn sphere_trace(
    shape: Shape,
    center: [f64; 3],
    origin: [f64; 3],
    dir: [f64; 3],
    t_max: f64,
    tol: f64,
) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..512 {
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let f = analytic_sdf(shape, center, p);
        if f.abs() < tol {
            return Some(t);
        }
        t += f;
        if t > t_max || t < -1e-9 {
            return None;
        }
    }
    None
}

/// Evenly spaced look-at cameras on a ring around `target` (slightly above
/// the equator), plus two elevated views.
pub fn camera_ring(
    n: usize,
    radius: f64,
    target: [f64; 3],
    width: u32,
    height: u32,
    fov_deg: f64,
) -> Result<Vec<CameraModel>> {
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 ring views, got {n}")));
    }
    let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
    let k = Matrix3::new(
        f,
        0.0,
        width as f64 * 0.5,
        0.0,
        f,
        height as f64 * 0.5,
        0.0,
        0.0,
        1.0,
    );
    let mut cams = Vec::with_capacity(n + 2);
    let ring_elev = 15f64.to_radians();
    for i in 0..n {
        let az = TAU * i as f64 / n as f64;
        cams.push(look_at_camera(eye_at(target, radius, az, ring_elev), target, k, width, height));
    }
    for &az in &[0.3, 0.3 + 0.5 * TAU] {
        cams.push(look_at_camera(eye_at(target, radius, az, 55f64.to_radians()), target, k, width, height));
    }
    Ok(cams)
}

fn eye_at(target: [f64; 3], radius: f64, azimuth: f64, elevation: f64) -> [f64; 3] {
    [
        target[0] + radius * elevation.cos() * azimuth.cos(),
        target[1] + radius * elevation.cos() * azimuth.sin(),
        target[2] + radius * elevation.sin(),
    ]
}

/// World-to-camera pose looking from `eye` toward `target`, +z forward,
/// x right, y down (z-up world).
fn look_at_camera(eye: [f64; 3], target: [f64; 3], k: Matrix3<f64>, width: u32, height: u32) -> CameraModel {
    let eye_v = Vector3::new(eye[0], eye[1], eye[2]);
    let forward = (Vector3::new(target[0], target[1], target[2]) - eye_v).normalize();
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if forward.cross(&up).norm() < 1e-9 {
        up = Vector3::new(0.0, 1.0, 0.0);
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * eye_v);
    CameraModel {
        r,
        t,
        k,
        width,
        height,
    }
}

/// One reference view rendered by sphere tracing.
#[derive(Clone, Debug)]
pub struct RefView {
    pub width: u32,
    pub height: u32,
    pub image: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    /// Camera-frame z depth; infinity on miss.
    pub depth: Vec<f64>,
    /// Hit positions in world frame; zeros on miss.
    pub points: Vec<[f64; 3]>,
    /// 1 on hit, 0 on miss.
    pub confidence: Vec<f64>,
    pub normals: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShadingParams {
    pub light_dir: [f64; 3],
    pub albedo: [f64; 3],
    pub ambient: f64,
    pub background: [f64; 3],
}

impl Default for ShadingParams {
    fn default() -> Self {
        ShadingParams {
            light_dir: [0.45, -0.35, 0.82],
            albedo: [0.85, 0.55, 0.35],
            ambient: 0.25,
            background: [0.0, 0.0, 0.0],
        }
    }
}

/// Render one view: Lambertian shading from a fixed light, hit mask,
/// z-depth, world-frame point map with unit confidence, and analytic
/// normals.
pub fn render_reference(shape: Shape, center: [f64; 3], cam: &CameraModel, shading: &ShadingParams, t_max: f64) -> RefView {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let light = {
        let l = shading.light_dir;
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let rows: Vec<Vec<(Option<(f64, [f64; 3], [f64; 3])>, [f64; 3])>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let (origin, dir) = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
                    match sphere_trace(shape, center, origin, dir, t_max, 1e-6) {
                        Some(t) => {
                            let p = [
                                origin[0] + t * dir[0],
                                origin[1] + t * dir[1],
                                origin[2] + t * dir[2],
                            ];
                            let n = analytic_normal(shape, center, p);
                            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                            let shade = shading.ambient + (1.0 - shading.ambient) * lambert;
                            let color = [
                                shading.albedo[0] * shade,
                                shading.albedo[1] * shade,
                                shading.albedo[2] * shade,
                            ];
                            (Some((t, p, n)), color)
                        }
                        None => (None, shading.background),
                    }
                })
                .collect()
        })
        .collect();

    let mut view = RefView {
        width: cam.width,
        height: cam.height,
        image: Vec::with_capacity(w * h),
        mask: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        points: Vec::with_capacity(w * h),
        confidence: Vec::with_capacity(w * h),
        normals: Vec::with_capacity(w * h),
    };
    for row in rows {
        for (hit, color) in row {
            view.image.push(color);
            match hit {
                Some((_, p, n)) => {
                    let x = cam.r * Vector3::new(p[0], p[1], p[2]) + cam.t;
                    view.mask.push(true);
                    view.depth.push(x.z);
                    view.points.push(p);
                    view.confidence.push(1.0);
                    view.normals.push(n);
                }
                None => {
                    view.mask.push(false);
                    view.depth.push(f64::INFINITY);
                    view.points.push([0.0; 3]);
                    view.confidence.push(0.0);
                    view.normals.push([0.0; 3]);
                }
            }
        }
    }
    view
}

/// Overwrite every voxel's corners with samples of an analytic field.
pub fn assign_field(octree: &mut OctreeState, field: impl Fn([f64; 3]) -> f64) {
    let bounds = octree.bounds;
    for v in octree.voxels_mut() {
        for k in 0..8 {
            let o = crate::lattice::CORNER_OFFSETS[k];
            let p = crate::lattice::world_from_dense(
                v.anchor,
                [o[0] as f64, o[1] as f64, o[2] as f64],
                v.level,
                &bounds,
            );
            v.geo[k] = field(p);
        }
    }
}

/// Dense octree at `level` sampling an analytic field.
pub fn dense_octree_from_field(
    bounds: SceneBounds,
    level: u8,
    l_max: u8,
    field: impl Fn([f64; 3]) -> f64,
) -> OctreeState {
    let g = SceneBounds::grid(level);
    let mut oct = OctreeState::new(bounds, l_max);
    for i in 0..g {
        for j in 0..g {
            for k in 0..g {
                oct.insert(level, DenseCoord::new(i, j, k), [0.0; 8], [0.5; 3]);
            }
        }
    }
    assign_field(&mut oct, field);
    oct
}

/// Random octree fixture: recursively split cells with probability
/// `split_p` down to `max_level`, keep leaves with probability `keep_p`,
/// fill corners and colors with random values. Leaves are disjoint by
/// construction.
pub fn random_octree(
    rng: &mut ChaCha8Rng,
    bounds: SceneBounds,
    max_level: u8,
    split_p: f64,
    keep_p: f64,
) -> OctreeState {
    let mut oct = OctreeState::new(bounds, max_level);
    let mut stack: Vec<(u8, DenseCoord)> = Vec::new();
    for o in crate::lattice::CORNER_OFFSETS {
        stack.push((1, DenseCoord::new(o[0], o[1], o[2])));
    }
    // depth-first with an explicit stack; order is deterministic given rng
    while let Some((level, anchor)) = stack.pop() {
        if level < max_level && rng.random::<f64>() < split_p {
            for o in crate::lattice::CORNER_OFFSETS {
                stack.push((
                    level + 1,
                    DenseCoord::new(2 * anchor.i + o[0], 2 * anchor.j + o[1], 2 * anchor.k + o[2]),
                ));
            }
        } else if rng.random::<f64>() < keep_p {
            let amp = bounds.edge * 0.25;
            let geo: [f64; 8] = std::array::from_fn(|_| (rng.random::<f64>() * 2.0 - 1.0) * amp);
            let color: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            oct.insert(level, anchor, geo, color);
        }
    }
    oct
}

/// Brute-force traversal oracle: clip the ray against every leaf voxel box
/// and sort by entry parameter. O(N) per ray, independent of the lattice
/// walk used by [`crate::render::traverse_ray`].
pub fn traverse_oracle(
    octree: &OctreeState,
    ray: &crate::render::Ray,
    t_range: (f64, f64),
) -> Vec<(crate::lattice::VoxelId, f64, f64)> {
    let b = &octree.bounds;
    let mut hits = Vec::new();
    for v in octree.leaves() {
        if let Some((t0, t1)) = crate::render::clip_to_box(ray, v.min_world(b), v.max_world(b)) {
            let t0 = t0.max(t_range.0);
            let t1 = t1.min(t_range.1);
            if t1 - t0 > 1e-12 {
                hits.push((v.id, t0, t1));
            }
        }
    }
    hits.sort_by(|a, b| a.1.total_cmp(&b.1));
    hits
}

// --- scene generation -----------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneParams {
    pub shape: Shape,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub edge: f64,
    pub camera_radius: f64,
    pub fov_deg: f64,
    pub seed: u64,
    pub perturb_poses: bool,
    pub shading: ShadingParams,
    /// Ground-truth surface samples written alongside the scene.
    pub gt_samples: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            shape: Shape::Sphere { radius: 1.0 },
            views: 16,
            width: 128,
            height: 128,
            edge: 4.0,
            camera_radius: 3.0,
            fov_deg: 60.0,
            seed: 7,
            perturb_poses: false,
            shading: ShadingParams::default(),
            gt_samples: 100_000,
        }
    }
}

/// Scene metadata stored next to the generated files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneMeta {
    pub bounds: SceneBounds,
    pub params: SceneParams,
}

/// Generate a full scene directory: `images/`, `masks/`, `pointmaps/`,
/// `cameras.json`, `scene.json`, ground-truth mesh and surface samples.
/// Deterministic for a fixed seed.
pub fn generate_scene(dir: &Path, params: &SceneParams) -> Result<SceneMeta> {
    let bounds = SceneBounds::new(
        [-0.5 * params.edge, -0.5 * params.edge, -0.5 * params.edge],
        params.edge,
    )?;
    let center = bounds.center();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("pointmaps"))?;

    let cams = camera_ring(
        params.views,
        params.camera_radius,
        center,
        params.width,
        params.height,
        params.fov_deg,
    )?;
    let t_max = params.camera_radius + 2.0 * params.edge;

    // optional known similarity for exercising pose alignment end to end
    let sim = params.perturb_poses.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5ca1ab1e);
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        ));
        Similarity7 {
            scale: 1.3,
            r: nalgebra::Rotation3::from_axis_angle(&axis, 0.35).into_inner(),
            t: Vector3::new(
                0.2 * params.edge * (rng.random::<f64>() - 0.5),
                0.2 * params.edge * (rng.random::<f64>() - 0.5),
                0.2 * params.edge * (rng.random::<f64>() - 0.5),
            ),
        }
    });
    let sim_inv = sim.as_ref().map(|s| Similarity7 {
        scale: 1.0 / s.scale,
        r: s.r.transpose(),
        t: -(1.0 / s.scale) * (s.r.transpose() * s.t),
    });

    let mut views_json = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let view = render_reference(params.shape, center, cam, &params.shading, t_max);
        crate::io::write_png_rgb(
            &dir.join(format!("images/view_{i:04}.png")),
            view.width,
            view.height,
            &view.image,
        )?;
        let mask: Vec<f64> = view.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        crate::io::write_png_gray(&dir.join(format!("masks/view_{i:04}.png")), view.width, view.height, &mask)?;
        let points: Vec<[f64; 3]> = match &sim_inv {
            Some(inv) => view.points.iter().map(|&p| inv.apply(p)).collect(),
            None => view.points.clone(),
        };
        crate::io::write_pointmap_ply(
            &dir.join(format!("pointmaps/view_{i:04}.ply")),
            &points,
            &view.confidence,
        )?;

        let mut vj = crate::io::ViewJson::from_camera(cam);
        if let Some(inv) = &sim_inv {
            // estimated pose: same viewing rays expressed in the perturbed frame
            let r_est = cam.r * sim.as_ref().unwrap().r;
            let c_est = {
                let c = cam.center();
                inv.apply([c.x, c.y, c.z])
            };
            let t_est = -(r_est * Vector3::new(c_est[0], c_est[1], c_est[2]));
            vj.r_est = Some(r_est.transpose().as_slice().to_vec());
            vj.t_est = Some(t_est.as_slice().to_vec());
        }
        views_json.push(vj);
    }
    crate::io::write_cameras_json(&dir.join("cameras.json"), &crate::io::CamerasJson { views: views_json })?;

    // ground truth: marching cubes over the analytic field + area-weighted samples
    let gt_oct = dense_octree_from_field(bounds, 6, 7, |p| analytic_sdf(params.shape, center, p));
    let index = crate::assoc::AssociationIndex::rebuild(&gt_oct, 6)?;
    let gt_mesh = crate::meshx::marching_cubes(&gt_oct, &index, 7, bounds.edge)?;
    crate::io::write_obj(&dir.join("gt_mesh.obj"), &gt_mesh)?;
    let gt_points = match params.shape {
        // exact analytic samples for the sphere; mesh samples otherwise
        Shape::Sphere { radius } => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x90ddf00d);
            (0..params.gt_samples)
                .map(|_| {
                    let v = loop {
                        let v = Vector3::new(
                            rng.random::<f64>() * 2.0 - 1.0,
                            rng.random::<f64>() * 2.0 - 1.0,
                            rng.random::<f64>() * 2.0 - 1.0,
                        );
                        if v.norm_squared() > 1e-6 && v.norm_squared() <= 1.0 {
                            break v.normalize();
                        }
                    };
                    [
                        center[0] + radius * v.x,
                        center[1] + radius * v.y,
                        center[2] + radius * v.z,
                    ]
                })
                .collect::<Vec<_>>()
        }
        _ => gt_mesh.sample_surface(params.gt_samples, params.seed ^ 0x90ddf00d),
    };
    let conf = vec![1.0; gt_points.len()];
    crate::io::write_pointmap_ply(&dir.join("gt_points.ply"), &gt_points, &conf)?;

    let meta = SceneMeta {
        bounds,
        params: params.clone(),
    };
    let file = std::fs::File::create(dir.join("scene.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &meta)?;
    Ok(meta)
}

pub fn read_scene_meta(dir: &Path) -> Result<SceneMeta> {
    let path = dir.join("scene.json");
    if !path.exists() {
        return Err(Error::MissingInputs(vec![path]));
    }
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdf_examples() {
        let c = [0.0; 3];
        assert_eq!(analytic_sdf(Shape::Sphere { radius: 1.0 }, c, [2.0, 0.0, 0.0]), 1.0);
        assert_eq!(analytic_sdf(Shape::Sphere { radius: 1.0 }, c, [0.0, 0.0, 0.0]), -1.0);
        // torus (R=1, r=0.25) passes through (1, 0, 0.25)
        let t = analytic_sdf(Shape::Torus { major: 1.0, minor: 0.25 }, c, [1.0, 0.0, 0.25]);
        assert!(t.abs() < 1e-12);
        let b = analytic_sdf(Shape::Cuboid { half: [1.0, 1.0, 1.0] }, c, [2.0, 0.0, 0.0]);
        assert!((b - 1.0).abs() < 1e-12);
        let inside = analytic_sdf(Shape::Cuboid { half: [1.0, 1.0, 1.0] }, c, [0.5, 0.0, 0.0]);
        assert!((inside + 0.5).abs() < 1e-12);
    }

    #[test]
    fn camera_ring_geometry() {
        let target = [0.5, -0.25, 1.0];
        let cams = camera_ring(4, 3.0, target, 64, 64, 60.0).unwrap();
        assert_eq!(cams.len(), 6);
        for cam in &cams {
            let c = cam.center();
            let d = (c - Vector3::new(target[0], target[1], target[2])).norm();
            assert!((d - 3.0).abs() < 1e-12);
            // rotation is orthonormal with det +1
            assert!((cam.r * cam.r.transpose() - Matrix3::identity()).norm() < 1e-12);
            assert!((cam.r.determinant() - 1.0).abs() < 1e-12);
            // look-at: target projects to the principal point
            let (u, v, depth) = cam.project(target).unwrap();
            assert!(depth > 0.0);
            assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
        }
        // consecutive azimuth gap 2*pi/n on the ring
        let az: Vec<f64> = cams[..4]
            .iter()
            .map(|c| {
                let p = c.center();
                (p.y - target[1]).atan2(p.x - target[0])
            })
            .collect();
        for i in 0..3 {
            let mut gap = az[i + 1] - az[i];
            while gap < 0.0 {
                gap += TAU;
            }
            assert!((gap - TAU / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_trace_depth() {
        let shape = Shape::Sphere { radius: 1.0 };
        let cams = camera_ring(4, 3.0, [0.0; 3], 64, 64, 60.0).unwrap();
        let cam = &cams[0];
        // ray through the sphere center hits at distance(cam, center) - r
        let c = cam.center();
        let dir = (-c).normalize();
        let t = sphere_trace(shape, [0.0; 3], [c.x, c.y, c.z], [dir.x, dir.y, dir.z], 10.0, 1e-6).unwrap();
        assert!((t - (c.norm() - 1.0)).abs() < 1e-5);
    }

    #[test]
    fn reference_views_are_consistent() {
        let shape = Shape::Sphere { radius: 1.0 };
        let cams = camera_ring(3, 3.0, [0.0; 3], 48, 48, 60.0).unwrap();
        let view = render_reference(shape, [0.0; 3], &cams[0], &ShadingParams::default(), 12.0);
        let cam = &cams[0];
        let mut hits = 0;
        for py in 0..48usize {
            for px in 0..48usize {
                let i = py * 48 + px;
                if !view.mask[i] {
                    assert_eq!(view.image[i], ShadingParams::default().background);
                    continue;
                }
                hits += 1;
                let p = view.points[i];
                // on-surface by construction
                assert!(analytic_sdf(shape, [0.0; 3], p).abs() < 1e-5);
                // unprojecting the depth reproduces the point map
                let (origin, dir) = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
                let dir_cam = cam.r * Vector3::new(dir[0], dir[1], dir[2]);
                let t = view.depth[i] / dir_cam.z;
                for a in 0..3 {
                    assert!((origin[a] + t * dir[a] - p[a]).abs() < 1e-6);
                }
                // normals unit
                let n = view.normals[i];
                assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        assert!(hits > 200, "sphere should cover a decent part of the frame");
    }

    #[test]
    fn random_octree_leaves_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bounds = SceneBounds::new([0.0; 3], 1.0).unwrap();
        for _ in 0..5 {
            let oct = random_octree(&mut rng, bounds, 5, 0.6, 0.8);
            let mut seen = std::collections::HashSet::new();
            for v in oct.leaves() {
                for c in v.cells_covered(5).unwrap() {
                    assert!(seen.insert(c), "cell {c:?} covered twice");
                }
            }
        }
    }
}
