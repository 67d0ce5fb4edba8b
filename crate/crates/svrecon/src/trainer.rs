//! Training orchestration: ray batching, forward rendering, loss assembly,
//! the hand-written backward pass into corner/color gradients, first-order
//! parameter updates, schedules, and the adapt cadence.
//!
//! The backward pass is exact reverse mode through the compositing chain:
//! for a linear payload `L = sum_i w_i a_i + T_final b` with
//! `w_i = T_i alpha_i`, the alpha gradient is `T_i (a_i - U_i)` where
//! `U_i` accumulates the downstream contribution with unit transmittance
//! (`U_i = alpha_{i+1} a_{i+1} + (1 - alpha_{i+1}) U_{i+1}`, `U_last = b`).
//! This avoids dividing by `1 - alpha` near opaque segments.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapt::{self, Routing};
use crate::assoc::AssociationIndex;
use crate::config::TrainConfig;
use crate::field::{grad_center, normal_at_center, sample_in_voxel, EPS_NORMAL};
use crate::geoinit::{CameraModel, PointMapView, Similarity7};
use crate::io::RunLogLine;
use crate::lattice::{OctreeState, VoxelId};
use crate::losses::{self, mask_loss, photometric, GradAccumulator, LossWeights};
use crate::render::{alpha_from_sdf, d_alpha, initial_sharpness, Ray, RaySegment, SharpnessSchedule};
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EMA_DECAY: f64 = 0.9;

/// Loaded training data for one scene.
pub struct SceneData {
    pub cameras: Vec<CameraModel>,
    /// Per view, row-major RGB in [0,1].
    pub images: Vec<Vec<[f64; 3]>>,
    /// Per view, true inside the object mask.
    pub masks: Vec<Vec<bool>>,
    /// Per view prior normal map and validity, derived from the point maps.
    pub prior_normals: Vec<Vec<[f64; 3]>>,
    pub prior_valid: Vec<Vec<bool>>,
}

impl SceneData {
    /// Load a scene directory (cameras.json, images/, masks/, pointmaps/),
    /// align point maps when estimated poses are present, and derive the
    /// per-view prior normal maps.
    pub fn load(dir: &Path, conf_threshold: f64) -> Result<SceneData> {
        let cam_path = dir.join("cameras.json");
        if !cam_path.exists() {
            return Err(Error::MissingInputs(vec![cam_path]));
        }
        let cams_json = crate::io::read_cameras_json(&cam_path)?;
        let mut missing = Vec::new();
        for i in 0..cams_json.views.len() {
            for sub in ["images", "masks", "pointmaps"] {
                let ext = if sub == "pointmaps" { "ply" } else { "png" };
                let p = dir.join(format!("{sub}/view_{i:04}.{ext}"));
                if !p.exists() {
                    missing.push(p);
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }

        let mut cameras = Vec::new();
        let mut estimated = Vec::new();
        for view in &cams_json.views {
            cameras.push(view.camera(&cam_path)?);
            estimated.push(view.estimated_pose(&cam_path)?);
        }
        let est_poses: Option<Vec<_>> = estimated.into_iter().collect();
        let sim = match &est_poses {
            Some(poses) => {
                let src: Vec<[f64; 3]> = poses
                    .iter()
                    .map(|(r, t)| {
                        let c = crate::geoinit::camera_center(r, t);
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
                crate::geoinit::umeyama_align(&src, &dst)?
            }
            None => Similarity7::identity(),
        };

        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut prior_normals = Vec::new();
        let mut prior_valid = Vec::new();
        for (i, cam) in cameras.iter().enumerate() {
            let (w, h, rgb) = crate::io::read_png_rgb(&dir.join(format!("images/view_{i:04}.png")))?;
            if (w, h) != (cam.width, cam.height) {
                return Err(Error::format(
                    dir.join(format!("images/view_{i:04}.png")),
                    format!("image size {w}x{h} does not match camera {}x{}", cam.width, cam.height),
                ));
            }
            let (_, _, gray) = crate::io::read_png_gray(&dir.join(format!("masks/view_{i:04}.png")))?;
            let (points, conf) =
                crate::io::read_pointmap_ply(&dir.join(format!("pointmaps/view_{i:04}.ply")))?;
            if points.len() != (w * h) as usize {
                return Err(Error::format(
                    dir.join(format!("pointmaps/view_{i:04}.ply")),
                    "point count does not match image size",
                ));
            }
            let warped: Vec<[f64; 3]> = points.iter().map(|&p| sim.apply(p)).collect();
            let view = PointMapView {
                width: w,
                height: h,
                points: warped,
                confidence: conf,
            };
            let (normals, valid) = losses::normal_prior_from_pointmap(&view, cam, conf_threshold);
            images.push(rgb);
            masks.push(gray.iter().map(|&v| v >= 0.5).collect());
            prior_normals.push(normals);
            prior_valid.push(valid);
        }
        Ok(SceneData {
            cameras,
            images,
            masks,
            prior_normals,
            prior_valid,
        })
    }
}

/// One ray batch with references.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub ref_color: Vec<[f64; 3]>,
    pub mask_inside: Vec<bool>,
    pub prior_normal: Vec<[f64; 3]>,
    pub prior_valid: Vec<bool>,
}

/// Adam moments, slot-aligned with the octree voxels.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    ids: Vec<VoxelId>,
    m_geo: Vec<[f64; 8]>,
    v_geo: Vec<[f64; 8]>,
    m_color: Vec<[f64; 3]>,
    v_color: Vec<[f64; 3]>,
}

impl OptimState {
    pub fn new(octree: &OctreeState) -> Self {
        let n = octree.len();
        OptimState {
            step: 0,
            ids: octree.voxels().iter().map(|v| v.id).collect(),
            m_geo: vec![[0.0; 8]; n],
            v_geo: vec![[0.0; 8]; n],
            m_color: vec![[0.0; 3]; n],
            v_color: vec![[0.0; 3]; n],
        }
    }

    /// Re-align moment rows after a structural change. Surviving voxels
    /// keep their moments; new voxels start at zero.
    pub fn remap(&mut self, octree: &OctreeState) {
        let old: HashMap<VoxelId, usize> =
            self.ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
        let n = octree.len();
        let mut m_geo = vec![[0.0; 8]; n];
        let mut v_geo = vec![[0.0; 8]; n];
        let mut m_color = vec![[0.0; 3]; n];
        let mut v_color = vec![[0.0; 3]; n];
        let mut ids = Vec::with_capacity(n);
        for (slot, v) in octree.voxels().iter().enumerate() {
            ids.push(v.id);
            if let Some(&o) = old.get(&v.id) {
                m_geo[slot] = self.m_geo[o];
                v_geo[slot] = self.v_geo[o];
                m_color[slot] = self.m_color[o];
                v_color[slot] = self.v_color[o];
            }
        }
        self.ids = ids;
        self.m_geo = m_geo;
        self.v_geo = v_geo;
        self.m_color = m_color;
        self.v_color = v_color;
    }
}

/// Bias-corrected Adam step on every voxel parameter. Zero gradients (and
/// zero rates) leave parameters bit-identical.
pub fn apply_update(
    octree: &mut OctreeState,
    grads: &GradAccumulator,
    optim: &mut OptimState,
    lr_geo: f64,
    lr_color: f64,
) {
    optim.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(optim.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(optim.step as i32);
    for (slot, v) in octree.voxels_mut().iter_mut().enumerate() {
        for k in 0..8 {
            let g = grads.geo[slot][k];
            let m = &mut optim.m_geo[slot][k];
            let s = &mut optim.v_geo[slot][k];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
            if lr_geo != 0.0 {
                v.geo[k] -= lr_geo * (*m / bc1) / ((*s / bc2).sqrt() + ADAM_EPS);
            }
        }
        for c in 0..3 {
            let g = grads.color[slot][c];
            let m = &mut optim.m_color[slot][c];
            let s = &mut optim.v_color[slot][c];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
            if lr_color != 0.0 {
                v.color[c] = (v.color[c] - lr_color * (*m / bc1) / ((*s / bc2).sqrt() + ADAM_EPS)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Forward cache for one ray.
pub struct RayCache {
    pub segments: Vec<RaySegment>,
    pub alphas: Vec<f64>,
    /// Transmittance before each segment.
    pub trans: Vec<f64>,
    /// Visibility weights `T_i alpha_i`.
    pub weights: Vec<f64>,
    pub t_final: f64,
}

impl RayCache {
    pub fn from_segments(segments: Vec<RaySegment>, s: f64) -> RayCache {
        let alphas: Vec<f64> = segments.iter().map(|g| alpha_from_sdf(g.f_in, g.f_out, s)).collect();
        let mut trans = Vec::with_capacity(alphas.len());
        let mut weights = Vec::with_capacity(alphas.len());
        let mut t = 1.0;
        for &a in &alphas {
            trans.push(t);
            weights.push(t * a);
            t *= 1.0 - a;
        }
        RayCache {
            segments,
            alphas,
            trans,
            weights,
            t_final: t,
        }
    }
}

/// Upstream gradients entering one ray's backward pass.
#[derive(Clone, Debug, Default)]
pub struct RayUpstream {
    pub d_color: [f64; 3],
    pub d_normal: [f64; 3],
    /// Direct per-segment visibility-weight gradients (depth terms).
    pub d_weight: Vec<f64>,
    /// Direct per-segment SDF gradients `(d f_in, d f_out)` (ray-Eikonal).
    pub d_f: Vec<(f64, f64)>,
    /// Gradient on the final transmittance, including the background
    /// coupling of the color pass.
    pub d_tfinal: f64,
}

/// Sparse per-ray gradient rows, sorted by slot for deterministic merging.
pub type SparseGrads = Vec<(u32, [f64; 8], [f64; 3])>;

fn sparse_add_geo(rows: &mut SparseGrads, slot: u32, k: usize, g: f64) {
    if let Some(row) = rows.iter_mut().find(|r| r.0 == slot) {
        row.1[k] += g;
        return;
    }
    let mut geo = [0.0; 8];
    geo[k] = g;
    rows.push((slot, geo, [0.0; 3]));
}

fn sparse_add_color(rows: &mut SparseGrads, slot: u32, c: usize, g: f64) {
    if let Some(row) = rows.iter_mut().find(|r| r.0 == slot) {
        row.2[c] += g;
        return;
    }
    let mut color = [0.0; 3];
    color[c] = g;
    rows.push((slot, [0.0; 8], color));
}

/// Exact reverse pass of the compositing chain for one ray: gradients
/// reach voxel colors (`T_i alpha_i` each), corner SDFs through the alpha
/// partials at the cached entry/exit points, and through the per-voxel
/// normal payload when present.
pub fn backprop_render(
    octree: &OctreeState,
    cache: &RayCache,
    colors: &[[f64; 3]],
    normals: Option<&[[f64; 3]]>,
    upstream: &RayUpstream,
    s: f64,
) -> SparseGrads {
    let n = cache.segments.len();
    let mut rows: SparseGrads = Vec::with_capacity(2 * n.min(16));
    if n == 0 {
        return rows;
    }
    // scalar payload per segment
    let mut payload = vec![0.0; n];
    for i in 0..n {
        let mut a = upstream.d_color[0] * colors[i][0]
            + upstream.d_color[1] * colors[i][1]
            + upstream.d_color[2] * colors[i][2];
        if let Some(ns) = normals {
            a += upstream.d_normal[0] * ns[i][0]
                + upstream.d_normal[1] * ns[i][1]
                + upstream.d_normal[2] * ns[i][2];
        }
        if let Some(&w) = upstream.d_weight.get(i) {
            a += w;
        }
        payload[i] = a;
    }
    // downstream accumulation with unit transmittance
    let mut u = vec![0.0; n];
    u[n - 1] = upstream.d_tfinal;
    for i in (0..n - 1).rev() {
        u[i] = cache.alphas[i + 1] * payload[i + 1] + (1.0 - cache.alphas[i + 1]) * u[i + 1];
    }

    let b = &octree.bounds;
    for i in 0..n {
        let seg = &cache.segments[i];
        let slot = octree.slot(seg.voxel).expect("cached voxel alive") as u32;
        let v = &octree.voxels()[slot as usize];
        let w_i = cache.weights[i];

        // color payload
        for c in 0..3 {
            let g = w_i * upstream.d_color[c];
            if g != 0.0 {
                sparse_add_color(&mut rows, slot, c, g);
            }
        }
        // alpha chain into the endpoint SDF values
        let d_alpha_up = cache.trans[i] * (payload[i] - u[i]);
        let (mut d_fin, mut d_fout) = if d_alpha_up != 0.0 {
            let (da_in, da_out) = d_alpha(seg.f_in, seg.f_out, s);
            (d_alpha_up * da_in, d_alpha_up * da_out)
        } else {
            (0.0, 0.0)
        };
        if let Some(&(din, dout)) = upstream.d_f.get(i) {
            d_fin += din;
            d_fout += dout;
        }
        if d_fin != 0.0 || d_fout != 0.0 {
            let w_in = sample_in_voxel(v, b, seg.p_in).corner_weights;
            let w_out = sample_in_voxel(v, b, seg.p_out).corner_weights;
            for k in 0..8 {
                let g = d_fin * w_in[k] + d_fout * w_out[k];
                if g != 0.0 {
                    sparse_add_geo(&mut rows, slot, k, g);
                }
            }
        }
        // normal payload through the center-gradient normalization
        if let Some(ns) = normals {
            let dn = [
                w_i * upstream.d_normal[0],
                w_i * upstream.d_normal[1],
                w_i * upstream.d_normal[2],
            ];
            if dn != [0.0; 3] && ns[i] != [0.0; 3] {
                let g = grad_center(v, b);
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if norm > EPS_NORMAL {
                    let nrm = [g[0] / norm, g[1] / norm, g[2] / norm];
                    let dot = dn[0] * nrm[0] + dn[1] * nrm[1] + dn[2] * nrm[2];
                    let dg = [
                        (dn[0] - dot * nrm[0]) / norm,
                        (dn[1] - dot * nrm[1]) / norm,
                        (dn[2] - dot * nrm[2]) / norm,
                    ];
                    let h_v = v.size(b);
                    for k in 0..8 {
                        let mut acc = 0.0;
                        for a in 0..3 {
                            acc += dg[a] * crate::losses::axis_corner_sign(k, a);
                        }
                        let g = acc / (4.0 * h_v);
                        if g != 0.0 {
                            sparse_add_geo(&mut rows, slot, k, g);
                        }
                    }
                }
            }
        }
    }
    rows.sort_unstable_by_key(|r| r.0);
    rows
}

/// Per-term loss values for one training step.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub photo: f64,
    pub normal: f64,
    pub eik: f64,
    pub smooth: f64,
    pub local_eik: f64,
    pub mask: f64,
    pub ray_eik: f64,
    pub nd_mean: f64,
    pub nd_med: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub grads: GradAccumulator,
    /// Valid pixels that entered the normal loss (0 with the term active
    /// raises a warning).
    pub normal_warning: bool,
}

impl LossReport {
    fn term_values(&self) -> [(&'static str, f64); 9] {
        [
            ("photo", self.photo),
            ("normal", self.normal),
            ("eik", self.eik),
            ("smooth", self.smooth),
            ("local_eik", self.local_eik),
            ("mask", self.mask),
            ("ray_eik", self.ray_eik),
            ("nd_mean", self.nd_mean),
            ("nd_med", self.nd_med),
        ]
    }
}

pub struct Trainer {
    pub octree: OctreeState,
    pub cfg: TrainConfig,
    pub sched: SharpnessSchedule,
    pub optim: OptimState,
    rng: ChaCha8Rng,
    /// EMA of per-voxel photometric gradient magnitude (slot-aligned).
    ema: Vec<f64>,
    ema_ids: Vec<VoxelId>,
    routing: Routing,
    render_index: AssociationIndex,
    lattice_index: Option<AssociationIndex>,
    pub iter: u64,
    current_target: u8,
    last_pruned: usize,
    last_subdivided: usize,
}

impl Trainer {
    pub fn new(octree: OctreeState, cfg: TrainConfig) -> Result<Trainer> {
        Self::resume(octree, cfg, 0)
    }

    /// Create a trainer whose schedules continue from `start_iter`
    /// (checkpoint resume).
    pub fn resume(mut octree: OctreeState, cfg: TrainConfig, start_iter: u64) -> Result<Trainer> {
        cfg.validate()?;
        octree.l_max = cfg.l_max;
        let init_level = cfg.level_schedule[0].level;
        let h0 = octree.bounds.cell_size(init_level);
        let mut sched = SharpnessSchedule::new(initial_sharpness(h0), init_level, cfg.ramp_coeff)?;
        // replay completed level phases up to start_iter
        let mut current_target = init_level;
        for step in cfg.level_schedule.iter().skip(1) {
            if step.iter <= start_iter {
                sched.set_progress(1.0)?;
                let h_old = octree.bounds.cell_size(current_target);
                let h_new = octree.bounds.cell_size(step.level);
                sched.level_change(h_old, h_new, step.level)?;
                current_target = step.level;
            }
        }
        let routing = adapt::route_regularizers(&octree, cfg.l_cap)?;
        let render_level = octree.finest_leaf_level().max(init_level);
        let render_index = AssociationIndex::rebuild(&octree, render_level)?;
        let lattice_index = if routing.lattice_level != render_level {
            Some(AssociationIndex::rebuild_from(
                &octree,
                &routing.lattice,
                routing.lattice_level,
            )?)
        } else {
            None
        };
        let optim = OptimState::new(&octree);
        let ema = vec![0.0; octree.len()];
        let ema_ids = octree.voxels().iter().map(|v| v.id).collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            octree,
            cfg,
            sched,
            optim,
            rng,
            ema,
            ema_ids,
            routing,
            render_index,
            lattice_index,
            iter: start_iter,
            current_target,
            last_pruned: 0,
            last_subdivided: 0,
        })
    }

    pub fn render_index(&self) -> &AssociationIndex {
        &self.render_index
    }

    /// Rebuild indices, routing, and slot-aligned state after a structural
    /// change.
    fn refresh_structure(&mut self) -> Result<()> {
        self.routing = adapt::route_regularizers(&self.octree, self.cfg.l_cap)?;
        let render_level = self
            .octree
            .finest_leaf_level()
            .max(self.cfg.level_schedule[0].level);
        self.render_index = AssociationIndex::rebuild(&self.octree, render_level)?;
        self.lattice_index = if self.routing.lattice_level != render_level {
            Some(AssociationIndex::rebuild_from(
                &self.octree,
                &self.routing.lattice,
                self.routing.lattice_level,
            )?)
        } else {
            None
        };
        self.optim.remap(&self.octree);
        let old: HashMap<VoxelId, usize> =
            self.ema_ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
        let mut ema = vec![0.0; self.octree.len()];
        let mut ema_ids = Vec::with_capacity(self.octree.len());
        for (slot, v) in self.octree.voxels().iter().enumerate() {
            ema_ids.push(v.id);
            if let Some(&o) = old.get(&v.id) {
                ema[slot] = self.ema[o];
            }
        }
        self.ema = ema;
        self.ema_ids = ema_ids;
        Ok(())
    }

    /// Sample one training batch: `rays_per_batch` uniform pixels of a
    /// single random view.
    pub fn sample_batch(&mut self, scene: &SceneData) -> RayBatch {
        let view = self.rng.random_range(0..scene.cameras.len());
        let cam = &scene.cameras[view];
        let (w, h) = (cam.width as usize, cam.height as usize);
        let n = self.cfg.rays_per_batch;
        let mut batch = RayBatch {
            rays: Vec::with_capacity(n),
            ref_color: Vec::with_capacity(n),
            mask_inside: Vec::with_capacity(n),
            prior_normal: Vec::with_capacity(n),
            prior_valid: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let px = self.rng.random_range(0..w);
            let py = self.rng.random_range(0..h);
            let i = py * w + px;
            let (origin, dir) = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
            batch.rays.push(Ray { origin, dir });
            batch.ref_color.push(scene.images[view][i]);
            batch.mask_inside.push(scene.masks[view][i]);
            batch.prior_normal.push(scene.prior_normals[view][i]);
            batch.prior_valid.push(scene.prior_valid[view][i]);
        }
        batch
    }

    /// One optimization step on a ray batch. The association index must be
    /// current (refreshed after any structural change).
    pub fn train_step(&mut self, batch: &RayBatch) -> Result<LossReport> {
        let weights_now = losses::eval_schedule(self.iter, &self.cfg.schedule);
        let s = self.sched.s();
        let use_normals = weights_now.normal > 0.0;
        let bg = self.cfg.background;

        // forward: traverse + composite, keeping per-ray caches
        struct Forward {
            cache: RayCache,
            colors: Vec<[f64; 3]>,
            normals: Vec<[f64; 3]>,
            color: [f64; 3],
            normal: [f64; 3],
        }
        let octree = &self.octree;
        let index = &self.render_index;
        let forwards: Vec<Forward> = batch
            .rays
            .par_iter()
            .map(|ray| {
                let segments = crate::render::traverse_ray(octree, index, ray, (0.0, f64::INFINITY))
                    .expect("unit rays traverse");
                let colors: Vec<[f64; 3]> = segments
                    .iter()
                    .map(|g| octree.voxel(g.voxel).expect("live voxel").color)
                    .collect();
                let normals: Vec<[f64; 3]> = if use_normals {
                    segments
                        .iter()
                        .map(|g| {
                            normal_at_center(octree.voxel(g.voxel).expect("live voxel"), &octree.bounds)
                                .unwrap_or([0.0; 3])
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let cache = RayCache::from_segments(segments, s);
                let mut color = [0.0; 3];
                let mut normal = [0.0; 3];
                for (i, &w) in cache.weights.iter().enumerate() {
                    for a in 0..3 {
                        color[a] += w * colors[i][a];
                        if use_normals {
                            normal[a] += w * normals[i][a];
                        }
                    }
                }
                for a in 0..3 {
                    color[a] += cache.t_final * bg[a];
                }
                Forward {
                    cache,
                    colors,
                    normals,
                    color,
                    normal,
                }
            })
            .collect();

        // pixel-level terms
        let rendered_colors: Vec<[f64; 3]> = forwards.iter().map(|f| f.color).collect();
        let (photo_val, d_photo) = photometric(&rendered_colors, &batch.ref_color);

        let (mask_val, d_mask) = if weights_now.mask > 0.0 {
            let t: Vec<f64> = forwards.iter().map(|f| f.cache.t_final).collect();
            mask_loss(&t, &batch.mask_inside)
        } else {
            (0.0, vec![0.0; forwards.len()])
        };

        let (normal_val, d_normal, normal_warning) = if use_normals {
            let rendered: Vec<[f64; 3]> = forwards.iter().map(|f| f.normal).collect();
            let (v, g, m) = losses::normal_loss(&rendered, &batch.prior_normal, &batch.prior_valid);
            (v, g, m == 0)
        } else {
            (0.0, vec![[0.0; 3]; forwards.len()], false)
        };

        let ray_count = forwards.len().max(1) as f64;
        let mut ray_eik_val = 0.0;
        let mut nd_mean_val = 0.0;
        let mut nd_med_val = 0.0;
        let mut d_f_per_ray: Vec<Vec<(f64, f64)>> = vec![Vec::new(); forwards.len()];
        let mut d_w_per_ray: Vec<Vec<f64>> = vec![Vec::new(); forwards.len()];
        for (r, f) in forwards.iter().enumerate() {
            if weights_now.ray_eik > 0.0 {
                let (v, g) = losses::ray_eikonal(&f.cache.segments, &f.cache.weights);
                ray_eik_val += v / ray_count;
                d_f_per_ray[r] = g
                    .into_iter()
                    .map(|(a, b)| (a * weights_now.ray_eik / ray_count, b * weights_now.ray_eik / ray_count))
                    .collect();
            }
            let mut dw = vec![0.0; f.cache.segments.len()];
            let mut any = false;
            if weights_now.nd_mean > 0.0 {
                let (v, g) = losses::depth_concentration(&f.cache.segments, &f.cache.weights, false);
                nd_mean_val += v / ray_count;
                for (i, gi) in g.iter().enumerate() {
                    dw[i] += weights_now.nd_mean * gi / ray_count;
                }
                any = true;
            }
            if weights_now.nd_med > 0.0 {
                let (v, g) = losses::depth_concentration(&f.cache.segments, &f.cache.weights, true);
                nd_med_val += v / ray_count;
                for (i, gi) in g.iter().enumerate() {
                    dw[i] += weights_now.nd_med * gi / ray_count;
                }
                any = true;
            }
            if any {
                d_w_per_ray[r] = dw;
            }
        }

        // backward through the compositing chain (total-loss upstream), plus
        // a photometric-only pass feeding the subdivision statistic
        let upstreams: Vec<RayUpstream> = (0..forwards.len())
            .map(|r| RayUpstream {
                d_color: d_photo[r],
                d_normal: [
                    weights_now.normal * d_normal[r][0],
                    weights_now.normal * d_normal[r][1],
                    weights_now.normal * d_normal[r][2],
                ],
                d_weight: std::mem::take(&mut d_w_per_ray[r]),
                d_f: std::mem::take(&mut d_f_per_ray[r]),
                d_tfinal: weights_now.mask * d_mask[r]
                    + d_photo[r][0] * bg[0]
                    + d_photo[r][1] * bg[1]
                    + d_photo[r][2] * bg[2],
            })
            .collect();
        let per_ray: Vec<(SparseGrads, SparseGrads)> = forwards
            .par_iter()
            .zip(&upstreams)
            .map(|(f, up)| {
                let total = backprop_render(
                    octree,
                    &f.cache,
                    &f.colors,
                    use_normals.then_some(f.normals.as_slice()),
                    up,
                    s,
                );
                let photo_only = backprop_render(
                    octree,
                    &f.cache,
                    &f.colors,
                    None,
                    &RayUpstream {
                        d_color: up.d_color,
                        d_tfinal: up.d_color[0] * bg[0] + up.d_color[1] * bg[1] + up.d_color[2] * bg[2],
                        ..Default::default()
                    },
                    s,
                );
                (total, photo_only)
            })
            .collect();

        let mut grads = GradAccumulator::zeros(self.octree.len());
        let mut photo_mag = vec![0.0; self.octree.len()];
        for (total, photo_only) in &per_ray {
            for &(slot, geo, color) in total {
                let slot = slot as usize;
                for k in 0..8 {
                    grads.geo[slot][k] += geo[k];
                }
                for c in 0..3 {
                    grads.color[slot][c] += color[c];
                }
            }
            for &(slot, geo, _) in photo_only {
                photo_mag[slot as usize] += geo.iter().map(|g| g.abs()).sum::<f64>();
            }
        }

        // lattice regularizers on the routed (capped) index
        let h_lat = self.octree.bounds.cell_size(self.routing.lattice_level);
        let mut eik_val = 0.0;
        let mut smooth_val = 0.0;
        if weights_now.eik > 0.0 || weights_now.smooth > 0.0 {
            let lattice_index = self.lattice_index.as_ref().unwrap_or(&self.render_index);
            let samples = losses::sample_cells(
                &self.octree,
                lattice_index,
                self.cfg.reg_samples,
                &mut self.rng,
            );
            let mut reg = GradAccumulator::zeros(self.octree.len());
            if weights_now.eik > 0.0 {
                let (v, g) = losses::eikonal_global(&self.octree, &samples, h_lat);
                eik_val = v;
                reg.add_scaled(&g, weights_now.eik);
            }
            if weights_now.smooth > 0.0 {
                let (v, g) = losses::laplacian_smooth(&self.octree, &samples, h_lat);
                smooth_val = v;
                reg.add_scaled(&g, weights_now.smooth);
            }
            // push cap-level ancestor gradients down to their descendants
            let internal_roots: Vec<VoxelId> = self
                .routing
                .lattice
                .iter()
                .copied()
                .filter(|&id| self.octree.voxel(id).map(|v| !v.leaf).unwrap_or(false))
                .collect();
            if !internal_roots.is_empty() {
                adapt::prolongate(&self.octree, &internal_roots, &mut reg)?;
            }
            grads.add_scaled(&reg, 1.0);
        }

        // local Eikonal on a random half of the eligible voxels, weight
        // rescaled so the expected contribution is unchanged
        let mut local_eik_val = 0.0;
        if weights_now.local_eik > 0.0 && !self.routing.local.is_empty() {
            let prob = self.cfg.local_eik_prob;
            let subset: Vec<VoxelId> = self
                .routing
                .local
                .iter()
                .copied()
                .filter(|_| self.rng.random::<f64>() < prob)
                .collect();
            if !subset.is_empty() {
                let (v, g) = losses::eikonal_local(&self.octree, &subset);
                local_eik_val = v / prob;
                grads.add_scaled(&g, weights_now.local_eik / prob);
            }
        }

        let total = photo_val
            + weights_now.normal * normal_val
            + weights_now.eik * eik_val
            + weights_now.smooth * smooth_val
            + weights_now.local_eik * local_eik_val
            + weights_now.mask * mask_val
            + weights_now.ray_eik * ray_eik_val
            + weights_now.nd_mean * nd_mean_val
            + weights_now.nd_med * nd_med_val;

        let report = LossReport {
            photo: photo_val,
            normal: normal_val,
            eik: eik_val,
            smooth: smooth_val,
            local_eik: local_eik_val,
            mask: mask_val,
            ray_eik: ray_eik_val,
            nd_mean: nd_mean_val,
            nd_med: nd_med_val,
            total,
            weights: weights_now,
            grads,
            normal_warning,
        };
        self.check_finite(&report)?;

        // first-order update; geometry rate scales with the current finest
        // cell size and decays log-linearly over the run
        let decay = if self.cfg.iters > 1 {
            let t = self.iter as f64 / (self.cfg.iters - 1) as f64;
            self.cfg.lr_final_factor.powf(t)
        } else {
            1.0
        };
        let h_now = self.octree.bounds.cell_size(self.octree.finest_leaf_level());
        apply_update(
            &mut self.octree,
            &report.grads,
            &mut self.optim,
            self.cfg.lr_geo_scale * h_now * decay,
            self.cfg.lr_color * decay,
        );
        for (slot, &mag) in photo_mag.iter().enumerate() {
            self.ema[slot] = EMA_DECAY * self.ema[slot] + (1.0 - EMA_DECAY) * mag;
        }
        Ok(report)
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        for (name, value) in report.term_values() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    iter: self.iter,
                    term: name.to_string(),
                    voxel: None,
                });
            }
        }
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                iter: self.iter,
                term: "total".into(),
                voxel: None,
            });
        }
        if !report.grads.is_finite() {
            let voxel = report
                .grads
                .geo
                .iter()
                .zip(self.octree.voxels())
                .find(|(g, _)| g.iter().any(|v| !v.is_finite()))
                .map(|(_, v)| v.id);
            return Err(Error::NonFinite {
                iter: self.iter,
                term: "gradients".into(),
                voxel,
            });
        }
        Ok(())
    }

    /// Apply the schedule/adapt events due at the current iteration:
    /// level-schedule steps (sharpness base update), pruning, subdivision.
    fn structural_events(&mut self) -> Result<()> {
        let target = self.cfg.target_level(self.iter);
        if target > self.current_target {
            let h_old = self.octree.bounds.cell_size(self.current_target);
            let h_new = self.octree.bounds.cell_size(target);
            self.sched.set_progress(1.0)?;
            self.sched.level_change(h_old, h_new, target)?;
            self.current_target = target;
        }
        let (phase_start, phase_end) = self.cfg.level_phase(self.iter);
        let r = (self.iter - phase_start) as f64 / (phase_end - phase_start) as f64;
        self.sched.set_progress(r.clamp(0.0, 1.0))?;

        let mut changed = false;
        self.last_pruned = 0;
        self.last_subdivided = 0;
        if self.iter % self.cfg.prune_every == 0 {
            let report = adapt::prune(&mut self.octree, self.sched.s(), self.cfg.kappa);
            self.last_pruned = report.removed.len();
            changed |= !report.removed.is_empty();
        }
        if self.iter % self.cfg.subdivide_every == 0 {
            let ema = &self.ema;
            let ids = &self.ema_ids;
            let lookup: HashMap<VoxelId, f64> = ids
                .iter()
                .zip(ema)
                .map(|(&id, &v)| (id, v))
                .collect();
            let report = adapt::subdivide(
                &mut self.octree,
                self.current_target,
                self.sched.s(),
                self.cfg.l_cap,
                self.cfg.top_q,
                |id| lookup.get(&id).copied().unwrap_or(0.0),
            );
            self.last_subdivided = report.split.len();
            changed |= !report.split.is_empty();
        }
        if changed {
            self.refresh_structure()?;
        }
        Ok(())
    }

    /// Advance exactly one iteration: due schedule/adapt events, one ray
    /// batch, one parameter update.
    pub fn step_once(&mut self, scene: &SceneData) -> Result<LossReport> {
        self.structural_events()?;
        let batch = self.sample_batch(scene);
        let report = self.train_step(&batch)?;
        self.iter += 1;
        Ok(report)
    }

    /// Run the configured number of iterations, appending one JSON line per
    /// step to `log` and dropping checkpoints per the configured cadence.
    pub fn run(
        &mut self,
        scene: &SceneData,
        mut log: Option<&mut dyn Write>,
        ckpt_dir: Option<&Path>,
    ) -> Result<()> {
        let end = self.cfg.iters;
        while self.iter < end {
            self.structural_events()?;
            let batch = self.sample_batch(scene);
            let report = self.train_step(&batch)?;
            if let Some(log) = log.as_deref_mut() {
                let line = RunLogLine {
                    iter: self.iter,
                    photo: report.photo,
                    normal: report.normal,
                    eik: report.eik,
                    smooth: report.smooth,
                    local_eik: report.local_eik,
                    mask: report.mask,
                    ray_eik: report.ray_eik,
                    nd_mean: report.nd_mean,
                    nd_med: report.nd_med,
                    total: report.total,
                    s: self.sched.s(),
                    level: self.octree.finest_leaf_level(),
                    voxel_count: self.octree.len(),
                    pruned: (self.last_pruned > 0).then_some(self.last_pruned),
                    subdivided: (self.last_subdivided > 0).then_some(self.last_subdivided),
                };
                serde_json::to_writer(&mut *log, &line)?;
                log.write_all(b"\n")?;
            }
            self.iter += 1;
            if let Some(dir) = ckpt_dir {
                if self.cfg.checkpoint_every > 0 && self.iter % self.cfg.checkpoint_every == 0 {
                    let path = dir.join(format!("ckpt_{:06}.svrx", self.iter));
                    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
                    self.octree.write_checkpoint(&mut file)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::lattice::{DenseCoord, SceneBounds};
    use crate::synth::dense_octree_from_field;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::for_profile(Profile::Synthetic);
        cfg.iters = 4;
        cfg.rays_per_batch = 64;
        cfg.reg_samples = 64;
        cfg.level_schedule = vec![crate::config::LevelStep { iter: 0, level: 2 }];
        cfg.l_cap = 2;
        cfg.l_max = 3;
        cfg.prune_every = 1000;
        cfg.subdivide_every = 1000;
        cfg
    }

    fn test_octree() -> OctreeState {
        let b = SceneBounds::new([-1.0, -1.0, -1.0], 2.0).unwrap();
        dense_octree_from_field(b, 2, 3, |p| {
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6
        })
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let octree = test_octree();
        let mut cfg = tiny_config();
        cfg.lr_geo_scale = 0.0;
        cfg.lr_color = 0.0;
        let mut trainer = Trainer::new(octree, cfg).unwrap();
        let before: Vec<_> = trainer.octree.voxels().to_vec();
        let cam = crate::synth::camera_ring(2, 3.0, [0.0; 3], 16, 16, 60.0).unwrap().remove(0);
        let mut batch = RayBatch {
            rays: Vec::new(),
            ref_color: Vec::new(),
            mask_inside: Vec::new(),
            prior_normal: Vec::new(),
            prior_valid: Vec::new(),
        };
        for py in 0..16 {
            let (o, d) = cam.ray(8.0, py as f64 + 0.5);
            batch.rays.push(Ray { origin: o, dir: d });
            batch.ref_color.push([0.3, 0.3, 0.3]);
            batch.mask_inside.push(true);
            batch.prior_normal.push([0.0, 0.0, 1.0]);
            batch.prior_valid.push(false);
        }
        trainer.train_step(&batch).unwrap();
        for (a, b) in before.iter().zip(trainer.octree.voxels()) {
            assert_eq!(a.geo, b.geo);
            assert_eq!(a.color, b.color);
        }
    }

    #[test]
    fn adam_single_step_magnitude() {
        let b = SceneBounds::new([0.0; 3], 1.0).unwrap();
        let mut oct = OctreeState::new(b, 3);
        oct.insert(1, DenseCoord::new(0, 0, 0), [0.5; 8], [0.5; 3]);
        let mut optim = OptimState::new(&oct);
        let mut grads = GradAccumulator::zeros(1);
        grads.geo[0] = [0.25; 8]; // constant positive gradient
        let before = oct.voxels()[0].geo;
        apply_update(&mut oct, &grads, &mut optim, 1e-2, 0.0);
        for k in 0..8 {
            let delta = oct.voxels()[0].geo[k] - before[k];
            // first step moves by ~ -lr * sign(g)
            assert!((delta + 1e-2).abs() < 1e-6, "delta {delta}");
        }
        // zero gradient into fresh moments leaves parameters untouched
        let frozen = oct.voxels()[0].geo;
        let mut fresh = OptimState::new(&oct);
        let zero = GradAccumulator::zeros(1);
        apply_update(&mut oct, &zero, &mut fresh, 1e-2, 1e-2);
        assert_eq!(oct.voxels()[0].geo, frozen);
    }

    #[test]
    fn single_voxel_color_converges_to_reference() {
        // photometric-only training on one voxel drives its color to the
        // reference within 200 steps
        let b = SceneBounds::new([-1.0, -1.0, -1.0], 2.0).unwrap();
        let mut oct = OctreeState::new(b, 3);
        // saturated front-to-back crossing so alpha ~ 1 and the fixed
        // point of the photometric loss is the reference color itself
        let mut geo = [0.0; 8];
        for (k, o) in crate::lattice::CORNER_OFFSETS.iter().enumerate() {
            geo[k] = if o[0] == 0 { 4.0 } else { -4.0 };
        }
        oct.insert(1, DenseCoord::new(0, 0, 0), geo, [0.9, 0.1, 0.2]);
        let mut cfg = tiny_config();
        cfg.level_schedule = vec![crate::config::LevelStep { iter: 0, level: 1 }];
        cfg.l_cap = 1;
        cfg.iters = 200;
        cfg.lr_geo_scale = 0.0; // color-only
        cfg.lr_final_factor = 1.0;
        cfg.schedule.lambda_m = 0.0;
        cfg.schedule.lambda_n_steps = vec![(0, 0.0)];
        cfg.schedule.lambda_e_base = 0.0;
        cfg.schedule.lambda_s_base = 0.0;
        cfg.schedule.lambda_le = 0.0;
        let mut trainer = Trainer::new(oct, cfg).unwrap();
        let target = [0.35, 0.65, 0.5];
        let mut batch = RayBatch {
            rays: Vec::new(),
            ref_color: Vec::new(),
            mask_inside: Vec::new(),
            prior_normal: Vec::new(),
            prior_valid: Vec::new(),
        };
        for i in 0..32 {
            // rays along +x through the voxel
            let y = -0.9 + 1.6 * (i as f64 / 31.0);
            batch.rays.push(Ray {
                origin: [-2.0, y, -0.5],
                dir: [1.0, 0.0, 0.0],
            });
            batch.ref_color.push(target);
            batch.mask_inside.push(true);
            batch.prior_normal.push([0.0; 3]);
            batch.prior_valid.push(false);
        }
        for _ in 0..200 {
            trainer.train_step(&batch).unwrap();
            trainer.iter += 1;
        }
        let color = trainer.octree.voxels()[0].color;
        for a in 0..3 {
            assert!((color[a] - target[a]).abs() < 1e-3, "channel {a}: {} vs {}", color[a], target[a]);
        }
    }

    #[test]
    fn render_backprop_matches_finite_differences() {
        let octree = test_octree();
        let cfg = tiny_config();
        let trainer = Trainer::new(octree, cfg).unwrap();
        let ray = Ray::new([-2.0, 0.13, 0.07], [1.0, 0.02, -0.015]).unwrap();
        let s = 8.0;
        let forward = |oct: &OctreeState| -> ([f64; 3], f64) {
            let segs =
                crate::render::traverse_ray(oct, trainer.render_index(), &ray, (0.0, f64::INFINITY))
                    .unwrap();
            let cache = RayCache::from_segments(segs, s);
            let mut c = [0.0; 3];
            for (i, &w) in cache.weights.iter().enumerate() {
                let vc = oct.voxel(cache.segments[i].voxel).unwrap().color;
                for a in 0..3 {
                    c[a] += w * vc[a];
                }
            }
            (c, cache.t_final)
        };
        let segs = crate::render::traverse_ray(
            &trainer.octree,
            trainer.render_index(),
            &ray,
            (0.0, f64::INFINITY),
        )
        .unwrap();
        assert!(segs.len() >= 2, "test ray should cross several voxels");
        let colors: Vec<[f64; 3]> = segs
            .iter()
            .map(|g| trainer.octree.voxel(g.voxel).unwrap().color)
            .collect();
        let cache = RayCache::from_segments(segs, s);
        // upstream: d/dC = (1, 0.5, -0.25), d/dT = 0.7
        let upstream = RayUpstream {
            d_color: [1.0, 0.5, -0.25],
            d_tfinal: 0.7,
            ..Default::default()
        };
        let rows = backprop_render(&trainer.octree, &cache, &colors, None, &upstream, s);
        let scalar = |oct: &OctreeState| {
            let (c, t) = forward(oct);
            c[0] * upstream.d_color[0] + c[1] * upstream.d_color[1] + c[2] * upstream.d_color[2]
                + t * upstream.d_tfinal
        };
        let mut checked = 0;
        for &(slot, geo_g, color_g) in &rows {
            for k in 0..8 {
                if geo_g[k].abs() < 1e-9 {
                    continue;
                }
                let e = 1e-6;
                let mut plus = trainer.octree.clone();
                plus.voxels_mut()[slot as usize].geo[k] += e;
                let mut minus = trainer.octree.clone();
                minus.voxels_mut()[slot as usize].geo[k] -= e;
                let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * e);
                let rel = ((geo_g[k] - fd) / fd.abs().max(1e-8)).abs();
                assert!(rel < 1e-5, "slot {slot} corner {k}: {} vs {fd}", geo_g[k]);
                checked += 1;
            }
            for c in 0..3 {
                if color_g[c].abs() < 1e-12 {
                    continue;
                }
                let e = 1e-6;
                let mut plus = trainer.octree.clone();
                plus.voxels_mut()[slot as usize].color[c] += e;
                let mut minus = trainer.octree.clone();
                minus.voxels_mut()[slot as usize].color[c] -= e;
                let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * e);
                assert!(((color_g[c] - fd) / fd.abs().max(1e-8)).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 8, "too few gradient comparisons ({checked})");
    }

    #[test]
    fn optimizer_remaps_across_structure_changes() {
        let octree = test_octree();
        let mut cfg = tiny_config();
        cfg.iters = 2;
        let mut trainer = Trainer::new(octree, cfg).unwrap();
        trainer.optim.m_geo[5][3] = 0.5;
        let kept_id = trainer.octree.voxels()[5].id;
        // remove a different voxel and refresh
        let gone = trainer.octree.voxels()[0].id;
        trainer.octree.remove(&[gone]);
        trainer.refresh_structure().unwrap();
        let new_slot = trainer.octree.slot(kept_id).unwrap();
        assert_eq!(trainer.optim.m_geo[new_slot][3], 0.5);
        assert_eq!(trainer.optim.m_geo.len(), trainer.octree.len());
    }
}
