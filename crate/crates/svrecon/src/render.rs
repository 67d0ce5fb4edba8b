//! Ray traversal through the sparse octree and SDF alpha compositing.
//!
//! Opacity follows the logistic-CDF formulation: a ray segment through a
//! voxel contributes `alpha = max((phi_s(f_in) - phi_s(f_out)) / phi_s(f_in), 0)`
//! with `f` evaluated at the segment's entry and exit points using the
//! segment's own voxel corners. Colors and normals accumulate front to
//! back as `sum T_i alpha_i payload_i` with `T_i = prod_{j<i} (1 - alpha_j)`.

use crate::assoc::AssociationIndex;
use crate::field::sample_in_voxel;
use crate::lattice::{dense_from_world, OctreeState, VoxelId};
use crate::{Error, Result};

/// Denominator guard for the alpha quotient when `phi_s(f_in)` vanishes.
pub const EPS_PHI: f64 = 1e-7;

/// Logistic CDF `phi_s(f) = 1 / (1 + exp(-s f))`.
#[inline]
pub fn phi_s(f: f64, s: f64) -> f64 {
    1.0 / (1.0 + (-s * f).exp())
}

/// Segment opacity from entry/exit SDF values, clamped to `[0, 1]`; zero
/// whenever the SDF is nondecreasing along the segment.
#[inline]
pub fn alpha_from_sdf(f_in: f64, f_out: f64, s: f64) -> f64 {
    let phi_in = phi_s(f_in, s);
    let phi_out = phi_s(f_out, s);
    ((phi_in - phi_out) / phi_in.max(EPS_PHI)).clamp(0.0, 1.0)
}

/// Analytic partials `(d alpha / d f_in, d alpha / d f_out)`. At the
/// clamp kinks (alpha pinned to 0 or 1) the gradient is defined as 0.
#[inline]
pub fn d_alpha(f_in: f64, f_out: f64, s: f64) -> (f64, f64) {
    let phi_in = phi_s(f_in, s);
    let phi_out = phi_s(f_out, s);
    let denom = phi_in.max(EPS_PHI);
    let raw = (phi_in - phi_out) / denom;
    if raw <= 0.0 || raw >= 1.0 {
        return (0.0, 0.0);
    }
    let dphi_in = s * phi_in * (1.0 - phi_in);
    let dphi_out = s * phi_out * (1.0 - phi_out);
    if phi_in > EPS_PHI {
        // full quotient rule through the denominator
        ((phi_out / (phi_in * phi_in)) * dphi_in, -dphi_out / phi_in)
    } else {
        (dphi_in / EPS_PHI, -dphi_out / EPS_PHI)
    }
}

/// Width of the SDF band carrying 99% of the logistic density mass:
/// `l(s) = 2 ln(199) / s`. Halves when `s` doubles.
#[inline]
pub fn learning_thickness(s: f64) -> f64 {
    2.0 * 199f64.ln() / s
}

/// Initial sharpness chosen so the learning band spans two cells of the
/// initial level: `l(s0) = 2 h`.
#[inline]
pub fn initial_sharpness(h_init: f64) -> f64 {
    199f64.ln() / h_init
}

/// Monotone sharpness schedule: within a level `log s = base + c * r` with
/// ramp progress `r` in `[0, 1]`; on a level change the base absorbs the
/// completed ramp and rises by `ln(h_old / h_new)`, keeping the normalized
/// band width constant across refinements.
#[derive(Clone, Debug)]
pub struct SharpnessSchedule {
    log_s_base: f64,
    ramp: f64,
    level: u8,
    ramp_coeff: f64,
}

impl SharpnessSchedule {
    pub fn new(s0: f64, level: u8, ramp_coeff: f64) -> Result<Self> {
        if !(s0 > 0.0) {
            return Err(Error::domain(format!("initial sharpness must be positive, got {s0}")));
        }
        Ok(SharpnessSchedule {
            log_s_base: s0.ln(),
            ramp: 0.0,
            level,
            ramp_coeff,
        })
    }

    pub fn log_s(&self) -> f64 {
        self.log_s_base + self.ramp_coeff * self.ramp
    }

    pub fn s(&self) -> f64 {
        self.log_s().exp()
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// Advance the within-level ramp. Progress must be nondecreasing.
    pub fn set_progress(&mut self, r: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::domain(format!("ramp progress {r} outside [0, 1]")));
        }
        if r < self.ramp - 1e-12 {
            return Err(Error::domain(format!(
                "ramp progress must be nondecreasing within a level ({r} < {})",
                self.ramp
            )));
        }
        self.ramp = r;
        Ok(())
    }

    /// Move to the next level: the base first absorbs the completed ramp,
    /// then rises by `ln(h_old / h_new)` (exactly `ln 2` when `h` halves).
    /// Returns the applied log-increment. The ramp resets to zero.
    pub fn level_change(&mut self, h_old: f64, h_new: f64, new_level: u8) -> Result<f64> {
        if !(h_new > 0.0) || h_new > h_old {
            return Err(Error::domain(format!(
                "level change must not coarsen the grid (h {h_old} -> {h_new})"
            )));
        }
        self.log_s_base += self.ramp_coeff * self.ramp;
        self.ramp = 0.0;
        let inc = (h_old / h_new).ln();
        self.log_s_base += inc;
        self.level = new_level;
        Ok(inc)
    }
}

/// A ray with unit direction.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    pub fn new(origin: [f64; 3], dir: [f64; 3]) -> Result<Self> {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::domain("ray direction must be nonzero"));
        }
        Ok(Ray {
            origin,
            dir: [dir[0] / n, dir[1] / n, dir[2] / n],
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// One ray-voxel intersection with cached endpoint SDF values.
#[derive(Clone, Debug)]
pub struct RaySegment {
    pub voxel: VoxelId,
    pub t_in: f64,
    pub t_out: f64,
    pub p_in: [f64; 3],
    pub p_out: [f64; 3],
    pub f_in: f64,
    pub f_out: f64,
}

impl RaySegment {
    pub fn length(&self) -> f64 {
        self.t_out - self.t_in
    }
}

/// Intersect the ray with an axis-aligned box; returns the `(t_enter,
/// t_exit)` slab interval if nonempty.
pub fn clip_to_box(ray: &Ray, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if ray.dir[a].abs() < 1e-300 {
            if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / ray.dir[a];
            let (ta, tb) = ((lo[a] - ray.origin[a]) * inv, (hi[a] - ray.origin[a]) * inv);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Walk the ray through the association lattice, merging runs of cells
/// covered by the same voxel into one segment per voxel. Segments come out
/// sorted by `t_in`, non-overlapping, clipped to the scene bounds and to
/// `t_range`; unoccupied space is skipped.
pub fn traverse_ray(
    octree: &OctreeState,
    index: &AssociationIndex,
    ray: &Ray,
    t_range: (f64, f64),
) -> Result<Vec<RaySegment>> {
    let b = &octree.bounds;
    let Some((mut t0, mut t1)) = clip_to_box(ray, b.x_min, b.x_max()) else {
        return Ok(Vec::new());
    };
    t0 = t0.max(t_range.0);
    t1 = t1.min(t_range.1);
    if t0 >= t1 {
        return Ok(Vec::new());
    }

    let g = index.grid() as i64;
    let h = b.cell_size(index.level());
    // the entry point can land a few ulps outside the slab planes
    let mut p_enter = ray.at(t0);
    let x_max = b.x_max();
    for a in 0..3 {
        p_enter[a] = p_enter[a].clamp(b.x_min[a], x_max[a]);
    }
    let (start, _) = dense_from_world(p_enter, index.level(), b)?;
    let mut cell = [start.i as i64, start.j as i64, start.k as i64];

    // next-crossing parameters per axis
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if ray.dir[a] > 1e-300 {
            step[a] = 1;
            let plane = b.x_min[a] + (cell[a] + 1) as f64 * h;
            t_next[a] = (plane - ray.origin[a]) / ray.dir[a];
            t_delta[a] = h / ray.dir[a];
        } else if ray.dir[a] < -1e-300 {
            step[a] = -1;
            let plane = b.x_min[a] + cell[a] as f64 * h;
            t_next[a] = (plane - ray.origin[a]) / ray.dir[a];
            t_delta[a] = h / -ray.dir[a];
        }
    }

    let mut segments = Vec::new();
    let mut run: Option<(VoxelId, f64)> = None;
    let mut t_cur = t0;
    let close_run = |segments: &mut Vec<RaySegment>, run: &mut Option<(VoxelId, f64)>, t_end: f64| {
        if let Some((id, t_start)) = run.take() {
            if t_end - t_start > 1e-12 {
                let v = octree.voxel(id).expect("traversal saw live voxel");
                let p_in = ray.at(t_start);
                let p_out = ray.at(t_end);
                segments.push(RaySegment {
                    voxel: id,
                    t_in: t_start,
                    t_out: t_end,
                    p_in,
                    p_out,
                    f_in: sample_in_voxel(v, b, p_in).value,
                    f_out: sample_in_voxel(v, b, p_out).value,
                });
            }
        }
    };

    loop {
        let t_exit = t_next[0].min(t_next[1]).min(t_next[2]).min(t1);
        let c = crate::lattice::DenseCoord::new(cell[0] as u32, cell[1] as u32, cell[2] as u32);
        let covering = index.nvs_lookup_coord(c)?;
        match (covering, run) {
            (Some(id), Some((cur, _))) if id == cur => {}
            (Some(id), _) => {
                close_run(&mut segments, &mut run, t_cur);
                run = Some((id, t_cur));
            }
            (None, _) => close_run(&mut segments, &mut run, t_cur),
        }
        if t_exit >= t1 {
            close_run(&mut segments, &mut run, t1);
            break;
        }
        // advance every axis that reaches the exit plane (corner crossings
        // step diagonally, which is the geometrically correct cell)
        let t_min = t_next[0].min(t_next[1]).min(t_next[2]);
        for a in 0..3 {
            if t_next[a] <= t_min + 1e-15 * (1.0 + t_min.abs()) {
                cell[a] += step[a];
                t_next[a] += t_delta[a];
            }
        }
        t_cur = t_exit;
        if cell.iter().any(|&c| c < 0 || c >= g) {
            close_run(&mut segments, &mut run, t_cur);
            break;
        }
    }
    Ok(segments)
}

/// Per-segment visibility weights `w_i = T_i alpha_i` and the final
/// transmittance `prod (1 - alpha_i)`.
pub fn composite_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(alphas.len());
    for &a in alphas {
        w.push(t * a);
        t *= 1.0 - a;
    }
    (w, t)
}

/// Composited pixel: color (with background under the residual
/// transmittance), final transmittance, accumulated unnormalized normal,
/// and an optional expected-depth diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRender {
    pub color: [f64; 3],
    pub transmittance: f64,
    pub normal: [f64; 3],
    pub depth: Option<f64>,
}

/// Front-to-back compositing over ordered segments. `colors` (and
/// optionally `normals`) are per-segment payloads aligned with `segments`.
pub fn composite(
    segments: &[RaySegment],
    s: f64,
    colors: &[[f64; 3]],
    normals: Option<&[[f64; 3]]>,
    background: [f64; 3],
) -> PixelRender {
    assert_eq!(segments.len(), colors.len());
    let alphas: Vec<f64> = segments.iter().map(|g| alpha_from_sdf(g.f_in, g.f_out, s)).collect();
    let (weights, t_final) = composite_weights(&alphas);
    let mut color = [0.0; 3];
    let mut normal = [0.0; 3];
    let mut depth_acc = 0.0;
    let mut weight_acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        for a in 0..3 {
            color[a] += w * colors[i][a];
            if let Some(ns) = normals {
                normal[a] += w * ns[i][a];
            }
        }
        depth_acc += w * 0.5 * (segments[i].t_in + segments[i].t_out);
        weight_acc += w;
    }
    for a in 0..3 {
        color[a] += t_final * background[a];
    }
    PixelRender {
        color,
        transmittance: t_final,
        normal,
        depth: (weight_acc > 1e-12).then(|| depth_acc / weight_acc),
    }
}
