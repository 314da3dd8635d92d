//! Differentiable Gaussian splatting.
//!
//! Each Gaussian is projected to a 2D Gaussian with the perspective Jacobian
//! (`J W Σ Wᵀ Jᵀ` plus a 0.3 px² dilation), all Gaussians are sorted once by
//! view-space depth (ties by index) and each pixel composites front to back:
//!
//! ```text
//! α_i = min(0.999, o_i exp(-½ δᵀ Σ2D⁻¹ δ))      T_i = Π_{j<i} (1 - α_j)
//! C   = Σ c_i α_i T_i + (1 - Σ α_i T_i) · bg      A = Σ α_i T_i
//! ```
//!
//! Gaussians whose peak contribution to a pixel is below [`CONTRIBUTION_EPS`]
//! are skipped, both through a per-Gaussian screen-space extent and a
//! per-pixel test, and compositing stops once transmittance drops below
//! [`TRANSMITTANCE_EPS`]. Both thresholds can be changed through [`Cutoffs`].

mod backward;
pub mod reference;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{CameraPose, ViewRig};
use crate::error::{Error, Result};
use crate::gaussians::{quat_to_matrix, GaussianCloud, GaussianGrad};
use crate::image::RgbImage;

pub use backward::{render_backward, render_backward_with_cutoffs, render_backward_with_state};

pub const NEAR_PLANE: f64 = 0.01;
pub const DILATION: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.999;
pub const CONTRIBUTION_EPS: f64 = 1e-5;
pub const TRANSMITTANCE_EPS: f64 = 1e-6;
pub const TILE: usize = 8;

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

/// Skip thresholds. Each one makes the rendered image jump by up to its own
/// size when a Gaussian crosses it, so finite-difference checks with small
/// steps want them far smaller than the defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoffs {
    pub contribution: f64,
    pub transmittance: f64,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Cutoffs {
            contribution: CONTRIBUTION_EPS,
            transmittance: TRANSMITTANCE_EPS,
        }
    }
}

impl Cutoffs {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v < 1.0;
        if ok(self.contribution) && ok(self.transmittance) {
            Ok(())
        } else {
            Err(Error::Contract(format!("cutoffs {self:?} must lie in (0, 1)")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `(height, width, 3)`.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-weighted expected view-space depth, zero where nothing was hit.
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }
}

/// Loss gradients with respect to a render's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderUpstream {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGradients {
    /// One entry per input Gaussian, in cloud order.
    pub gaussians: Vec<GaussianGrad>,
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
    /// Skip pixels whose Mahalanobis distance² exceeds this.
    pub q_cut: f64,
}

/// The fields of a [`Splat`] the per-pixel walk reads, stored contiguously
/// per tile.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Packed {
    pub mean: [f64; 2],
    /// Upper triangle of the conic: xx, xy, yy.
    pub conic: [f64; 3],
    pub q_cut: f64,
    pub opacity: f64,
    /// Index into `RenderState::splats`.
    pub splat: u32,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct RenderState {
    pub(crate) pose: CameraPose,
    pub(crate) background: [f64; 3],
    pub(crate) cutoffs: Cutoffs,
    pub(crate) splats: Vec<Splat>,
    /// Per-tile coverage lists, flattened; tile `i` owns
    /// `tile_splats[tile_start[i]..tile_start[i + 1]]`, in depth order.
    pub(crate) tile_start: Vec<usize>,
    pub(crate) tile_splats: Vec<Packed>,
    pub(crate) tiles_x: usize,
    pub(crate) n_gaussians: usize,
    pub(crate) fingerprint: u64,
}

/// Intermediate quantities of the projection of one Gaussian.
pub(crate) struct Projection {
    pub cam: Vector3<f64>,
    pub jac: nalgebra::Matrix2x3<f64>,
    pub rot: Matrix3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub cov2d: Matrix2<f64>,
    pub mean: Vector2<f64>,
}

pub(crate) fn project(
    g: &crate::gaussians::Gaussian,
    pose: &CameraPose,
    focal: f64,
    center: (f64, f64),
) -> Option<Projection> {
    let w = pose.rotation.transpose();
    let cam = w * (g.position - pose.origin);
    if cam.z < NEAR_PLANE {
        return None;
    }
    let (x, y, z) = (cam.x, cam.y, cam.z);
    let jac = nalgebra::Matrix2x3::new(
        focal / z,
        0.0,
        -focal * x / (z * z),
        0.0,
        focal / z,
        -focal * y / (z * z),
    );
    let rot = quat_to_matrix(&g.rotation);
    let m = rot * Matrix3::from_diagonal(&g.scale);
    let cov_world = m * m.transpose();
    let cov_cam = w * cov_world * w.transpose();
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * DILATION;
    let mean = Vector2::new(focal * x / z + center.0, focal * y / z + center.1);
    Some(Projection {
        cam,
        jac,
        rot,
        cov_cam,
        cov2d,
        mean,
    })
}

fn fingerprint(cloud: &GaussianCloud) -> u64 {
    // FNV-1a over parameter bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for g in &cloud.gaussians {
        g.position.iter().for_each(|&v| eat(v));
        g.scale.iter().for_each(|&v| eat(v));
        g.color.iter().for_each(|&v| eat(v));
        eat(g.opacity);
        g.rotation.iter().for_each(|&v| eat(v));
    }
    h
}

fn prepare(cloud: &GaussianCloud, pose: &CameraPose, background: [f64; 3], cutoffs: Cutoffs) -> RenderState {
    let (w, h) = (pose.width, pose.height);
    let focal = pose.focal();
    let center = pose.principal_point();
    let mut splats: Vec<Splat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let p = project(g, pose, focal, center)?;
            let peak = g.opacity.min(MAX_ALPHA);
            if peak <= cutoffs.contribution {
                return None;
            }
            let q_cut = 2.0 * (peak / cutoffs.contribution).ln();
            let conic = p.cov2d.try_inverse()?;
            // Largest eigenvalue of the symmetric 2x2 covariance.
            let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
            let mid = 0.5 * (a + c);
            let lambda = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let r = (q_cut * lambda).sqrt();
            let visible =
                p.mean.x + r > 0.0 && p.mean.x - r < w as f64 && p.mean.y + r > 0.0 && p.mean.y - r < h as f64;
            visible.then(|| Splat {
                index,
                mean: p.mean,
                conic,
                opacity: g.opacity,
                color: g.color,
                depth: p.cam.z,
                q_cut,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    // Tile ranges per splat, then a counting sort into one flat array so each
    // tile's list stays in depth order.
    let ranges: Vec<[usize; 4]> = splats
        .iter()
        .map(|s| {
            let (a, b, c) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
            // Axis-aligned half extents of the ellipse δᵀ conic δ = q_cut.
            let det = a * c - b * b;
            let rx = (s.q_cut * c / det).sqrt();
            let ry = (s.q_cut * a / det).sqrt();
            let x0 = ((s.mean.x - rx - 0.5).floor().max(0.0) as usize) / TILE;
            let x1 = ((s.mean.x + rx - 0.5).ceil().min(w as f64 - 1.0).max(0.0) as usize) / TILE;
            let y0 = ((s.mean.y - ry - 0.5).floor().max(0.0) as usize) / TILE;
            let y1 = ((s.mean.y + ry - 0.5).ceil().min(h as f64 - 1.0).max(0.0) as usize) / TILE;
            [x0, x1.min(tiles_x - 1), y0, y1.min(tiles_y - 1)]
        })
        .collect();
    let mut tile_start = vec![0usize; tiles_x * tiles_y + 1];
    for &[x0, x1, y0, y1] in &ranges {
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_start[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for i in 1..tile_start.len() {
        tile_start[i] += tile_start[i - 1];
    }
    let mut fill = tile_start.clone();
    let mut tile_splats = vec![
        Packed {
            mean: [0.0; 2],
            conic: [0.0; 3],
            q_cut: 0.0,
            opacity: 0.0,
            splat: 0,
        };
        tile_start[tiles_x * tiles_y]
    ];
    for (si, (s, &[x0, x1, y0, y1])) in splats.iter().zip(&ranges).enumerate() {
        let packed = Packed {
            mean: [s.mean.x, s.mean.y],
            conic: [s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]],
            q_cut: s.q_cut,
            opacity: s.opacity,
            splat: si as u32,
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                let slot = &mut fill[ty * tiles_x + tx];
                tile_splats[*slot] = packed;
                *slot += 1;
            }
        }
    }
    RenderState {
        pose: pose.clone(),
        background,
        cutoffs,
        splats,
        tile_start,
        tile_splats,
        tiles_x,
        n_gaussians: cloud.len(),
        fingerprint: fingerprint(cloud),
    }
}

/// One Gaussian's contribution to one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Hit {
    /// Index into `RenderState::tile_splats`.
    pub packed: u32,
    pub alpha: f64,
    /// Unclamped Gaussian falloff `exp(-½ q)`.
    pub falloff: f64,
    pub clamped: bool,
    pub transmittance: f64,
}

/// Front-to-back walk over the splats covering pixel `(x, y)`, calling
/// `visit` for every contribution. Returns the final transmittance.
pub(crate) fn walk_pixel(state: &RenderState, x: usize, y: usize, mut visit: impl FnMut(Hit)) -> f64 {
    let ti = (y / TILE) * state.tiles_x + x / TILE;
    let start = state.tile_start[ti];
    let tile = &state.tile_splats[start..state.tile_start[ti + 1]];
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0;
    for (k, s) in tile.iter().enumerate() {
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        if q > s.q_cut {
            continue;
        }
        let falloff = (-0.5 * q).exp();
        let raw = s.opacity * falloff;
        let clamped = raw > MAX_ALPHA;
        let alpha = if clamped { MAX_ALPHA } else { raw };
        visit(Hit {
            packed: (start + k) as u32,
            alpha,
            falloff,
            clamped,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t < state.cutoffs.transmittance {
            break;
        }
    }
    t
}

fn validate_background(background: [f64; 3]) -> Result<()> {
    if background.iter().all(|c| (0.0..=1.0).contains(c)) {
        Ok(())
    } else {
        Err(Error::Contract(format!("background {background:?} outside [0, 1]")))
    }
}

pub fn render(cloud: &GaussianCloud, pose: &CameraPose, background: [f64; 3]) -> Result<RenderOutput> {
    Ok(render_with_state(cloud, pose, background)?.0)
}

pub fn render_with_state(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
) -> Result<(RenderOutput, RenderState)> {
    render_with_cutoffs(cloud, pose, background, Cutoffs::default())
}

pub fn render_with_cutoffs(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
    cutoffs: Cutoffs,
) -> Result<(RenderOutput, RenderState)> {
    pose.validate()?;
    validate_background(background)?;
    cutoffs.validate()?;
    let state = prepare(cloud, pose, background, cutoffs);
    let (w, h) = (pose.width, pose.height);
    let mut color = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    color
        .par_chunks_mut(w * 3)
        .zip(alpha.par_chunks_mut(w))
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((crow, arow), drow))| {
            for x in 0..w {
                let mut c = Vector3::zeros();
                let mut a = 0.0;
                let mut d = 0.0;
                let mut any = false;
                let t_final = walk_pixel(&state, x, y, |hit| {
                    let s = &state.splats[state.tile_splats[hit.packed as usize].splat as usize];
                    let wgt = hit.alpha * hit.transmittance;
                    c += s.color * wgt;
                    a += wgt;
                    d += s.depth * wgt;
                    any = true;
                });
                let bg = Vector3::from(background);
                let c = if any { c + bg * t_final } else { bg };
                crow[x * 3..x * 3 + 3].copy_from_slice(c.as_slice());
                arow[x] = a;
                drow[x] = if a > 0.0 { d / a } else { 0.0 };
            }
        });
    Ok((
        RenderOutput {
            width: w,
            height: h,
            color,
            alpha,
            depth,
        },
        state,
    ))
}

/// Independent render per rig pose, in rig order.
pub fn render_rig(cloud: &GaussianCloud, rig: &ViewRig, background: [f64; 3]) -> Result<Vec<RenderOutput>> {
    rig.poses.iter().map(|p| render(cloud, p, background)).collect()
}

#[cfg(test)]
mod tests;
