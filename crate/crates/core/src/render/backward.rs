//! Analytic reverse pass of the splatting renderer.
//!
//! Per pixel the forward walk is replayed, then hits are visited back to
//! front carrying the color (and alpha) composited behind each hit, which
//! gives `∂C/∂α_i = T_i (c_i - C_behind_i)` without dividing by `1 - α_i`.
//! Screen-space gradients are then chained through the conic inverse, the
//! EWA projection and the quaternion/scale covariance factorization.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{
    fingerprint, prepare, project, validate_background, walk_pixel, Cutoffs, Hit, RenderGradients, RenderState,
    RenderUpstream,
};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, GaussianGrad};

/// Screen-space partials accumulated per splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// `∂L/∂conic` as a general 2x2 matrix: `[m00, m01 (= m10), m11]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Rows per backward work unit.
const BAND_ROWS: usize = 32;

/// Recomputes the forward state, then runs the reverse pass.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    render_backward_with_cutoffs(cloud, pose, background, Cutoffs::default(), upstream)
}

pub fn render_backward_with_cutoffs(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
    cutoffs: Cutoffs,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    pose.validate()?;
    validate_background(background)?;
    cutoffs.validate()?;
    let state = prepare(cloud, pose, background, cutoffs);
    render_backward_with_state(&state, cloud, upstream)
}

pub fn render_backward_with_state(
    state: &RenderState,
    cloud: &GaussianCloud,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    let (w, h) = (state.pose.width, state.pose.height);
    if state.n_gaussians != cloud.len() || state.fingerprint != fingerprint(cloud) {
        return Err(Error::Consistency(
            "backward called with a cloud that differs from the forward pass".into(),
        ));
    }
    if upstream.color.len() != w * h * 3 || upstream.alpha.len() != w * h {
        return Err(Error::Consistency(format!(
            "upstream gradient sized for {} pixels, render has {}",
            upstream.alpha.len(),
            w * h
        )));
    }
    if cloud.is_empty() {
        return Ok(RenderGradients::default());
    }

    // Bands of rows are reduced in band order so results do not depend on the
    // thread count.
    let bands = h.div_ceil(BAND_ROWS);
    let partials: Vec<Vec<SplatGrad>> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![SplatGrad::default(); state.splats.len()];
            let mut hits: Vec<Hit> = Vec::new();
            for y in band * BAND_ROWS..((band + 1) * BAND_ROWS).min(h) {
                for x in 0..w {
                    accumulate_pixel(state, upstream, x, y, &mut hits, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut splat_grads = vec![SplatGrad::default(); state.splats.len()];
    for band in &partials {
        for (a, b) in splat_grads.iter_mut().zip(band) {
            a.add(b);
        }
    }

    let focal = state.pose.focal();
    let center = state.pose.principal_point();
    let mut out = vec![GaussianGrad::zero(); cloud.len()];
    for (s, sg) in state.splats.iter().zip(&splat_grads) {
        let g = &cloud.gaussians[s.index];
        let p = project(g, &state.pose, focal, center).expect("splat was projected in forward");
        let dst = &mut out[s.index];
        dst.color += Vector3::from(sg.color);
        dst.opacity += sg.opacity;

        // conic = cov2d⁻¹  =>  ∂L/∂cov2d = -conic ∂L/∂conic conic
        let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
        let g_cov2d = -(s.conic * g_conic * s.conic);
        // cov2d = J V Jᵀ + dilation
        let g_jac: Matrix2x3<f64> = 2.0 * g_cov2d * p.jac * p.cov_cam;
        let g_cov_cam: Matrix3<f64> = p.jac.transpose() * g_cov2d * p.jac;
        let wmat = state.pose.rotation.transpose();
        let g_cov_world = wmat.transpose() * g_cov_cam * wmat;
        // cov_world = M Mᵀ, M = R diag(s)
        let m = p.rot * Matrix3::from_diagonal(&g.scale);
        let g_m = 2.0 * g_cov_world * m;
        let mut g_rot = Matrix3::zeros();
        for k in 0..3 {
            dst.scale[k] += (0..3).map(|i| g_m[(i, k)] * p.rot[(i, k)]).sum::<f64>();
            for i in 0..3 {
                g_rot[(i, k)] = g_m[(i, k)] * g.scale[k];
            }
        }
        dst.rotation += quat_backward(&g.rotation, &g_rot);

        // Camera-space position through the mean and the Jacobian entries.
        let (x, y, z) = (p.cam.x, p.cam.y, p.cam.z);
        let g_mean = Vector2::new(sg.mean[0], sg.mean[1]);
        let mut g_cam: Vector3<f64> = p.jac.transpose() * g_mean;
        let z2 = z * z;
        let z3 = z2 * z;
        g_cam.x += g_jac[(0, 2)] * (-focal / z2);
        g_cam.y += g_jac[(1, 2)] * (-focal / z2);
        g_cam.z += g_jac[(0, 0)] * (-focal / z2)
            + g_jac[(1, 1)] * (-focal / z2)
            + g_jac[(0, 2)] * (2.0 * focal * x / z3)
            + g_jac[(1, 2)] * (2.0 * focal * y / z3);
        dst.position += state.pose.rotation * g_cam;
    }
    Ok(RenderGradients { gaussians: out })
}

fn accumulate_pixel(
    state: &RenderState,
    upstream: &RenderUpstream,
    x: usize,
    y: usize,
    hits: &mut Vec<Hit>,
    acc: &mut [SplatGrad],
) {
    let pix = y * state.pose.width + x;
    let g_color = Vector3::new(
        upstream.color[pix * 3],
        upstream.color[pix * 3 + 1],
        upstream.color[pix * 3 + 2],
    );
    let g_alpha = upstream.alpha[pix];
    if g_color == Vector3::zeros() && g_alpha == 0.0 {
        return;
    }
    hits.clear();
    walk_pixel(state, x, y, |h| hits.push(h));
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut behind = Vector3::from(state.background);
    let mut behind_alpha = 0.0;
    for hit in hits.iter().rev() {
        let s = &state.tile_splats[hit.packed as usize];
        let color = state.splats[s.splat as usize].color;
        let a = hit.alpha;
        let t = hit.transmittance;
        let dst = &mut acc[s.splat as usize];
        for k in 0..3 {
            dst.color[k] += g_color[k] * a * t;
        }
        let g_a = t * (g_color.dot(&(color - behind)) + g_alpha * (1.0 - behind_alpha));
        behind = color * a + behind * (1.0 - a);
        behind_alpha = a + (1.0 - a) * behind_alpha;
        if hit.clamped {
            continue;
        }
        dst.opacity += g_a * hit.falloff;
        let g_q = g_a * s.opacity * hit.falloff * -0.5;
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        dst.conic[0] += g_q * dx * dx;
        dst.conic[1] += g_q * dx * dy;
        dst.conic[2] += g_q * dy * dy;
        // q = δᵀ conic δ, δ = pixel - mean
        let cx = s.conic[0] * dx + s.conic[1] * dy;
        let cy = s.conic[1] * dx + s.conic[2] * dy;
        dst.mean[0] += g_q * -2.0 * cx;
        dst.mean[1] += g_q * -2.0 * cy;
    }
}

/// Gradient with respect to the raw quaternion `q` of a loss that depends on
/// `R(q / |q|)`. For unit `q` this is the tangent-space projection.
pub(crate) fn quat_backward(q: &Vector4<f64>, g_rot: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let qh = q / n;
    let (w, x, y, z) = (qh[0], qh[1], qh[2], qh[3]);
    let g = |i: usize, j: usize| g_rot[(i, j)];
    let gw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gh = Vector4::new(gw, gx, gy, gz);
    (gh - qh * qh.dot(&gh)) / n
}
