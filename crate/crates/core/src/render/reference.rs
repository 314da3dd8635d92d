//! Brute-force reference renderer: every Gaussian in front of the near plane
//! is evaluated at every pixel, with no tiling, extent culling or early
//! termination. Slow; meant for checking the production renderer.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use super::{RenderOutput, DILATION, MAX_ALPHA, NEAR_PLANE};
use crate::camera::CameraPose;
use crate::gaussians::{covariance, GaussianCloud};

pub fn render_brute_force(cloud: &GaussianCloud, pose: &CameraPose, background: [f64; 3]) -> RenderOutput {
    let (w, h) = (pose.width, pose.height);
    let f = pose.focal();
    let (cx, cy) = pose.principal_point();
    let world_to_cam: Matrix3<f64> = pose.rotation.transpose();

    struct Flat {
        index: usize,
        depth: f64,
        mean: Vector2<f64>,
        inv: nalgebra::Matrix2<f64>,
        opacity: f64,
        color: Vector3<f64>,
    }
    let mut flats: Vec<Flat> = Vec::new();
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let t = world_to_cam * (g.position - pose.origin);
        if t.z < NEAR_PLANE {
            continue;
        }
        let j = Matrix2x3::new(
            f / t.z,
            0.0,
            -f * t.x / (t.z * t.z),
            0.0,
            f / t.z,
            -f * t.y / (t.z * t.z),
        );
        let cov = j * world_to_cam * covariance(g) * world_to_cam.transpose() * j.transpose()
            + nalgebra::Matrix2::identity() * DILATION;
        let Some(inv) = cov.try_inverse() else {
            continue;
        };
        flats.push(Flat {
            index,
            depth: t.z,
            mean: Vector2::new(f * t.x / t.z + cx, f * t.y / t.z + cy),
            inv,
            opacity: g.opacity,
            color: g.color,
        });
    }
    flats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let mut color = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut d = 0.0;
            for fl in &flats {
                let delta = p - fl.mean;
                let q = (delta.transpose() * fl.inv * delta)[(0, 0)];
                let a = (fl.opacity * (-0.5 * q).exp()).min(MAX_ALPHA);
                c += fl.color * (a * t);
                d += fl.depth * a * t;
                t *= 1.0 - a;
            }
            c += Vector3::from(background) * t;
            color.extend_from_slice(c.as_slice());
            alpha.push(1.0 - t);
            depth.push(if t < 1.0 { d / (1.0 - t) } else { 0.0 });
        }
    }
    RenderOutput {
        width: w,
        height: h,
        color,
        alpha,
        depth,
    }
}
