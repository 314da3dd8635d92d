//! Explicit 3D Gaussian representation, its construction from network
//! feature maps, opacity pruning and the binary cloud file format.
//!
//! Cloud file layout (little-endian):
//!
//! ```text
//! magic   4 bytes  "DSPL"
//! version u32      1
//! count   u64
//! count x 14 f32   pos xyz, scale xyz, color rgb, opacity, quat wxyz
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::camera::RayMap;
use crate::error::{Error, Result};

pub const FEATURE_CHANNELS: usize = 14;
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.005;
/// Maximum depth along a pixel ray; the object fits in `[-1, 1]^3` seen from radius 1.5.
pub const MAX_RAY_DEPTH: f64 = 3.0;
/// Bound on the offset perpendicular to the pixel ray, world units.
pub const MAX_TANGENT_OFFSET: f64 = 0.05;
pub const LOG_SCALE_MIN: f64 = -10.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

const CLOUD_MAGIC: &[u8; 4] = b"DSPL";
const CLOUD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
}

impl Gaussian {
    pub fn isotropic(position: Vector3<f64>, scale: f64, color: Vector3<f64>, opacity: f64) -> Self {
        Self {
            position,
            scale: Vector3::repeat(scale),
            color,
            opacity,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite());
        finite
            && self.scale.iter().all(|&s| s > 0.0)
            && (self.rotation.norm() - 1.0).abs() <= 1e-6
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(self)
    }
}

/// Per-Gaussian partial derivatives of a scalar loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub rotation: Vector4<f64>,
}

impl GaussianGrad {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.position += o.position;
        self.scale += o.scale;
        self.color += o.color;
        self.opacity += o.opacity;
        self.rotation += o.rotation;
    }

    /// The fourteen partials in file order.
    pub fn to_array(&self) -> [f64; 14] {
        let mut a = [0.0; 14];
        a[0..3].copy_from_slice(self.position.as_slice());
        a[3..6].copy_from_slice(self.scale.as_slice());
        a[6..9].copy_from_slice(self.color.as_slice());
        a[9] = self.opacity;
        a[10..14].copy_from_slice(self.rotation.as_slice());
        a
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    /// Which view's feature map produced each Gaussian, when known.
    pub source_view_index: Option<Vec<u32>>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            source_view_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.gaussians.iter().all(Gaussian::is_valid)
            && self
                .source_view_index
                .as_ref()
                .is_none_or(|s| s.len() == self.gaussians.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * FEATURE_CHANNELS * 4);
        out.extend_from_slice(CLOUD_MAGIC);
        out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for g in &self.gaussians {
            let vals = g
                .position
                .iter()
                .chain(g.scale.iter())
                .chain(g.color.iter())
                .chain(std::iter::once(&g.opacity))
                .chain(g.rotation.iter());
            for &v in vals {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[0..4] != CLOUD_MAGIC {
            return Err("missing DSPL header".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CLOUD_VERSION {
            return Err(format!("unsupported cloud version {version}"));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if Some(body.len()) != count.checked_mul(FEATURE_CHANNELS * 4) {
            return Err(format!("expected {count} gaussians, payload is {} bytes", body.len()));
        }
        let gaussians = body
            .chunks_exact(FEATURE_CHANNELS * 4)
            .map(|rec| {
                let v: Vec<f64> = rec
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                Gaussian {
                    position: Vector3::new(v[0], v[1], v[2]),
                    scale: Vector3::new(v[3], v[4], v[5]),
                    color: Vector3::new(v[6], v[7], v[8]),
                    opacity: v[9],
                    rotation: Vector4::new(v[10], v[11], v[12], v[13]),
                }
            })
            .collect();
        Ok(Self::new(gaussians))
    }

    /// Concatenates clouds, tagging each Gaussian with its source index.
    pub fn merge(parts: Vec<GaussianCloud>) -> Self {
        let mut gaussians = Vec::new();
        let mut src = Vec::new();
        for (i, p) in parts.into_iter().enumerate() {
            src.extend(std::iter::repeat_n(i as u32, p.len()));
            gaussians.extend(p.gaussians);
        }
        Self {
            gaussians,
            source_view_index: Some(src),
        }
    }
}

/// Raw per-pixel network output, `(height, width, 14)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GaussianFeatureMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * FEATURE_CHANNELS],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * FEATURE_CHANNELS {
            return Err(Error::Shape(format!(
                "feature map needs {}x{}x{FEATURE_CHANNELS} values, got {}",
                height,
                width,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two unit vectors orthogonal to `d` and each other.
pub fn tangent_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut e1 = d.cross(&Vector3::z());
    if e1.norm() < 1e-6 {
        e1 = d.cross(&Vector3::x());
    }
    let e1 = e1.normalize();
    (e1, d.cross(&e1))
}

fn check_dims(raw: &GaussianFeatureMap, rays: &RayMap) -> Result<()> {
    if raw.width != rays.width || raw.height != rays.height {
        return Err(Error::Shape(format!(
            "feature map {}x{} does not match ray map {}x{}",
            raw.height, raw.width, rays.height, rays.width
        )));
    }
    if raw.data.len() != raw.width * raw.height * FEATURE_CHANNELS {
        return Err(Error::Shape("feature map buffer length".into()));
    }
    Ok(())
}

/// Maps raw channels to Gaussian parameters, one Gaussian per pixel, with
/// positions anchored on the pixel rays.
pub fn activate_features(raw: &GaussianFeatureMap, rays: &RayMap) -> Result<Vec<Gaussian>> {
    check_dims(raw, rays)?;
    let mut out = Vec::with_capacity(raw.width * raw.height);
    for y in 0..raw.height {
        for x in 0..raw.width {
            let c: Vec<f64> = raw.pixel(y * raw.width + x).iter().map(|&v| v as f64).collect();
            let d = rays.direction(x, y);
            let (e1, e2) = tangent_basis(&d);
            let depth = sigmoid(c[0]) * MAX_RAY_DEPTH;
            let position = rays.origin
                + d * depth
                + e1 * (c[1].tanh() * MAX_TANGENT_OFFSET)
                + e2 * (c[2].tanh() * MAX_TANGENT_OFFSET);
            let scale = Vector3::new(c[3], c[4], c[5]).map(|v| v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp());
            let color = Vector3::new(c[6], c[7], c[8]).map(sigmoid);
            let q = Vector4::new(c[10], c[11], c[12], c[13]);
            let n = q.norm();
            let rotation = if n > 1e-12 {
                q / n
            } else {
                Vector4::new(1.0, 0.0, 0.0, 0.0)
            };
            out.push(Gaussian {
                position,
                scale,
                color,
                opacity: sigmoid(c[9]),
                rotation,
            });
        }
    }
    Ok(out)
}

/// Chains per-Gaussian parameter gradients back to raw feature channels.
/// Output layout matches `raw.data`.
pub fn activate_features_backward(raw: &GaussianFeatureMap, rays: &RayMap, grads: &[GaussianGrad]) -> Result<Vec<f64>> {
    check_dims(raw, rays)?;
    if grads.len() != raw.width * raw.height {
        return Err(Error::Shape(format!(
            "{} gradients for {} feature pixels",
            grads.len(),
            raw.width * raw.height
        )));
    }
    let mut out = vec![0.0; raw.data.len()];
    for y in 0..raw.height {
        for x in 0..raw.width {
            let i = y * raw.width + x;
            let c: Vec<f64> = raw.pixel(i).iter().map(|&v| v as f64).collect();
            let g = &grads[i];
            let o = &mut out[i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS];
            let d = rays.direction(x, y);
            let (e1, e2) = tangent_basis(&d);
            let s0 = sigmoid(c[0]);
            o[0] = g.position.dot(&d) * MAX_RAY_DEPTH * s0 * (1.0 - s0);
            let (t1, t2) = (c[1].tanh(), c[2].tanh());
            o[1] = g.position.dot(&e1) * MAX_TANGENT_OFFSET * (1.0 - t1 * t1);
            o[2] = g.position.dot(&e2) * MAX_TANGENT_OFFSET * (1.0 - t2 * t2);
            for k in 0..3 {
                let v = c[3 + k];
                o[3 + k] = if (LOG_SCALE_MIN..=LOG_SCALE_MAX).contains(&v) {
                    g.scale[k] * v.exp()
                } else {
                    0.0
                };
                let s = sigmoid(c[6 + k]);
                o[6 + k] = g.color[k] * s * (1.0 - s);
            }
            let so = sigmoid(c[9]);
            o[9] = g.opacity * so * (1.0 - so);
            let q = Vector4::new(c[10], c[11], c[12], c[13]);
            let n = q.norm();
            if n > 1e-12 {
                let qh = q / n;
                let gq = (g.rotation - qh * qh.dot(&g.rotation)) / n;
                o[10..14].copy_from_slice(gq.as_slice());
            }
        }
    }
    Ok(out)
}

pub fn prune(cloud: &GaussianCloud, threshold: f64) -> GaussianCloud {
    prune_with_indices(cloud, threshold).0
}

/// Drops Gaussians with opacity below `threshold`; also returns the indices
/// of the survivors in the input cloud.
pub fn prune_with_indices(cloud: &GaussianCloud, threshold: f64) -> (GaussianCloud, Vec<usize>) {
    let keep: Vec<usize> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| g.opacity >= threshold)
        .map(|(i, _)| i)
        .collect();
    let gaussians = keep.iter().map(|&i| cloud.gaussians[i].clone()).collect();
    let source_view_index = cloud
        .source_view_index
        .as_ref()
        .map(|s| keep.iter().map(|&i| s[i]).collect());
    (
        GaussianCloud {
            gaussians,
            source_view_index,
        },
        keep,
    )
}

/// Rotation matrix of `q / |q|`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion `(w, x, y, z)` of a rotation matrix.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Vector4<f64> {
    let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// `R(q) diag(s^2) R(q)^T`.
pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    let m = quat_to_matrix(&g.rotation) * Matrix3::from_diagonal(&g.scale);
    m * m.transpose()
}
