//! Camera poses, the fixed six-view rig, relative pose normalization and
//! Plücker ray maps.
//!
//! Conventions: world +Z is up. Camera frames follow the pinhole convention
//! x right, y down, z forward; `rotation` maps camera coordinates to world
//! coordinates, so its columns are the right, down and forward axes.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RIG_AZIMUTHS_DEG: [f64; 6] = [30.0, 90.0, 150.0, 210.0, 270.0, 330.0];
pub const RIG_ELEVATIONS_DEG: [f64; 6] = [20.0, -10.0, 20.0, -10.0, 20.0, -10.0];
pub const RIG_RADIUS: f64 = 1.5;
pub const RIG_FOV_DEG: f64 = 50.0;
pub const DEFAULT_IMAGE_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub origin: Vector3<f64>,
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera at `origin` looking at `target` with world +Z up, falling back
    /// to +X up when the view direction is vertical.
    pub fn look_at(origin: Vector3<f64>, target: Vector3<f64>, fov_deg: f64, width: usize, height: usize) -> Self {
        let forward = (target - origin).normalize();
        let mut right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Self {
            origin,
            rotation: Matrix3::from_columns(&[right, down, forward]),
            fov_deg,
            width,
            height,
        }
    }

    /// Camera on the sphere of `radius` at the given azimuth/elevation, looking
    /// at the world origin.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_deg: f64, width: usize, height: usize) -> Self {
        Self::look_at(
            spherical_to_cartesian(azimuth_deg, elevation_deg, radius),
            Vector3::zeros(),
            fov_deg,
            width,
            height,
        )
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Focal length in pixels; `fov_deg` is the horizontal field of view.
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// World-space unit direction of the ray through pixel-space point `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        let cam = Vector3::new((u - cx) / f, (v - cy) / f, 1.0);
        (self.rotation * cam).normalize()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.origin)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract("pose rotation is not a proper rotation".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Contract(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("pose image size must be nonzero".into()));
        }
        Ok(())
    }

    /// Same pose with a different image resolution.
    pub fn with_size(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }

    /// Azimuth and elevation in degrees of the camera origin.
    pub fn azimuth_elevation(&self) -> (f64, f64) {
        cartesian_to_spherical(&self.origin)
    }
}

pub fn spherical_to_cartesian(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Vector3<f64> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vector3::new(
        radius * el.cos() * az.cos(),
        radius * el.cos() * az.sin(),
        radius * el.sin(),
    )
}

pub fn cartesian_to_spherical(p: &Vector3<f64>) -> (f64, f64) {
    let r = p.norm();
    let az = p.y.atan2(p.x).to_degrees();
    let el = (p.z / r).clamp(-1.0, 1.0).asin().to_degrees();
    (az, el)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRig {
    pub poses: Vec<CameraPose>,
    pub azimuths_deg: Vec<f64>,
    pub elevations_deg: Vec<f64>,
    pub radius: f64,
}

impl ViewRig {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Rig built from stored poses; angles and radius are recovered from the
    /// camera origins.
    pub fn from_poses(poses: Vec<CameraPose>) -> Result<Self> {
        let first = poses.first().ok_or_else(|| Error::InvalidRig("empty rig".into()))?;
        let radius = first.origin.norm();
        let (azimuths_deg, elevations_deg) = poses.iter().map(|p| p.azimuth_elevation()).unzip();
        Ok(Self {
            poses,
            azimuths_deg,
            elevations_deg,
            radius,
        })
    }

    /// Rig with every pose rendered at `width x height`.
    pub fn with_size(&self, width: usize, height: usize) -> Self {
        Self {
            poses: self.poses.iter().map(|p| p.with_size(width, height)).collect(),
            ..self.clone()
        }
    }
}

/// The fixed training rig, using the first `views` azimuth/elevation pairs.
pub fn rig_default(views: usize) -> Result<ViewRig> {
    rig_with_size(views, DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)
}

pub fn rig_with_size(views: usize, width: usize, height: usize) -> Result<ViewRig> {
    if !(1..=RIG_AZIMUTHS_DEG.len()).contains(&views) {
        return Err(Error::InvalidRig(format!(
            "view count {views} outside 1..={}",
            RIG_AZIMUTHS_DEG.len()
        )));
    }
    let azimuths_deg = RIG_AZIMUTHS_DEG[..views].to_vec();
    let elevations_deg = RIG_ELEVATIONS_DEG[..views].to_vec();
    let poses = azimuths_deg
        .iter()
        .zip(&elevations_deg)
        .map(|(&az, &el)| CameraPose::orbit(az, el, RIG_RADIUS, RIG_FOV_DEG, width, height))
        .collect();
    Ok(ViewRig {
        poses,
        azimuths_deg,
        elevations_deg,
        radius: RIG_RADIUS,
    })
}

/// The pose the first view is mapped onto by [`normalize_relative`].
pub fn canonical_pose(fov_deg: f64, width: usize, height: usize) -> CameraPose {
    CameraPose::orbit(
        RIG_AZIMUTHS_DEG[0],
        RIG_ELEVATIONS_DEG[0],
        RIG_RADIUS,
        fov_deg,
        width,
        height,
    )
}

/// Applies the rigid transform taking `poses[0]` onto the canonical first-view
/// pose to every pose in the list.
pub fn normalize_relative(poses: &[CameraPose]) -> Vec<CameraPose> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let canon = canonical_pose(first.fov_deg, first.width, first.height);
    let rot = canon.rotation * first.rotation.transpose();
    let mut out: Vec<CameraPose> = poses
        .iter()
        .map(|p| CameraPose {
            origin: rot * (p.origin - first.origin) + canon.origin,
            rotation: orthonormalize(&(rot * p.rotation)),
            ..p.clone()
        })
        .collect();
    out[0].origin = canon.origin;
    out[0].rotation = canon.rotation;
    out
}

/// Projects a nearly-orthonormal matrix back onto SO(3).
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = m.column(0).normalize();
    let c1 = (m.column(1) - c0 * c0.dot(&m.column(1))).normalize();
    Matrix3::from_columns(&[c0, c1, c0.cross(&c1)])
}

/// Rotation by `angle_rad` about `axis`.
pub fn axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    if axis.norm() < 1e-12 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad).into_inner()
}

/// Per-pixel Plücker encoding `(d, o x d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    /// Common origin of every ray (pinhole camera center).
    pub origin: Vector3<f64>,
    /// `(height, width, 6)` row-major: direction then moment.
    pub data: Vec<f64>,
}

impl RayMap {
    #[inline]
    pub fn direction(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 6;
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn moment(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 6;
        Vector3::new(self.data[i + 3], self.data[i + 4], self.data[i + 5])
    }

    fn set(&mut self, x: usize, y: usize, d: &Vector3<f64>) {
        let m = self.origin.cross(d);
        let i = (y * self.width + x) * 6;
        self.data[i..i + 3].copy_from_slice(d.as_slice());
        self.data[i + 3..i + 6].copy_from_slice(m.as_slice());
    }
}

/// Plücker ray map through pixel centers at the pose's resolution.
pub fn plucker_map(pose: &CameraPose) -> RayMap {
    plucker_map_at(pose, pose.width, pose.height)
}

/// Plücker ray map with the pose's field of view sampled on a
/// `width x height` pixel grid.
pub fn plucker_map_at(pose: &CameraPose, width: usize, height: usize) -> RayMap {
    let pose = pose.with_size(width, height);
    let mut map = RayMap {
        width,
        height,
        origin: pose.origin,
        data: vec![0.0; width * height * 6],
    };
    for y in 0..height {
        for x in 0..width {
            let d = pose.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            map.set(x, y, &d);
        }
    }
    map
}

/// Area-average pooling; directions are re-normalized and moments recomputed
/// from them.
pub fn downsample_raymap(map: &RayMap, factor: usize) -> Result<RayMap> {
    if factor == 0 || !map.width.is_multiple_of(factor) || !map.height.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "downsample factor {factor} does not divide ray map {}x{}",
            map.height, map.width
        )));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (w, h) = (map.width / factor, map.height / factor);
    let mut out = RayMap {
        width: w,
        height: h,
        origin: map.origin,
        data: vec![0.0; w * h * 6],
    };
    for y in 0..h {
        for x in 0..w {
            let mut acc = Vector3::zeros();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += map.direction(x * factor + dx, y * factor + dy);
                }
            }
            out.set(x, y, &acc.normalize());
        }
    }
    Ok(out)
}

/// One line of a pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl PoseRecord {
    pub fn to_pose(&self) -> CameraPose {
        CameraPose::orbit(
            self.azimuth_deg,
            self.elevation_deg,
            self.radius,
            self.fov_deg,
            self.width,
            self.height,
        )
    }

    /// Record for a pose looking at the world origin.
    pub fn from_pose(pose: &CameraPose) -> Self {
        let (azimuth_deg, elevation_deg) = pose.azimuth_elevation();
        Self {
            azimuth_deg,
            elevation_deg,
            radius: pose.origin.norm(),
            fov_deg: pose.fov_deg,
            width: pose.width,
            height: pose.height,
        }
    }
}

/// Pose files hold one JSON object per line.
pub fn write_pose_file(path: &Path, records: &[PoseRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("pose record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pose_file(path: &Path) -> Result<Vec<PoseRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if !(rec.fov_deg > 0.0 && rec.fov_deg < 180.0) || rec.width == 0 || rec.height == 0 {
            return Err(Error::format(path, format!("line {}: invalid pose", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rig_constants() {
        let rig = rig_default(6).unwrap();
        assert_eq!(rig.azimuths_deg, vec![30.0, 90.0, 150.0, 210.0, 270.0, 330.0]);
        assert_eq!(rig.elevations_deg, vec![20.0, -10.0, 20.0, -10.0, 20.0, -10.0]);
        assert_eq!(rig.radius, 1.5);
        for p in &rig.poses {
            assert_eq!(p.fov_deg, 50.0);
            assert_abs_diff_eq!(p.origin.norm(), 1.5, epsilon = 1e-12);
            p.validate().unwrap();
        }
        let (az, el) = rig.poses[0].azimuth_elevation();
        assert_abs_diff_eq!(az, 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(el, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn rig_pose_one_by_hand() {
        let rig = rig_default(6).unwrap();
        // azimuth 90, elevation -10: x = 0, y = 1.5 cos(10deg), z = -1.5 sin(10deg)
        let c10 = 0.984_807_753_012_208;
        let s10 = 0.173_648_177_666_930_3;
        let o = rig.poses[1].origin;
        assert_abs_diff_eq!(o.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.y, 1.5 * c10, epsilon = 1e-12);
        assert_abs_diff_eq!(o.z, -1.5 * s10, epsilon = 1e-12);
    }

    #[test]
    fn rig_view_counts() {
        assert!(rig_default(0).is_err());
        assert!(rig_default(7).is_err());
        let four = rig_default(4).unwrap();
        assert_eq!(four.azimuths_deg, vec![30.0, 90.0, 150.0, 210.0]);
    }

    #[test]
    fn rig_poses_look_at_origin() {
        for p in rig_default(6).unwrap().poses {
            let expect = (-p.origin).normalize();
            assert!((p.forward() - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn look_at_vertical_falls_back_to_x_up() {
        let p = CameraPose::look_at(Vector3::new(0.0, 0.0, 2.0), Vector3::zeros(), 50.0, 8, 8);
        p.validate().unwrap();
        assert!((p.forward() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn center_pixel_on_axis() {
        let p = CameraPose::look_at(Vector3::new(0.0, 0.0, 1.5), Vector3::zeros(), 50.0, 9, 9);
        let map = plucker_map(&p);
        let d = map.direction(4, 4);
        assert!((d - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(map.moment(4, 4).norm() < 1e-12);

        let p = CameraPose::look_at(Vector3::new(1.5, 0.0, 0.0), Vector3::zeros(), 50.0, 9, 9);
        let map = plucker_map(&p);
        assert!((map.direction(4, 4) - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(map.moment(4, 4).norm() < 1e-12);
        // Pixel one to the right: camera right axis is +Y here.
        let f = p.focal();
        let d = Vector3::new(-1.0, 1.0 / f, 0.0).normalize();
        let by_hand = Vector3::new(0.0, 0.0, 1.5 * d.y);
        assert!((map.moment(5, 4) - by_hand).norm() < 1e-12);
        assert!(map.moment(5, 4).norm() > 1e-3);
    }

    #[test]
    fn raymap_invariants() {
        for p in rig_default(6).unwrap().with_size(16, 12).poses {
            let m = plucker_map(&p);
            for y in 0..m.height {
                for x in 0..m.width {
                    let d = m.direction(x, y);
                    assert!((d.norm() - 1.0).abs() < 1e-6);
                    assert!(d.dot(&m.moment(x, y)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn downsample_cases() {
        let pose = rig_default(1).unwrap().poses[0].with_size(64, 64);
        let full = plucker_map(&pose);
        assert_eq!(downsample_raymap(&full, 1).unwrap(), full);
        assert!(downsample_raymap(&full, 3).is_err());

        let small = downsample_raymap(&full, 8).unwrap();
        assert_eq!((small.width, small.height), (8, 8));
        // Averaging oracle: mean of the 8x8 block at (4, 4) of the coarse grid.
        let mut acc = Vector3::zeros();
        for y in 32..40 {
            for x in 32..40 {
                acc += full.direction(x, y);
            }
        }
        assert!((small.direction(4, 4) - acc.normalize()).norm() < 1e-12);
        // Even sizes have no center pixel; compare the 2x2 central averages.
        let center = |m: &RayMap| {
            let (cx, cy) = (m.width / 2, m.height / 2);
            (m.direction(cx - 1, cy - 1) + m.direction(cx, cy - 1) + m.direction(cx - 1, cy) + m.direction(cx, cy))
                .normalize()
        };
        assert!((center(&small) - center(&full)).norm() < 1e-3);
        for y in 0..8 {
            for x in 0..8 {
                let d = small.direction(x, y);
                assert!(d.dot(&small.moment(x, y)).abs() < 1e-12);
            }
        }

        let mut constant = full.clone();
        let d = Vector3::new(0.0, 0.6, 0.8);
        for y in 0..64 {
            for x in 0..64 {
                constant.set(x, y, &d);
            }
        }
        let c = downsample_raymap(&constant, 4).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!((c.direction(x, y) - d).norm() < 1e-12);
                assert!((c.moment(x, y) - constant.moment(0, 0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_identical_and_rig() {
        let rig = rig_default(6).unwrap();
        let out = normalize_relative(&rig.poses);
        assert_eq!(out[0], rig.poses[0]);
        let p = rig.poses[3].clone();
        let pair = normalize_relative(&[p.clone(), p]);
        assert!((pair[0].rotation - pair[1].rotation).abs().max() < 1e-12);
        assert!((pair[0].origin - pair[1].origin).norm() < 1e-12);
        assert!((pair[0].rotation - rig.poses[0].rotation).abs().max() < 1e-12);
        assert!((pair[0].origin - rig.poses[0].origin).norm() < 1e-12);
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 2.0 - Vector3::repeat(1.0);
        axis_angle(axis, rng.random_range(-3.0..3.0))
    }

    #[test]
    fn normalize_invariant_to_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rig = rig_default(6).unwrap();
        for _ in 0..20 {
            let g = random_rotation(&mut rng);
            let moved: Vec<_> = rig
                .poses
                .iter()
                .map(|p| CameraPose {
                    origin: g * p.origin,
                    rotation: g * p.rotation,
                    ..p.clone()
                })
                .collect();
            let a = normalize_relative(&rig.poses);
            let b = normalize_relative(&moved);
            for (x, y) in a.iter().zip(&b) {
                assert!((x.origin - y.origin).norm() < 1e-6);
                assert!((x.rotation - y.rotation).abs().max() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.jsonl");
        let recs: Vec<_> = rig_default(6)
            .unwrap()
            .poses
            .iter()
            .map(PoseRecord::from_pose)
            .collect();
        write_pose_file(&path, &recs).unwrap();
        let back = read_pose_file(&path).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert!((a.to_pose().origin - b.to_pose().origin).norm() < 1e-12);
        }
        std::fs::write(&path, "{\"azimuth_deg\": 1}\n").unwrap();
        assert!(read_pose_file(&path).is_err());
    }

    proptest! {
        #[test]
        fn moment_independent_of_point_on_ray(
            ox in -3.0..3.0f64, oy in -3.0..3.0f64, oz in -3.0..3.0f64,
            dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
            s in -5.0..5.0f64,
        ) {
            let d = Vector3::new(dx, dy, dz);
            prop_assume!(d.norm() > 1e-3);
            let d = d.normalize();
            let o = Vector3::new(ox, oy, oz);
            let p = o + s * d;
            prop_assert!((p.cross(&d) - o.cross(&d)).norm() < 1e-6);
        }

        #[test]
        fn normalize_is_idempotent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let poses: Vec<_> = (0..4)
                .map(|_| {
                    let o = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 4.0
                        - Vector3::repeat(2.0);
                    CameraPose { origin: o, rotation: random_rotation(&mut rng), fov_deg: 50.0, width: 8, height: 8 }
                })
                .collect();
            let once = normalize_relative(&poses);
            let twice = normalize_relative(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a.origin - b.origin).norm() < 1e-9);
                prop_assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            }
        }
    }
}
