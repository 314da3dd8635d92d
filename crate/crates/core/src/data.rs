//! Procedural ground truth: compositions of spheres, boxes and capsules built
//! from surface Gaussians, rendered into rig and random-sphere views.
//!
//! Dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/obj_0000/view_00.png ... view_{v-1}.png   rig views
//! <dir>/obj_0000/unseen_00.png ...                random-sphere views
//! <dir>/obj_0000/poses.jsonl                      rig poses, then unseen poses
//! <dir>/obj_0000/cloud.dspl                       ground-truth cloud
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{read_pose_file, rig_with_size, write_pose_file, CameraPose, PoseRecord, RIG_FOV_DEG, RIG_RADIUS};
use crate::error::{Error, Result};
use crate::gaussians::{matrix_to_quat, Gaussian, GaussianCloud};
use crate::image::RgbImage;
use crate::render::{render, WHITE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;
/// Gaussians per primitive.
pub const MIN_PRIMITIVE_GAUSSIANS: usize = 50;
pub const MAX_PRIMITIVE_GAUSSIANS: usize = 400;
const SURFACE_OPACITY: f64 = 0.95;
/// Surface-normal extent of each Gaussian relative to its tangent extent.
const FLATNESS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Capsule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    /// Sphere radius, box half-extent scale, or capsule total half-length.
    pub scale: f64,
    /// Box half-extents as fractions of `scale`; capsule axis for capsules.
    pub shape: [f64; 3],
    pub color: [f64; 3],
    pub gaussians: usize,
}

impl Primitive {
    /// Per-axis half-extent of the primitive's bounding box around its center.
    pub fn half_extent(&self) -> Vector3<f64> {
        match self.kind {
            PrimitiveKind::Sphere => Vector3::repeat(self.scale),
            PrimitiveKind::Box => Vector3::from(self.shape) * self.scale,
            PrimitiveKind::Capsule => {
                let (r, h) = capsule_dims(self.scale);
                Vector3::from(self.shape).abs() * h + Vector3::repeat(r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

/// Capsule radius and half-length of the cylinder part.
fn capsule_dims(scale: f64) -> (f64, f64) {
    (0.4 * scale, 0.6 * scale)
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotation whose third column is `normal`.
fn frame_from_normal(normal: &Vector3<f64>) -> Matrix3<f64> {
    let helper = if normal.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = normal.cross(&helper).normalize();
    let t2 = normal.cross(&t1);
    Matrix3::from_columns(&[t1, t2, *normal])
}

fn surface_area(p: &Primitive) -> f64 {
    match p.kind {
        PrimitiveKind::Sphere => 4.0 * PI * p.scale * p.scale,
        PrimitiveKind::Box => {
            let e = Vector3::from(p.shape) * p.scale * 2.0;
            2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
        }
        PrimitiveKind::Capsule => {
            let (r, h) = capsule_dims(p.scale);
            4.0 * PI * r * r + 2.0 * PI * r * 2.0 * h
        }
    }
}

/// Point and outward normal, uniform over the surface.
fn sample_surface(p: &Primitive, rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
    let c = Vector3::from(p.center);
    match p.kind {
        PrimitiveKind::Sphere => {
            let n = random_unit(rng);
            (c + n * p.scale, n)
        }
        PrimitiveKind::Box => {
            let e = Vector3::from(p.shape) * p.scale;
            let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut q = Vector3::new(
                rng.random_range(-e.x..e.x),
                rng.random_range(-e.y..e.y),
                rng.random_range(-e.z..e.z),
            );
            q[axis] = sign * e[axis];
            let mut n = Vector3::zeros();
            n[axis] = sign;
            (c + q, n)
        }
        PrimitiveKind::Capsule => {
            let (r, h) = capsule_dims(p.scale);
            let axis = Vector3::from(p.shape);
            let frame = frame_from_normal(&axis);
            let cyl = 2.0 * PI * r * 2.0 * h;
            let caps = 4.0 * PI * r * r;
            if rng.random_range(0.0..cyl + caps) < cyl {
                let phi = rng.random_range(0.0..2.0 * PI);
                let n = frame * Vector3::new(phi.cos(), phi.sin(), 0.0);
                let s = rng.random_range(-h..h);
                (c + axis * s + n * r, n)
            } else {
                let n = random_unit(rng);
                let end = if n.dot(&axis) >= 0.0 { h } else { -h };
                (c + axis * end + n * r, n)
            }
        }
    }
}

fn random_primitive(rng: &mut impl Rng) -> Primitive {
    let kind = match rng.random_range(0..3) {
        0 => PrimitiveKind::Sphere,
        1 => PrimitiveKind::Box,
        _ => PrimitiveKind::Capsule,
    };
    let scale = rng.random_range(0.1..0.5);
    let shape = match kind {
        PrimitiveKind::Sphere => [1.0; 3],
        PrimitiveKind::Box => [
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
        ],
        PrimitiveKind::Capsule => random_unit(rng).into(),
    };
    let center = [
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.6..0.6),
    ];
    let color = [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ];
    let gaussians = rng.random_range(MIN_PRIMITIVE_GAUSSIANS..=MAX_PRIMITIVE_GAUSSIANS);
    let mut p = Primitive {
        kind,
        center,
        scale,
        shape,
        color,
        gaussians,
    };
    // Pull the center in so every surface point stays inside [-1, 1]^3.
    let e = p.half_extent();
    for k in 0..3 {
        let lim = (1.0 - e[k]).max(0.0);
        p.center[k] = p.center[k].clamp(-lim, lim);
    }
    p
}

/// Surface Gaussians for one primitive.
pub fn primitive_gaussians(p: &Primitive, rng: &mut impl Rng) -> Vec<Gaussian> {
    let tangent = (surface_area(p) / p.gaussians as f64).sqrt() * 0.6;
    (0..p.gaussians)
        .map(|_| {
            let (pos, n) = sample_surface(p, rng);
            let color = Vector3::from(p.color).map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
            Gaussian {
                position: pos.map(|v| v.clamp(-1.0, 1.0)),
                scale: Vector3::new(tangent, tangent, tangent * FLATNESS),
                color,
                opacity: SURFACE_OPACITY,
                rotation: matrix_to_quat(&frame_from_normal(&n)),
            }
        })
        .collect()
}

pub fn generate_scene(seed: u64) -> (SceneSpec, GaussianCloud) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let primitives: Vec<Primitive> = (0..n).map(|_| random_primitive(&mut rng)).collect();
    let gaussians = primitives
        .iter()
        .flat_map(|p| primitive_gaussians(p, &mut rng))
        .collect();
    (SceneSpec { seed, primitives }, GaussianCloud::new(gaussians))
}

/// Camera on the sphere of the given radius with uniformly distributed
/// direction, looking at the origin.
pub fn random_sphere_pose(rng: &mut impl Rng, radius: f64, width: usize, height: usize) -> PoseRecord {
    let z: f64 = rng.random_range(-1.0..1.0);
    PoseRecord {
        azimuth_deg: rng.random_range(0.0..360.0),
        elevation_deg: z.asin().to_degrees(),
        radius,
        fov_deg: RIG_FOV_DEG,
        width,
        height,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub primitives: usize,
    pub gaussians: usize,
    /// File name to SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub views: usize,
    pub unseen: usize,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub objects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub objects: usize,
    pub views: usize,
    pub unseen: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            objects: 4,
            views: 6,
            unseen: 2,
            image_size: crate::camera::DEFAULT_IMAGE_SIZE,
            seed: 0,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn object_id(i: usize) -> String {
    format!("obj_{i:04}")
}

fn rig_file(i: usize) -> String {
    format!("view_{i:02}.png")
}

fn unseen_file(i: usize) -> String {
    format!("unseen_{i:02}.png")
}

/// Everything needed to train on or evaluate one object.
#[derive(Clone, Debug)]
pub struct ObjectRecord {
    pub id: String,
    pub seed: u64,
    pub rig_poses: Vec<CameraPose>,
    pub rig_images: Vec<RgbImage>,
    pub unseen_poses: Vec<CameraPose>,
    pub unseen_images: Vec<RgbImage>,
    pub cloud: GaussianCloud,
}

/// Generates one object in memory exactly as it would be stored: the cloud is
/// rounded through the file format and images are quantized to 8 bits.
pub fn generate_object(index: usize, seed: u64, cfg: &DatasetConfig) -> Result<(ObjectRecord, Vec<PoseRecord>, usize)> {
    let (spec, cloud) = generate_scene(seed);
    let cloud = GaussianCloud::from_bytes(&cloud.to_bytes()).map_err(Error::Contract)?;
    let rig = rig_with_size(cfg.views, cfg.image_size, cfg.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut records: Vec<PoseRecord> = rig.poses.iter().map(PoseRecord::from_pose).collect();
    for _ in 0..cfg.unseen {
        records.push(random_sphere_pose(&mut rng, RIG_RADIUS, cfg.image_size, cfg.image_size));
    }
    let poses: Vec<CameraPose> = records.iter().map(PoseRecord::to_pose).collect();
    let images = poses
        .iter()
        .map(|p| Ok(render(&cloud, p, WHITE)?.image().quantized()))
        .collect::<Result<Vec<_>>>()?;
    let (rig_poses, unseen_poses) = poses.split_at(cfg.views);
    let (rig_images, unseen_images) = images.split_at(cfg.views);
    Ok((
        ObjectRecord {
            id: object_id(index),
            seed,
            rig_poses: rig_poses.to_vec(),
            rig_images: rig_images.to_vec(),
            unseen_poses: unseen_poses.to_vec(),
            unseen_images: unseen_images.to_vec(),
            cloud,
        },
        records,
        spec.primitives.len(),
    ))
}

/// Per-object seeds derived from the dataset seed.
pub fn object_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

fn write_object(dir: &Path, rec: &ObjectRecord, poses: &[PoseRecord]) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sums = BTreeMap::new();
    let images = rec
        .rig_images
        .iter()
        .enumerate()
        .map(|(i, im)| (rig_file(i), im))
        .chain(rec.unseen_images.iter().enumerate().map(|(i, im)| (unseen_file(i), im)));
    for (name, im) in images {
        let path = dir.join(&name);
        im.save_png(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        sums.insert(name, sha256_hex(&bytes));
    }
    let pose_path = dir.join("poses.jsonl");
    write_pose_file(&pose_path, poses)?;
    let bytes = std::fs::read(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
    sums.insert("poses.jsonl".into(), sha256_hex(&bytes));
    sums.insert(
        "cloud.dspl".into(),
        write_file(&dir.join("cloud.dspl"), &rec.cloud.to_bytes())?,
    );
    Ok(sums)
}

pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.views == 0 || !cfg.views.is_multiple_of(2) {
        return Err(Error::InvalidRig(format!(
            "{} views; need a positive even count",
            cfg.views
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seeds = object_seeds(cfg.seed, cfg.objects);
    let entries = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (rec, poses, primitives) = generate_object(i, seed, cfg)?;
            let checksums = write_object(&out_dir.join(&rec.id), &rec, &poses)?;
            Ok(ManifestEntry {
                id: rec.id,
                seed,
                primitives,
                gaussians: rec.cloud.len(),
                checksums,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed: cfg.seed,
        views: cfg.views,
        unseen: cfg.unseen,
        width: cfg.image_size,
        height: cfg.image_size,
        background: WHITE,
        objects: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != DATASET_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported dataset version {}", m.version),
        ));
    }
    Ok(m)
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub objects: Vec<ObjectRecord>,
}

fn verified_read(dir: &Path, name: &str, entry: &ManifestEntry) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match entry.checksums.get(name) {
        Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
        Some(_) => Err(Error::format(&path, "checksum mismatch")),
        None => Err(Error::format(&path, "file not listed in manifest")),
    }
}

fn load_object(root: &Path, m: &Manifest, entry: &ManifestEntry) -> Result<ObjectRecord> {
    let dir = root.join(&entry.id);
    verified_read(&dir, "poses.jsonl", entry)?;
    let records = read_pose_file(&dir.join("poses.jsonl"))?;
    if records.len() != m.views + m.unseen {
        return Err(Error::format(
            dir.join("poses.jsonl"),
            format!("{} poses, manifest expects {}", records.len(), m.views + m.unseen),
        ));
    }
    let poses: Vec<CameraPose> = records.iter().map(PoseRecord::to_pose).collect();
    let load = |name: String| -> Result<RgbImage> {
        verified_read(&dir, &name, entry)?;
        RgbImage::load_png(&dir.join(name))
    };
    let rig_images = (0..m.views).map(|i| load(rig_file(i))).collect::<Result<Vec<_>>>()?;
    let unseen_images = (0..m.unseen)
        .map(|i| load(unseen_file(i)))
        .collect::<Result<Vec<_>>>()?;
    let cloud_bytes = verified_read(&dir, "cloud.dspl", entry)?;
    let cloud = GaussianCloud::from_bytes(&cloud_bytes).map_err(|msg| Error::format(dir.join("cloud.dspl"), msg))?;
    Ok(ObjectRecord {
        id: entry.id.clone(),
        seed: entry.seed,
        rig_poses: poses[..m.views].to_vec(),
        rig_images,
        unseen_poses: poses[m.views..].to_vec(),
        unseen_images,
        cloud,
    })
}

/// Loads and checksum-verifies every object.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let objects = manifest
        .objects
        .iter()
        .map(|e| load_object(dir, &manifest, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        for seed in 0..20 {
            let (s1, c1) = generate_scene(seed);
            let (s2, c2) = generate_scene(seed);
            assert_eq!((s1.clone(), c1.clone()), (s2, c2));
            assert!((1..=4).contains(&s1.primitives.len()));
            for p in &s1.primitives {
                assert!((MIN_PRIMITIVE_GAUSSIANS..=MAX_PRIMITIVE_GAUSSIANS).contains(&p.gaussians));
                assert!((0.1..0.5).contains(&p.scale));
            }
            assert!(c1.is_valid());
            for g in &c1.gaussians {
                assert!(g.position.iter().all(|v| v.abs() <= 1.0));
            }
            assert_eq!(c1.len(), s1.primitives.iter().map(|p| p.gaussians).sum::<usize>());
        }
    }

    #[test]
    fn sphere_surface_distance() {
        let p = Primitive {
            kind: PrimitiveKind::Sphere,
            center: [0.1, -0.2, 0.3],
            scale: 0.4,
            shape: [1.0; 3],
            color: [0.5; 3],
            gaussians: 400,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = primitive_gaussians(&p, &mut rng);
        let c = Vector3::from(p.center);
        let mean = g.iter().map(|g| (g.position - c).norm()).sum::<f64>() / g.len() as f64;
        assert!((mean / 0.4 - 1.0).abs() < 0.02);
    }

    #[test]
    fn box_and_capsule_points_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Primitive {
            kind: PrimitiveKind::Box,
            center: [0.0; 3],
            scale: 0.4,
            shape: [1.0, 0.7, 0.8],
            color: [0.5; 3],
            gaussians: 100,
        };
        for _ in 0..200 {
            let (q, n) = sample_surface(&b, &mut rng);
            let e = Vector3::from(b.shape) * b.scale;
            let on_face = (0..3).any(|k| ((q[k].abs() - e[k]).abs() < 1e-12) && n[k].abs() == 1.0);
            assert!(on_face);
        }
        let axis = Vector3::new(1.0, 2.0, 2.0).normalize();
        let c = Primitive {
            kind: PrimitiveKind::Capsule,
            center: [0.0; 3],
            scale: 0.5,
            shape: axis.into(),
            color: [0.5; 3],
            gaussians: 100,
        };
        let (r, h) = capsule_dims(0.5);
        for _ in 0..200 {
            let (q, n) = sample_surface(&c, &mut rng);
            // Distance to the axis segment equals the radius.
            let s = q.dot(&axis).clamp(-h, h);
            assert!(((q - axis * s).norm() - r).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussians_face_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Primitive {
            kind: PrimitiveKind::Sphere,
            center: [0.0; 3],
            scale: 0.3,
            shape: [1.0; 3],
            color: [0.2, 0.4, 0.6],
            gaussians: 50,
        };
        for g in primitive_gaussians(&p, &mut rng) {
            let r = crate::gaussians::quat_to_matrix(&g.rotation);
            let n = g.position.normalize();
            assert!((r.column(2).dot(&n) - 1.0).abs() < 1e-9);
            assert!(g.scale.z < g.scale.x);
        }
    }

    #[test]
    fn sphere_poses_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut mean = Vector3::zeros();
        for _ in 0..n {
            let p = random_sphere_pose(&mut rng, 1.5, 8, 8).to_pose();
            assert!((p.origin.norm() - 1.5).abs() < 1e-12);
            mean += p.origin;
        }
        mean /= n as f64;
        // Each coordinate has std 1.5/sqrt(3); 4 standard errors.
        let tol = 4.0 * 1.5 / (3.0f64 * n as f64).sqrt();
        assert!(mean.iter().all(|v| v.abs() < tol), "{mean:?}");
    }

    #[test]
    fn dataset_round_trip_and_self_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            objects: 2,
            views: 6,
            unseen: 2,
            image_size: 32,
            seed: 11,
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.objects.len(), 2);
        let pngs = std::fs::read_dir(dir.path().join("obj_0000"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 8);
        let ds = load_dataset(dir.path()).unwrap();
        for obj in &ds.objects {
            for p in &obj.unseen_poses {
                assert!((p.origin.norm() - 1.5).abs() < 1e-12);
            }
            for (p, im) in obj
                .rig_poses
                .iter()
                .chain(&obj.unseen_poses)
                .zip(obj.rig_images.iter().chain(&obj.unseen_images))
            {
                assert_eq!(&render(&obj.cloud, p, WHITE).unwrap().image().quantized(), im);
            }
        }
        let dir2 = tempfile::tempdir().unwrap();
        assert_eq!(build_dataset(&cfg, dir2.path()).unwrap(), m);
    }

    #[test]
    fn corrupted_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            objects: 1,
            image_size: 16,
            ..Default::default()
        };
        build_dataset(&cfg, dir.path()).unwrap();
        let cloud = dir.path().join("obj_0000/cloud.dspl");
        let mut bytes = std::fs::read(&cloud).unwrap();
        bytes[20] ^= 1;
        std::fs::write(&cloud, bytes).unwrap();
        let err = load_dataset(dir.path()).err().unwrap();
        assert!(err.to_string().contains("cloud.dspl"), "{err}");
    }
}
