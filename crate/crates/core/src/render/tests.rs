use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::render_brute_force;
use super::*;
use crate::camera::{rig_default, rig_with_size, CameraPose};
use crate::gaussians::Gaussian;

const BLACK: [f64; 3] = [0.0; 3];

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    GaussianCloud::new(
        (0..n)
            .map(|_| Gaussian {
                position: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                scale: Vector3::from_fn(|_, _| rng.random_range(0.04..0.25)),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                opacity: rng.random_range(0.05..0.95),
                rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize(),
            })
            .collect(),
    )
}

fn random_pose(rng: &mut ChaCha8Rng, size: usize) -> CameraPose {
    CameraPose::orbit(
        rng.random_range(0.0..360.0),
        rng.random_range(-60.0..60.0),
        rng.random_range(1.5..2.5),
        50.0,
        size,
        size,
    )
}

fn center_pose(size: usize) -> CameraPose {
    rig_default(1).unwrap().poses[0].with_size(size, size)
}

#[test]
fn empty_cloud_is_background() {
    let pose = center_pose(8);
    let out = render(&GaussianCloud::default(), &pose, BLACK).unwrap();
    assert!(out.color.iter().all(|&c| c == 0.0));
    assert!(out.alpha.iter().all(|&a| a == 0.0));
    let out = render(&GaussianCloud::default(), &pose, WHITE).unwrap();
    assert!(out.color.iter().all(|&c| c == 1.0));
}

#[test]
fn single_opaque_gaussian_center_pixel() {
    let pose = center_pose(33);
    let color = Vector3::new(0.2, 0.7, 0.4);
    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(Vector3::zeros(), 0.5, color, 1.0)]);
    let out = render(&cloud, &pose, WHITE).unwrap();
    let c = 16 * 33 + 16;
    // The mean projects onto the center pixel, so alpha saturates at the clamp.
    let expect = color * MAX_ALPHA + Vector3::from(WHITE) * (1.0 - MAX_ALPHA);
    assert!(out.alpha[c] > 0.99);
    assert!((out.alpha[c] - MAX_ALPHA).abs() < 1e-12);
    for k in 0..3 {
        assert!((out.color[c * 3 + k] - expect[k]).abs() < 1e-12);
    }
    assert!((out.depth[c] - 1.5).abs() < 1e-9);
}

#[test]
fn front_gaussian_occludes_back() {
    let pose = center_pose(17);
    let toward_cam = pose.origin.normalize();
    let red = Gaussian::isotropic(toward_cam * 0.3, 0.2, Vector3::new(1.0, 0.0, 0.0), 1.0);
    let blue = Gaussian::isotropic(-toward_cam * 0.3, 0.2, Vector3::new(0.0, 0.0, 1.0), 1.0);
    // Listed back-first so the sort has to do the work.
    let out = render(&GaussianCloud::new(vec![blue, red]), &pose, WHITE).unwrap();
    let c = (8 * 17 + 8) * 3;
    assert!(
        out.color[c] > 0.99 && out.color[c + 2] < 0.01,
        "{:?}",
        &out.color[c..c + 3]
    );
}

#[test]
fn render_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 50);
    let pose = random_pose(&mut rng, 32);
    let a = render(&cloud, &pose, WHITE).unwrap();
    let b = render(&cloud, &pose, WHITE).unwrap();
    assert_eq!(a, b);
}

#[test]
fn output_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let cloud = random_cloud(&mut rng, 30);
        let out = render(&cloud, &random_pose(&mut rng, 24), [0.3, 0.6, 0.9]).unwrap();
        for (i, &a) in out.alpha.iter().enumerate() {
            assert!((0.0..=1.0).contains(&a));
            let c = &out.color[i * 3..i * 3 + 3];
            assert!(c.iter().all(|v| v.is_finite()));
            if a == 0.0 {
                assert_eq!(c, &[0.3, 0.6, 0.9]);
            }
        }
    }
}

#[test]
fn matches_brute_force_and_alpha_conservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let cloud = random_cloud(&mut rng, 64);
        let pose = random_pose(&mut rng, 32);
        let fast = render(&cloud, &pose, WHITE).unwrap();
        let slow = render_brute_force(&cloud, &pose, WHITE);
        // Each skipped term is below CONTRIBUTION_EPS; a handful may overlap a pixel.
        for i in 0..fast.alpha.len() {
            assert!((fast.alpha[i] - slow.alpha[i]).abs() < 1e-4);
        }
        for i in 0..fast.color.len() {
            assert!((fast.color[i] - slow.color[i]).abs() < 1e-4);
        }
    }
}

#[test]
fn tight_cutoffs_approach_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cloud = random_cloud(&mut rng, 64);
    let pose = random_pose(&mut rng, 32);
    let default = render(&cloud, &pose, WHITE).unwrap();
    let (same, _) = render_with_cutoffs(&cloud, &pose, WHITE, Cutoffs::default()).unwrap();
    assert_eq!(default, same);
    let tight = Cutoffs {
        contribution: 1e-13,
        transmittance: 1e-14,
    };
    let (out, _) = render_with_cutoffs(&cloud, &pose, WHITE, tight).unwrap();
    let slow = render_brute_force(&cloud, &pose, WHITE);
    for (a, b) in out.color.iter().zip(&slow.color) {
        assert!((a - b).abs() < 1e-10);
    }
    for bad in [0.0, 1.0, -1e-3, f64::NAN] {
        let c = Cutoffs {
            contribution: bad,
            ..Cutoffs::default()
        };
        assert!(render_with_cutoffs(&cloud, &pose, WHITE, c).is_err());
        let c = Cutoffs {
            transmittance: bad,
            ..Cutoffs::default()
        };
        let up = RenderUpstream::zeros(32, 32);
        assert!(render_backward_with_cutoffs(&cloud, &pose, WHITE, c, &up).is_err());
    }
}

#[test]
fn background_validation() {
    let pose = center_pose(4);
    assert!(render(&GaussianCloud::default(), &pose, [1.5, 0.0, 0.0]).is_err());
}

#[test]
fn raising_front_opacity_never_raises_back_contribution() {
    let pose = center_pose(21);
    let toward = pose.origin.normalize();
    let back = Gaussian::isotropic(-toward * 0.2, 0.3, Vector3::new(0.0, 0.0, 1.0), 0.8);
    let contribution = |front_opacity: f64| {
        // Back contribution = render(front+back) - render(front only) on the alpha channel.
        let front = Gaussian::isotropic(toward * 0.2, 0.2, Vector3::new(1.0, 0.0, 0.0), front_opacity);
        let both = render(&GaussianCloud::new(vec![front.clone(), back.clone()]), &pose, BLACK).unwrap();
        let only = render(&GaussianCloud::new(vec![front]), &pose, BLACK).unwrap();
        both.alpha
            .iter()
            .zip(&only.alpha)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>()
    };
    let mut prev = contribution(0.05);
    for k in 1..10 {
        let next = contribution(0.05 + 0.1 * k as f64);
        for (p, n) in prev.iter().zip(&next) {
            assert!(*n <= *p + 1e-12);
        }
        prev = next;
    }
}

#[test]
fn rig_render_order_and_symmetry() {
    let rig = rig_with_size(6, 33, 33).unwrap();
    let empty = render_rig(&GaussianCloud::default(), &rig, WHITE).unwrap();
    assert_eq!(empty.len(), 6);
    assert!(empty.iter().all(|r| r.alpha.iter().all(|&a| a == 0.0)));

    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(
        Vector3::zeros(),
        0.05,
        Vector3::repeat(0.5),
        0.6,
    )]);
    let outs = render_rig(&cloud, &rig, WHITE).unwrap();
    assert_eq!(outs.len(), 6);
    let c = 16 * 33 + 16;
    for i in [2, 4] {
        assert!((outs[i].alpha[c] - outs[0].alpha[c]).abs() < 1e-5);
    }
}

fn weighted_loss(out: &RenderOutput, up: &RenderUpstream) -> f64 {
    out.color.iter().zip(&up.color).map(|(a, b)| a * b).sum::<f64>()
        + out.alpha.iter().zip(&up.alpha).map(|(a, b)| a * b).sum::<f64>()
}

fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.position[k],
        3..=5 => &mut g.scale[k - 3],
        6..=8 => &mut g.color[k - 6],
        9 => &mut g.opacity,
        _ => &mut g.rotation[k - 10],
    }
}

#[test]
fn empty_cloud_backward_is_empty() {
    let pose = center_pose(8);
    let up = RenderUpstream {
        color: vec![1.0 / 192.0; 192],
        alpha: vec![0.0; 64],
    };
    let g = render_backward(&GaussianCloud::default(), &pose, WHITE, &up).unwrap();
    assert!(g.gaussians.is_empty());
}

#[test]
fn single_gaussian_color_gradient_matches_fd() {
    let pose = center_pose(17);
    let cloud = GaussianCloud::new(vec![Gaussian::isotropic(
        Vector3::new(0.05, -0.02, 0.03),
        0.1,
        Vector3::new(0.3, 0.6, 0.2),
        0.7,
    )]);
    let target = [0.9, 0.1, 0.5];
    let c = 8 * 17 + 8;
    let loss = |cl: &GaussianCloud| {
        let out = render(cl, &pose, WHITE).unwrap();
        (0..3).map(|k| (out.color[c * 3 + k] - target[k]).powi(2)).sum::<f64>()
    };
    let out = render(&cloud, &pose, WHITE).unwrap();
    let mut up = RenderUpstream::zeros(17, 17);
    for k in 0..3 {
        up.color[c * 3 + k] = 2.0 * (out.color[c * 3 + k] - target[k]);
    }
    let g = render_backward(&cloud, &pose, WHITE, &up).unwrap();
    for k in 0..3 {
        let h = 1e-4;
        let mut p = cloud.clone();
        p.gaussians[0].color[k] += h;
        let mut m = cloud.clone();
        m.gaussians[0].color[k] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let an = g.gaussians[0].color[k];
        assert!((fd - an).abs() <= 1e-3f64.max(0.02 * fd.abs()), "{k}: {fd} vs {an}");
    }
}

#[test]
fn random_scene_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = random_cloud(&mut rng, 32);
    let pose = random_pose(&mut rng, 32);
    let up = RenderUpstream {
        color: (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        alpha: (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let grads = render_backward(&cloud, &pose, WHITE, &up).unwrap();
    let h = 1e-4;
    let (mut pass, mut total) = (0, 0);
    for i in 0..cloud.len() {
        let an = grads.gaussians[i].to_array();
        for k in 0..14 {
            let mut p = cloud.clone();
            *param_mut(&mut p.gaussians[i], k) += h;
            let mut m = cloud.clone();
            *param_mut(&mut m.gaussians[i], k) -= h;
            let fd = (weighted_loss(&render(&p, &pose, WHITE).unwrap(), &up)
                - weighted_loss(&render(&m, &pose, WHITE).unwrap(), &up))
                / (2.0 * h);
            total += 1;
            if (fd - an[k]).abs() <= 1e-3f64.max(0.02 * fd.abs()) {
                pass += 1;
            } else {
                eprintln!("gaussian {i} param {k}: fd {fd:.6} analytic {:.6}", an[k]);
            }
        }
    }
    assert!(pass as f64 >= 0.95 * total as f64, "{pass}/{total}");
}

#[test]
fn backward_rejects_mismatched_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_cloud(&mut rng, 4);
    let pose = center_pose(8);
    let (_, state) = render_with_state(&cloud, &pose, WHITE).unwrap();
    let up = RenderUpstream::zeros(8, 8);
    assert!(render_backward_with_state(&state, &cloud, &up).is_ok());
    let other = random_cloud(&mut rng, 4);
    assert!(matches!(
        render_backward_with_state(&state, &other, &up),
        Err(Error::Consistency(_))
    ));
    assert!(matches!(
        render_backward_with_state(&state, &cloud, &RenderUpstream::zeros(4, 4)),
        Err(Error::Consistency(_))
    ));
}

#[test]
fn quaternion_gradient_is_tangent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cloud = random_cloud(&mut rng, 8);
    let pose = random_pose(&mut rng, 24);
    let up = RenderUpstream {
        color: (0..24 * 24 * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        alpha: vec![0.0; 24 * 24],
    };
    let g = render_backward(&cloud, &pose, WHITE, &up).unwrap();
    for (gg, gs) in g.gaussians.iter().zip(&cloud.gaussians) {
        assert!(gg.rotation.dot(&gs.rotation).abs() < 1e-9);
    }
}
