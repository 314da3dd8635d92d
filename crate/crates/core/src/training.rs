//! Training: losses, augmentations, Adam and the single-step training loop
//! that runs the denoiser, splats its Gaussians, and backpropagates both the
//! pixel loss and the latent loss through the renderer into the network.

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::camera::{axis_angle, CameraPose, RayMap};
use crate::codec::{assemble_grid, encode, encode_transpose, split_grid, LatentGrid};
use crate::data::ObjectRecord;
use crate::diffusion::{add_noise, cosine_schedule, encode_renders, first_view_mask, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gaussians::{activate_features_backward, GaussianGrad, DEFAULT_PRUNE_THRESHOLD};
use crate::image::RgbImage;
use crate::render::{render_backward_with_state, render_with_state, RenderOutput, RenderUpstream, WHITE};
use crate::unet::{
    build_cloud, build_input, forward, head_raymaps, latent_raymaps, merge_feature_grads, split_features,
    DenoiserConfig, ParamStore, TapeParams, UNet,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Pixel loss weight.
    pub lambda1: f64,
    /// Perceptual loss weight; no perceptual network is bundled, so it must be 0.
    pub lambda2: f64,
    /// Latent loss weight.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda3 >= 0.0) {
            return Err(Error::Contract("loss weights must be non-negative".into()));
        }
        if self.lambda2 != 0.0 {
            return Err(Error::Contract(
                "lambda2 (perceptual) is not supported and must be 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLoss {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Azimuth and elevation noise, degrees.
    pub orbit_sigma_deg: f64,
    pub radius_sigma: f64,
    /// In-place camera rotation noise, degrees.
    pub roll_sigma_deg: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            orbit_sigma_deg: 1.5,
            radius_sigma: 0.01,
            roll_sigma_deg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear learning-rate ramp over the first steps; 0 disables.
    pub warmup_steps: u64,
    /// Global gradient-norm ceiling; 0 disables.
    pub grad_clip: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub distortion_prob: f64,
    pub distortion_strength: f64,
    pub jitter_prob: f64,
    pub jitter: JitterConfig,
    pub pixel_loss: PixelLoss,
    /// Unseen views supervised per object per step.
    pub unseen_views: usize,
    pub weights: LossWeights,
    pub timesteps: usize,
    pub prune_threshold: f64,
    pub checkpoint_every: u64,
    /// Evaluate on the first training objects every this many steps; 0 disables.
    pub eval_every: u64,
    pub eval_objects: usize,
    pub eval_sampling_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1,
            learning_rate: 2e-4,
            warmup_steps: 200,
            grad_clip: 1.0,
            total_steps: 2000,
            seed: 0,
            distortion_prob: 0.5,
            distortion_strength: 0.02,
            jitter_prob: 0.5,
            jitter: JitterConfig::default(),
            pixel_loss: PixelLoss::L1,
            unseen_views: 2,
            weights: LossWeights::default(),
            timesteps: 1000,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            checkpoint_every: 500,
            eval_every: 0,
            eval_objects: 1,
            eval_sampling_steps: crate::diffusion::DEFAULT_SAMPLING_STEPS,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("train config: {m}")));
        for (name, p) in [
            ("distortion_prob", self.distortion_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return bad("prune_threshold must lie in [0, 1]".into());
        }
        if !(self.distortion_strength >= 0.0) {
            return bad("distortion_strength must be non-negative".into());
        }
        self.weights.validate()?;
        self.denoiser.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Contract(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

fn check_aligned(renders: &[RenderOutput], targets: &[&RgbImage]) -> Result<()> {
    if renders.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} renders for {} targets",
            renders.len(),
            targets.len()
        )));
    }
    for (r, t) in renders.iter().zip(targets) {
        if (r.width, r.height) != (t.width, t.height) {
            return Err(Error::Contract(format!(
                "render {}x{} against target {}x{}",
                r.height, r.width, t.height, t.width
            )));
        }
    }
    Ok(())
}

/// Weighted mean pixel loss over all views, with its gradient per render.
pub fn render_loss_with_grad(
    renders: &[RenderOutput],
    targets: &[&RgbImage],
    weights: &LossWeights,
    kind: PixelLoss,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_aligned(renders, targets)?;
    let n: usize = renders.iter().map(|r| r.color.len()).sum();
    if n == 0 {
        return Ok((0.0, vec![Vec::new(); renders.len()]));
    }
    let k = weights.lambda1 / n as f64;
    let mut total = 0.0;
    let grads = renders
        .iter()
        .zip(targets)
        .map(|(r, t)| {
            r.color
                .iter()
                .zip(&t.data)
                .map(|(&a, &b)| {
                    let d = a - b;
                    match kind {
                        PixelLoss::L1 => {
                            total += d.abs();
                            k * if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        PixelLoss::L2 => {
                            total += d * d;
                            2.0 * k * d
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok((total * k, grads))
}

pub fn render_loss(
    renders: &[RenderOutput],
    targets: &[&RgbImage],
    weights: &LossWeights,
    kind: PixelLoss,
) -> Result<f64> {
    Ok(render_loss_with_grad(renders, targets, weights, kind)?.0)
}

/// Weighted mean squared error over the non-conditioning tiles, with its
/// gradient with respect to `z0_hat`.
pub fn diffusion_loss_with_grad(
    z0_hat: &LatentGrid,
    z0: &LatentGrid,
    conditioning_mask: &[bool],
    weights: &LossWeights,
) -> Result<(f64, LatentGrid)> {
    if !z0_hat.same_shape(z0) {
        return Err(Error::Shape(format!(
            "latent grids {}x{}x{} views and {}x{}x{} views",
            z0_hat.tile_height, z0_hat.tile_width, z0_hat.views, z0.tile_height, z0.tile_width, z0.views
        )));
    }
    if conditioning_mask.len() != z0.views {
        return Err(Error::Shape("conditioning mask length".into()));
    }
    let mut grad = z0.zeros_like();
    let free: Vec<usize> = (0..z0.views).filter(|&v| !conditioning_mask[v]).collect();
    let count = free.len() * z0.data.len() / z0.views;
    if count == 0 {
        return Ok((0.0, grad));
    }
    let k = weights.lambda3 / count as f64;
    let mut total = 0.0;
    for v in free {
        for i in z0.tile_indices(v) {
            let d = z0_hat.data[i] - z0.data[i];
            total += d * d;
            grad.data[i] = 2.0 * k * d;
        }
    }
    Ok((total * k, grad))
}

pub fn diffusion_loss(
    z0_hat: &LatentGrid,
    z0: &LatentGrid,
    conditioning_mask: &[bool],
    weights: &LossWeights,
) -> Result<f64> {
    Ok(diffusion_loss_with_grad(z0_hat, z0, conditioning_mask, weights)?.0)
}

/// Displacement in pixels at every pixel center, interpolated bilinearly from
/// an 8×8 control grid whose points move at most `strength * width`.
pub fn distortion_field(width: usize, height: usize, strength: f64, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    const N: usize = 8;
    let max = strength * width as f64;
    let ctrl: Vec<[f64; 2]> = (0..N * N)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.0..=1.0) * max;
            [r * a.cos(), r * a.sin()]
        })
        .collect();
    let mut field = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = (y as f64 + 0.5) / height as f64 * (N - 1) as f64;
        let (y0, fy) = ((gy.floor() as usize).min(N - 2), 0.0);
        let fy = fy + gy - y0 as f64;
        for x in 0..width {
            let gx = (x as f64 + 0.5) / width as f64 * (N - 1) as f64;
            let x0 = (gx.floor() as usize).min(N - 2);
            let fx = gx - x0 as f64;
            let mut d = [0.0; 2];
            for (cy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                for (cx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                    let c = ctrl[cy * N + cx];
                    d[0] += wx * wy * c[0];
                    d[1] += wx * wy * c[1];
                }
            }
            field.push(d);
        }
    }
    field
}

/// Bilinear resampling at displaced pixel centers, clamped at the border.
pub fn warp(image: &RgbImage, field: &[[f64; 2]]) -> RgbImage {
    let (w, h) = (image.width, image.height);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = field[y * w + x];
            let sx = (x as f64 + d[0]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + d[1]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let mut c = [0.0; 3];
            for (px, py, wgt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                let p = image.pixel(px, py);
                for k in 0..3 {
                    c[k] += wgt * p[k];
                }
            }
            out.set_pixel(x, y, c);
        }
    }
    out
}

/// Warps every view except the first.
pub fn grid_distortion(views: &[RgbImage], strength: f64, rng: &mut impl Rng) -> Vec<RgbImage> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if i == 0 || strength == 0.0 {
                v.clone()
            } else {
                warp(v, &distortion_field(v.width, v.height, strength, rng))
            }
        })
        .collect()
}

/// Perturbs each orbit pose's azimuth, elevation and radius, then rotates the
/// camera slightly about its own center.
pub fn orbital_jitter(poses: &[CameraPose], rng: &mut impl Rng, cfg: &JitterConfig) -> Vec<CameraPose> {
    if cfg.orbit_sigma_deg == 0.0 && cfg.radius_sigma == 0.0 && cfg.roll_sigma_deg == 0.0 {
        return poses.to_vec();
    }
    poses
        .iter()
        .map(|p| {
            let (az, el) = p.azimuth_elevation();
            let az = az + n(rng, cfg.orbit_sigma_deg);
            let el = (el + n(rng, cfg.orbit_sigma_deg)).clamp(-89.0, 89.0);
            let r = (p.origin.norm() + n(rng, cfg.radius_sigma)).max(1e-3);
            let mut q = CameraPose::orbit(az, el, r, p.fov_deg, p.width, p.height);
            let axis = Vector3::new(n(rng, 1.0), n(rng, 1.0), n(rng, 1.0));
            let angle = n(rng, cfg.roll_sigma_deg).to_radians();
            q.rotation *= axis_angle(axis, angle);
            q
        })
        .collect()
}

fn n(rng: &mut impl Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// Adam over a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor<f32>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, (self.eps * bc2.sqrt()) as f32);
        for (((_, p), g), ((_, m), (_, v))) in params
            .entries
            .iter_mut()
            .zip(grads)
            .zip(self.m.entries.iter_mut().zip(self.v.entries.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step * m.data[i] / (v.data[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_render: f64,
    pub l_diff: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub timesteps: Vec<usize>,
}

/// Losses and feature-space gradient for one object, given network output.
pub struct SplatLoss {
    pub l_render: f64,
    pub l_diff: f64,
    pub feature_grad: Tensor<f32>,
    pub renders: Vec<RenderOutput>,
}

/// Everything downstream of the network for one object: activation, pruning,
/// rendering of the supervised views, both losses, and the analytic reverse
/// pass back to the raw feature mosaic.
#[allow(clippy::too_many_arguments)]
pub fn splat_loss(
    features: &Tensor<f32>,
    z0: &LatentGrid,
    head_rays: &[RayMap],
    render_poses: &[CameraPose],
    targets: &[&RgbImage],
    conditioning_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<SplatLoss> {
    let views = z0.views;
    let maps = split_features(z0, features)?;
    let (cloud, kept) = build_cloud(&maps, head_rays, cfg.prune_threshold)?;
    let mut renders = Vec::with_capacity(render_poses.len());
    let mut states = Vec::with_capacity(render_poses.len());
    for p in render_poses {
        let (out, state) = render_with_state(&cloud, p, WHITE)?;
        renders.push(out);
        states.push(state);
    }
    let (l_render, mut up_color) = render_loss_with_grad(&renders, targets, &cfg.weights, cfg.pixel_loss)?;
    let z0_hat = encode_renders(&renders[..views])?;
    let (l_diff, gz) = diffusion_loss_with_grad(&z0_hat, z0, conditioning_mask, &cfg.weights)?;
    for (v, tile) in split_grid(&gz)?.iter().enumerate() {
        for (u, g) in up_color[v].iter_mut().zip(encode_transpose(tile)) {
            *u += g;
        }
    }
    let per_view = maps[0].width * maps[0].height;
    let mut full = vec![GaussianGrad::zero(); per_view * views];
    for ((out, state), color) in renders.iter().zip(&states).zip(up_color) {
        let up = RenderUpstream {
            color,
            alpha: vec![0.0; out.width * out.height],
        };
        let g = render_backward_with_state(state, &cloud, &up)?;
        for (gi, &k) in g.gaussians.iter().zip(&kept) {
            full[k].add_assign(gi);
        }
    }
    let per_view_grads = maps
        .iter()
        .zip(head_rays)
        .enumerate()
        .map(|(v, (m, r))| activate_features_backward(m, r, &full[v * per_view..(v + 1) * per_view]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplatLoss {
        l_render,
        l_diff,
        feature_grad: merge_feature_grads(z0, &per_view_grads),
        renders,
    })
}

/// Network parameters and gradients for one object.
pub struct ObjectStep {
    pub t: usize,
    pub l_render: f64,
    pub l_diff: f64,
    pub grads: Vec<Tensor<f32>>,
}

/// One object's forward and backward pass at timestep `t`.
pub fn object_step(
    net: &UNet,
    obj: &ObjectRecord,
    t: usize,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectStep> {
    let views = obj.rig_poses.len();
    if cfg.unseen_views > obj.unseen_poses.len() {
        return Err(Error::Contract(format!(
            "object {} has {} unseen views, training needs {}",
            obj.id,
            obj.unseen_poses.len(),
            cfg.unseen_views
        )));
    }
    let encoded_views = if rng.random_bool(cfg.distortion_prob) {
        grid_distortion(&obj.rig_images, cfg.distortion_strength, rng)
    } else {
        obj.rig_images.clone()
    };
    let z0 = assemble_grid(&encoded_views.iter().map(encode).collect::<Result<Vec<_>>>()?)?;
    let net_poses = if rng.random_bool(cfg.jitter_prob) {
        orbital_jitter(&obj.rig_poses, rng, &cfg.jitter)
    } else {
        obj.rig_poses.clone()
    };
    let mask = first_view_mask(views);
    let z_t = add_noise(&z0, schedule, t, rng, &mask)?;

    let unseen = sample_indices(rng, obj.unseen_poses.len(), cfg.unseen_views).into_vec();
    let mut render_poses = obj.rig_poses.clone();
    let mut targets: Vec<&RgbImage> = obj.rig_images.iter().collect();
    for &i in &unseen {
        render_poses.push(obj.unseen_poses[i].clone());
        targets.push(&obj.unseen_images[i]);
    }

    let tape = Tape::<f32>::new();
    let params = TapeParams::new(&tape, &net.params, true);
    let input = tape.constant(build_input(&z_t.grid, &latent_raymaps(&net_poses)?)?);
    let features = forward(&net.config, &tape, &params, input, t)?;
    let head_rays = head_raymaps(&net_poses);
    let sl = splat_loss(
        &tape.value(features),
        &z0,
        &head_rays,
        &render_poses,
        &targets,
        &mask,
        cfg,
    )?;
    let total = (sl.l_render + sl.l_diff) as f32;
    let fg = sl.feature_grad;
    let loss = tape.custom(&[features], Tensor::scalar(total), move |g| {
        let k = g.data[0];
        vec![Tensor::new(fg.shape.clone(), fg.data.iter().map(|v| v * k).collect())]
    });
    let grads = tape.backward(loss)?;
    Ok(ObjectStep {
        t,
        l_render: sl.l_render,
        l_diff: sl.l_diff,
        grads: params
            .vars
            .iter()
            .zip(&net.params.entries)
            .map(|(v, (_, p))| grads.get_or_zeros(*v, &p.shape))
            .collect(),
    })
}

/// Mutable training state; everything in it is saved to checkpoints.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: UNet,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    schedule: NoiseSchedule,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.denoiser.clone(), config.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Self::from_parts(config, net, None, 0, rng)
    }

    pub fn from_parts(config: TrainConfig, net: UNet, adam: Option<Adam>, step: u64, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if net.config != config.denoiser {
            return Err(Error::Contract("network config differs from training config".into()));
        }
        let adam = adam.unwrap_or_else(|| {
            Adam::new(
                &net.params,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )
        });
        let schedule = cosine_schedule(config.timesteps)?;
        Ok(Trainer {
            config,
            net,
            adam,
            step,
            rng,
            schedule,
        })
    }

    /// Learning rate used for the update after `step` completed steps.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.learning_rate
        } else {
            self.config.learning_rate * (step + 1) as f64 / w as f64
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// One optimizer step on `batch_size` objects drawn from `objects`.
    pub fn train_step(&mut self, objects: &[ObjectRecord]) -> Result<StepMetrics> {
        if objects.is_empty() {
            return Err(Error::Contract("no training objects".into()));
        }
        let start = Instant::now();
        let b = self.config.batch_size;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let (mut l_render, mut l_diff) = (0.0, 0.0);
        let mut timesteps = Vec::with_capacity(b);
        for _ in 0..b {
            let obj = &objects[self.rng.random_range(0..objects.len())];
            let t = self.schedule.sample_timestep(&mut self.rng);
            let s = object_step(&self.net, obj, t, &self.schedule, &self.config, &mut self.rng)?;
            if !(s.l_render + s.l_diff).is_finite() || s.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    t,
                    seed: self.config.seed,
                    object: obj.id.clone(),
                });
            }
            l_render += s.l_render / b as f64;
            l_diff += s.l_diff / b as f64;
            timesteps.push(t);
            match sum.as_mut() {
                None => sum = Some(s.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&s.grads) {
                        for (x, y) in a.data.iter_mut().zip(&g.data) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("batch is non-empty");
        if b > 1 {
            for g in grads.iter_mut() {
                for v in g.data.iter_mut() {
                    *v /= b as f32;
                }
            }
        }
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            let k = (self.config.grad_clip / grad_norm) as f32;
            grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|v| *v *= k);
        }
        self.adam.lr = self.learning_rate_at(self.step);
        self.adam.step(&mut self.net.params, &grads);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            l_render,
            l_diff,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            timesteps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::rig_with_size;
    use crate::codec::Latent;
    use crate::data::{generate_object, DatasetConfig};

    fn small_train_config() -> TrainConfig {
        TrainConfig {
            denoiser: DenoiserConfig {
                base_channels: 16,
                channel_multipliers: vec![1, 2],
                blocks_per_scale: 1,
                time_embed_dim: 16,
                norm_groups: 8,
                ..Default::default()
            },
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    fn tiny_object(seed: u64) -> ObjectRecord {
        let cfg = DatasetConfig {
            objects: 1,
            views: 2,
            unseen: 2,
            image_size: 32,
            seed,
        };
        generate_object(0, seed, &cfg).unwrap().0
    }

    fn random_render(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RenderOutput {
        RenderOutput {
            width: w,
            height: h,
            color: (0..w * h * 3).map(|_| rng.random()).collect(),
            alpha: vec![1.0; w * h],
            depth: vec![1.0; w * h],
        }
    }

    #[test]
    fn render_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_render(&mut rng, 4, 3);
        let same = RgbImage::from_data(4, 3, r.color.clone()).unwrap();
        let w = LossWeights::default();
        assert_eq!(render_loss(std::slice::from_ref(&r), &[&same], &w, PixelLoss::L1).unwrap(), 0.0);
        let shifted = RgbImage::from_data(4, 3, r.color.iter().map(|v| v - 0.1).collect()).unwrap();
        assert!((render_loss(std::slice::from_ref(&r), &[&shifted], &w, PixelLoss::L1).unwrap() - 0.1).abs() < 1e-12);

        let r2 = random_render(&mut rng, 4, 3);
        let t1 = RgbImage::from_data(4, 3, (0..36).map(|_| rng.random()).collect()).unwrap();
        let t2 = RgbImage::from_data(4, 3, (0..36).map(|_| rng.random()).collect()).unwrap();
        let mut naive = 0.0;
        for (r, t) in [(&r, &t1), (&r2, &t2)] {
            for i in 0..36 {
                naive += (r.color[i] - t.data[i]).abs();
            }
        }
        naive /= 72.0;
        let got = render_loss(&[r.clone(), r2.clone()], &[&t1, &t2], &w, PixelLoss::L1).unwrap();
        assert!((got - naive).abs() < 1e-6);
        assert!(render_loss(std::slice::from_ref(&r), &[&t1, &t2], &w, PixelLoss::L1).is_err());
    }

    #[test]
    fn diffusion_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng| {
            assemble_grid(
                &(0..4)
                    .map(|_| Latent::new(2, 2, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let w = LossWeights::default();
        let mask = first_view_mask(4);
        let a = mk(&mut rng);
        assert_eq!(diffusion_loss(&a, &a, &mask, &w).unwrap(), 0.0);
        let mut off = a.clone();
        off.data.iter_mut().for_each(|v| *v += 0.3);
        assert!((diffusion_loss(&off, &a, &mask, &w).unwrap() - 0.09).abs() < 1e-12);

        let b = mk(&mut rng);
        let mut naive = 0.0;
        let mut n = 0;
        for v in 1..4 {
            for i in a.tile_indices(v) {
                naive += (a.data[i] - b.data[i]).powi(2);
                n += 1;
            }
        }
        assert!((diffusion_loss(&a, &b, &mask, &w).unwrap() - naive / n as f64).abs() < 1e-6);
        // The conditioning tile does not count.
        let mut c = b.clone();
        for i in b.tile_indices(0) {
            c.data[i] += 5.0;
        }
        assert_eq!(
            diffusion_loss(&a, &b, &mask, &w).unwrap(),
            diffusion_loss(&a, &c, &mask, &w).unwrap()
        );
    }

    #[test]
    fn distortion_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let views: Vec<RgbImage> = (0..3)
            .map(|_| RgbImage::from_data(16, 16, (0..768).map(|_| rng.random()).collect()).unwrap())
            .collect();
        assert_eq!(grid_distortion(&views, 0.0, &mut rng), views);
        let out = grid_distortion(&views, 0.05, &mut rng);
        assert_eq!(out[0], views[0]);
        assert_ne!(out[1], views[1]);
        for _ in 0..20 {
            let f = distortion_field(64, 48, 0.02, &mut rng);
            let max = f.iter().map(|d| d[0].hypot(d[1])).fold(0.0, f64::max);
            assert!(max <= 0.02 * 64.0 + 1e-12);
        }
        let zero = vec![[0.0; 2]; 256];
        assert_eq!(warp(&views[1], &zero), views[1]);
    }

    #[test]
    fn jitter_properties() {
        let rig = rig_with_size(6, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero = JitterConfig {
            orbit_sigma_deg: 0.0,
            radius_sigma: 0.0,
            roll_sigma_deg: 0.0,
        };
        assert_eq!(orbital_jitter(&rig.poses, &mut rng, &zero), rig.poses);
        let j = orbital_jitter(&rig.poses, &mut rng, &JitterConfig::default());
        for p in &j {
            let r = p.rotation;
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
        let n = 10_000;
        let mut mean = 0.0;
        for _ in 0..n {
            mean += orbital_jitter(&rig.poses[..1], &mut rng, &JitterConfig::default())[0]
                .azimuth_elevation()
                .0;
        }
        assert!((mean / n as f64 - 30.0).abs() < 0.1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let net = UNet::new(small_train_config().denoiser, 0).unwrap();
        let mut p = net.params.clone();
        let mut adam = Adam::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        let zeros: Vec<Tensor<f32>> = p.entries.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        adam.step(&mut p, &zeros);
        assert_eq!(p, net.params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let net = UNet::new(small_train_config().denoiser, 0).unwrap();
        let mut p = net.params.clone();
        let mut adam = Adam::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        let grads: Vec<Tensor<f32>> = p.entries.iter().map(|(_, t)| Tensor::full(&t.shape, 0.5)).collect();
        adam.step(&mut p, &grads);
        let (_, a) = &p.entries[0];
        let (_, b) = &net.params.entries[0];
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(((y - x) - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut cfg = small_train_config();
        cfg.weights = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let obj = tiny_object(5);
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.net.params.clone();
        let m = tr.train_step(std::slice::from_ref(&obj)).unwrap();
        assert_eq!(m.grad_norm, 0.0);
        assert_eq!(tr.net.params, before);
    }

    #[test]
    fn both_loss_paths_carry_gradient() {
        let obj = tiny_object(6);
        for (l1, l3) in [(1.0, 0.0), (0.0, 1.0)] {
            let mut cfg = small_train_config();
            cfg.weights.lambda1 = l1;
            cfg.weights.lambda3 = l3;
            let mut tr = Trainer::new(cfg).unwrap();
            // Move off the zero head so gradients reach the whole network.
            tr.train_step(std::slice::from_ref(&obj)).unwrap();
            let m = tr.train_step(std::slice::from_ref(&obj)).unwrap();
            assert!(m.grad_norm > 0.0, "lambda1={l1} lambda3={l3}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let obj = tiny_object(7);
        let run = || {
            let mut tr = Trainer::new(small_train_config()).unwrap();
            let losses: Vec<(f64, f64)> = (0..3)
                .map(|_| {
                    let m = tr.train_step(std::slice::from_ref(&obj)).unwrap();
                    (m.l_render, m.l_diff)
                })
                .collect();
            (losses, tr.net.params)
        };
        assert_eq!(run(), run());
    }

    /// Finite-difference probe of the full splat path: network output features
    /// to total loss.
    #[test]
    fn splat_loss_gradient_matches_fd() {
        let obj = tiny_object(8);
        let cfg = TrainConfig {
            distortion_prob: 0.0,
            jitter_prob: 0.0,
            pixel_loss: PixelLoss::L2,
            ..small_train_config()
        };
        let z0 = assemble_grid(&obj.rig_images.iter().map(|i| encode(i).unwrap()).collect::<Vec<_>>()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (z0.width() * 4, z0.height() * 4);
        // Small, mostly transparent Gaussians near the object depth.
        let mut feats = Tensor::<f32>::zeros(&[14, h, w]);
        for c in 0..14 {
            for i in 0..w * h {
                feats.data[c * w * h + i] = match c {
                    0 => rng.random_range(-0.3..0.3),
                    3..=5 => rng.random_range(-3.5..-2.5),
                    9 => rng.random_range(-2.0..0.0),
                    _ => rng.random_range(-0.5..0.5),
                };
            }
        }
        let rays = head_raymaps(&obj.rig_poses);
        let mut poses = obj.rig_poses.clone();
        poses.extend(obj.unseen_poses.clone());
        let targets: Vec<&RgbImage> = obj.rig_images.iter().chain(&obj.unseen_images).collect();
        let mask = first_view_mask(2);
        let eval = |f: &Tensor<f32>| {
            let s = splat_loss(f, &z0, &rays, &poses, &targets, &mask, &cfg).unwrap();
            s.l_render + s.l_diff
        };
        let base = splat_loss(&feats, &z0, &rays, &poses, &targets, &mask, &cfg).unwrap();
        let (mut pass, mut total) = (0, 0);
        for _ in 0..60 {
            let i = rng.random_range(0..feats.len());
            let step = 1e-2f32;
            let mut p = feats.clone();
            p.data[i] += step;
            let mut m = feats.clone();
            m.data[i] -= step;
            let fd = (eval(&p) - eval(&m)) / (2.0 * step as f64);
            let an = base.feature_grad.data[i] as f64;
            total += 1;
            if (fd - an).abs() <= 1e-5f64.max(0.05 * fd.abs()) {
                pass += 1;
            }
        }
        assert!(pass as f64 >= 0.9 * total as f64, "{pass}/{total}");
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("distortion_prob = 1.5").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let c = TrainConfig::from_toml("total_steps = 7\n[weights]\nlambda1 = 0.5").unwrap();
        assert_eq!((c.total_steps, c.weights.lambda1, c.weights.lambda3), (7, 0.5, 1.0));
    }
}
