//! Compact time-conditioned U-Net over the latent mosaic with a 4× upsampling
//! Gaussian head, and the composed denoising step (network, Gaussians,
//! rendering, re-encoding).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::camera::{downsample_raymap, plucker_map, plucker_map_at, CameraPose, RayMap, ViewRig};
use crate::codec::{LatentGrid, LATENT_CHANNELS, LATENT_FACTOR};
use crate::diffusion::{encode_renders, Denoiser, NoisyLatentGrid};
use crate::error::{Error, Result};
use crate::gaussians::{
    activate_features, prune_with_indices, GaussianCloud, GaussianFeatureMap, DEFAULT_PRUNE_THRESHOLD,
    FEATURE_CHANNELS, LOG_SCALE_MAX, LOG_SCALE_MIN,
};
use crate::render::{render_rig, RenderOutput};

pub const RAYMAP_CHANNELS: usize = 6;
pub const INPUT_CHANNELS: usize = LATENT_CHANNELS + RAYMAP_CHANNELS;
/// Head output resolution relative to the latent grid.
pub const HEAD_UPSAMPLE: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_scale: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    /// Initial bias of the three log-scale head channels; the rest of the
    /// head starts at zero. 0 makes every initial Gaussian unit-sized.
    pub head_log_scale_init: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_scale: 2,
            time_embed_dim: 128,
            norm_groups: 8,
            head_log_scale_init: -4.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("denoiser config: {m}")));
        if self.channel_multipliers.is_empty() {
            return bad("channel_multipliers is empty");
        }
        if self.channel_multipliers.windows(2).any(|w| w[1] <= w[0]) || self.channel_multipliers[0] == 0 {
            return bad("channel_multipliers must be positive and increasing");
        }
        if self.blocks_per_scale == 0 || self.base_channels == 0 {
            return bad("blocks_per_scale and base_channels must be positive");
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be positive and even");
        }
        if self.norm_groups == 0 || self.channels().iter().any(|c| c % self.norm_groups != 0) {
            return bad("every level's channel count must be divisible by norm_groups");
        }
        if self.head_channels() == 0 {
            return bad("base_channels too small for the head");
        }
        if !(LOG_SCALE_MIN..=LOG_SCALE_MAX).contains(&self.head_log_scale_init) {
            return bad("head_log_scale_init outside the log-scale clamp range");
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    /// Width of the last hidden head layer.
    pub fn head_channels(&self) -> usize {
        self.base_channels / 2
    }

    /// Spatial divisibility required of the latent mosaic.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    One,
    /// Normal with standard deviation `1/sqrt(fan_in)` scaled by the factor.
    Fan(usize, f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_specs(out: &mut Vec<Spec>, name: &str, co: usize, ci: usize, k: usize, init_scale: f64) {
    let init = if init_scale == 0.0 {
        Init::Zero
    } else {
        Init::Fan(ci * k * k, init_scale)
    };
    out.push(Spec {
        name: format!("{name}.w"),
        shape: vec![co, ci, k, k],
        init,
    });
    out.push(Spec {
        name: format!("{name}.b"),
        shape: vec![co],
        init: Init::Zero,
    });
}

fn linear_specs(out: &mut Vec<Spec>, name: &str, fan_in: usize, fan_out: usize) {
    out.push(Spec {
        name: format!("{name}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::Fan(fan_in, 1.0),
    });
    out.push(Spec {
        name: format!("{name}.b"),
        shape: vec![fan_out],
        init: Init::Zero,
    });
}

fn norm_specs(out: &mut Vec<Spec>, name: &str, c: usize) {
    out.push(Spec {
        name: format!("{name}.g"),
        shape: vec![c],
        init: Init::One,
    });
    out.push(Spec {
        name: format!("{name}.b"),
        shape: vec![c],
        init: Init::Zero,
    });
}

fn resblock_specs(out: &mut Vec<Spec>, name: &str, ci: usize, co: usize, temb: usize) {
    norm_specs(out, &format!("{name}.norm1"), ci);
    conv_specs(out, &format!("{name}.conv1"), co, ci, 3, 1.0);
    linear_specs(out, &format!("{name}.temb"), temb, co);
    norm_specs(out, &format!("{name}.norm2"), co);
    conv_specs(out, &format!("{name}.conv2"), co, co, 3, 0.5);
    if ci != co {
        conv_specs(out, &format!("{name}.skip"), co, ci, 1, 1.0);
    }
}

/// Ordered list of every trainable tensor.
fn specs(cfg: &DenoiserConfig) -> Vec<Spec> {
    let mut s = Vec::new();
    let e = cfg.time_embed_dim;
    let ch = cfg.channels();
    linear_specs(&mut s, "time.lin1", e, e);
    linear_specs(&mut s, "time.lin2", e, e);
    conv_specs(&mut s, "in", ch[0], INPUT_CHANNELS, 3, 1.0);
    let mut c = ch[0];
    for (l, &cl) in ch.iter().enumerate() {
        for b in 0..cfg.blocks_per_scale {
            resblock_specs(&mut s, &format!("down.{l}.{b}"), c, cl, e);
            c = cl;
        }
        if l + 1 < ch.len() {
            conv_specs(&mut s, &format!("down.{l}.down"), cl, cl, 3, 1.0);
        }
    }
    for l in (0..ch.len() - 1).rev() {
        conv_specs(&mut s, &format!("up.{l}.up"), ch[l], c, 3, 1.0);
        c = ch[l];
        for b in 0..cfg.blocks_per_scale {
            let ci = if b == 0 { 2 * ch[l] } else { ch[l] };
            resblock_specs(&mut s, &format!("up.{l}.{b}"), ci, ch[l], e);
        }
    }
    norm_specs(&mut s, "head.norm", c);
    conv_specs(&mut s, "head.up1", ch[0], c, 3, 1.0);
    conv_specs(&mut s, "head.up2", cfg.head_channels(), ch[0], 3, 1.0);
    conv_specs(&mut s, "head.out", FEATURE_CHANNELS, cfg.head_channels(), 3, 0.0);
    s
}

/// Named single-precision tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl ParamStore {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = specs(cfg)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zero => vec![0.0; n],
                    Init::One => vec![1.0; n],
                    Init::Fan(fan, k) => {
                        let d = Normal::new(0.0, k / (fan as f64).sqrt()).expect("valid std");
                        (0..n).map(|_| d.sample(&mut rng) as f32).collect()
                    }
                };
                (s.name, Tensor::new(s.shape, data))
            })
            .collect();
        let mut store = ParamStore { entries };
        let bias = store.get_mut("head.out.b").expect("head bias exists");
        bias.data[3..6].fill(cfg.head_log_scale_init as f32);
        Ok(store)
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn matches(&self, cfg: &DenoiserConfig) -> bool {
        let s = specs(cfg);
        s.len() == self.entries.len()
            && s.iter()
                .zip(&self.entries)
                .all(|(a, (n, t))| &a.name == n && a.shape == t.shape)
    }
}

pub fn parameter_count(cfg: &DenoiserConfig) -> usize {
    specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Parameters placed on a tape, addressable by name.
pub struct TapeParams {
    pub vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl TapeParams {
    /// `trainable = false` registers constants (inference).
    pub fn new<T: Real>(tape: &Tape<T>, params: &ParamStore, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(params.entries.len());
        let mut by_name = HashMap::new();
        for (name, t) in &params.entries {
            let t = t.cast::<T>();
            let v = if trainable { tape.param(t) } else { tape.constant(t) };
            vars.push(v);
            by_name.insert(name.clone(), v);
        }
        TapeParams { vars, by_name }
    }

    fn get(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

fn conv<T: Real>(tape: &Tape<T>, p: &TapeParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"));
    let k = tape.shape(w)[2];
    let y = tape.conv2d(x, w, stride, k / 2)?;
    tape.add_channel_bias(y, p.get(&format!("{name}.b")))
}

fn norm_act<T: Real>(tape: &Tape<T>, p: &TapeParams, name: &str, x: Var, groups: usize) -> Result<Var> {
    let y = tape.group_norm(
        x,
        p.get(&format!("{name}.g")),
        p.get(&format!("{name}.b")),
        groups,
        NORM_EPS,
    )?;
    Ok(tape.silu(y))
}

fn linear<T: Real>(tape: &Tape<T>, p: &TapeParams, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w")))?;
    let b = p.get(&format!("{name}.b"));
    let n = tape.shape(b)[0];
    let b = tape.reshape(b, &[1, n])?;
    tape.add(y, b)
}

fn resblock<T: Real>(tape: &Tape<T>, p: &TapeParams, name: &str, x: Var, temb: Var, groups: usize) -> Result<Var> {
    let h = norm_act(tape, p, &format!("{name}.norm1"), x, groups)?;
    let h = conv(tape, p, &format!("{name}.conv1"), h, 1)?;
    let tb = linear(tape, p, &format!("{name}.temb"), temb)?;
    let co = tape.shape(tb)[1];
    let tb = tape.reshape(tb, &[co])?;
    let h = tape.add_channel_bias(h, tb)?;
    let h = norm_act(tape, p, &format!("{name}.norm2"), h, groups)?;
    let h = conv(tape, p, &format!("{name}.conv2"), h, 1)?;
    let skip = if p.by_name.contains_key(&format!("{name}.skip.w")) {
        conv(tape, p, &format!("{name}.skip"), x, 1)?
    } else {
        x
    };
    tape.add(h, skip)
}

/// Sinusoidal features of the timestep: `[sin(t f_i), cos(t f_i)]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Network forward on a `[INPUT_CHANNELS, H, W]` input; returns the raw
/// `[14, 4H, 4W]` feature mosaic.
pub fn forward<T: Real>(cfg: &DenoiserConfig, tape: &Tape<T>, p: &TapeParams, input: Var, t: usize) -> Result<Var> {
    let shape = tape.shape(input);
    let m = cfg.spatial_multiple();
    if shape.len() != 3 || shape[0] != INPUT_CHANNELS || !shape[1].is_multiple_of(m) || !shape[2].is_multiple_of(m) {
        return Err(Error::Shape(format!(
            "U-Net input {shape:?}: expected [{INPUT_CHANNELS}, H, W] with H, W divisible by {m}"
        )));
    }
    let g = cfg.norm_groups;
    let e = cfg.time_embed_dim;
    let emb: Vec<T> = timestep_embedding(t, e).into_iter().map(T::from_f).collect();
    let emb = tape.constant(Tensor::new(vec![1, e], emb));
    let temb = linear(tape, p, "time.lin1", emb)?;
    let temb = tape.silu(temb);
    let temb = linear(tape, p, "time.lin2", temb)?;
    let temb = tape.silu(temb);

    let levels = cfg.channel_multipliers.len();
    let mut h = conv(tape, p, "in", input, 1)?;
    let mut skips = Vec::new();
    for l in 0..levels {
        for b in 0..cfg.blocks_per_scale {
            h = resblock(tape, p, &format!("down.{l}.{b}"), h, temb, g)?;
        }
        if l + 1 < levels {
            skips.push(h);
            h = conv(tape, p, &format!("down.{l}.down"), h, 2)?;
        }
    }
    for l in (0..levels - 1).rev() {
        h = tape.upsample_nearest(h, 2)?;
        h = conv(tape, p, &format!("up.{l}.up"), h, 1)?;
        h = tape.concat_channels(&[h, skips[l]])?;
        for b in 0..cfg.blocks_per_scale {
            h = resblock(tape, p, &format!("up.{l}.{b}"), h, temb, g)?;
        }
    }
    h = norm_act(tape, p, "head.norm", h, g)?;
    h = tape.upsample_nearest(h, 2)?;
    h = conv(tape, p, "head.up1", h, 1)?;
    h = tape.silu(h);
    h = tape.upsample_nearest(h, 2)?;
    h = conv(tape, p, "head.up2", h, 1)?;
    h = tape.silu(h);
    conv(tape, p, "head.out", h, 1)
}

/// Per-view ray maps at latent resolution, for the network input.
pub fn latent_raymaps(poses: &[CameraPose]) -> Result<Vec<RayMap>> {
    poses
        .iter()
        .map(|p| downsample_raymap(&plucker_map(p), LATENT_FACTOR))
        .collect()
}

/// Per-view ray maps at head resolution, for placing Gaussians.
pub fn head_raymaps(poses: &[CameraPose]) -> Vec<RayMap> {
    poses
        .iter()
        .map(|p| {
            let (w, h) = (
                p.width / LATENT_FACTOR * HEAD_UPSAMPLE,
                p.height / LATENT_FACTOR * HEAD_UPSAMPLE,
            );
            plucker_map_at(p, w, h)
        })
        .collect()
}

/// `[10, H, W]` network input: latent channels followed by the ray mosaic.
pub fn build_input(grid: &LatentGrid, rays: &[RayMap]) -> Result<Tensor<f32>> {
    if rays.len() != grid.views {
        return Err(Error::Shape(format!(
            "{} ray maps for {} views",
            rays.len(),
            grid.views
        )));
    }
    if rays
        .iter()
        .any(|r| r.width != grid.tile_width || r.height != grid.tile_height)
    {
        return Err(Error::Shape(format!(
            "ray maps must be {}x{} to match the latent tiles",
            grid.tile_height, grid.tile_width
        )));
    }
    let (w, h) = (grid.width(), grid.height());
    let mut data = grid.to_chw();
    data.resize(INPUT_CHANNELS * w * h, 0.0);
    for (v, r) in rays.iter().enumerate() {
        let (x0, y0) = grid.tile_origin(v);
        for y in 0..r.height {
            for x in 0..r.width {
                let px = &r.data[(y * r.width + x) * 6..][..6];
                for (c, &val) in px.iter().enumerate() {
                    data[((LATENT_CHANNELS + c) * h + y0 + y) * w + x0 + x] = val as f32;
                }
            }
        }
    }
    Ok(Tensor::new(vec![INPUT_CHANNELS, h, w], data))
}

/// Splits the `[14, 4H, 4W]` output mosaic into per-view HWC feature maps.
pub fn split_features(grid: &LatentGrid, features: &Tensor<f32>) -> Result<Vec<GaussianFeatureMap>> {
    let (w, h) = (grid.width() * HEAD_UPSAMPLE, grid.height() * HEAD_UPSAMPLE);
    if features.shape != [FEATURE_CHANNELS, h, w] {
        return Err(Error::Shape(format!(
            "feature mosaic {:?}, expected [{FEATURE_CHANNELS}, {h}, {w}]",
            features.shape
        )));
    }
    let (tw, th) = (grid.tile_width * HEAD_UPSAMPLE, grid.tile_height * HEAD_UPSAMPLE);
    (0..grid.views)
        .map(|v| {
            let (x0, y0) = grid.tile_origin(v);
            let (x0, y0) = (x0 * HEAD_UPSAMPLE, y0 * HEAD_UPSAMPLE);
            let mut data = vec![0.0f32; tw * th * FEATURE_CHANNELS];
            for y in 0..th {
                for x in 0..tw {
                    for c in 0..FEATURE_CHANNELS {
                        data[(y * tw + x) * FEATURE_CHANNELS + c] = features.data[(c * h + y0 + y) * w + x0 + x];
                    }
                }
            }
            GaussianFeatureMap::new(tw, th, data)
        })
        .collect()
}

/// Inverse layout of [`split_features`] for per-view HWC gradients.
pub fn merge_feature_grads(grid: &LatentGrid, per_view: &[Vec<f64>]) -> Tensor<f32> {
    let (w, h) = (grid.width() * HEAD_UPSAMPLE, grid.height() * HEAD_UPSAMPLE);
    let (tw, th) = (grid.tile_width * HEAD_UPSAMPLE, grid.tile_height * HEAD_UPSAMPLE);
    let mut data = vec![0.0f32; FEATURE_CHANNELS * h * w];
    for (v, g) in per_view.iter().enumerate() {
        let (x0, y0) = grid.tile_origin(v);
        let (x0, y0) = (x0 * HEAD_UPSAMPLE, y0 * HEAD_UPSAMPLE);
        for y in 0..th {
            for x in 0..tw {
                for c in 0..FEATURE_CHANNELS {
                    data[(c * h + y0 + y) * w + x0 + x] = g[(y * tw + x) * FEATURE_CHANNELS + c] as f32;
                }
            }
        }
    }
    Tensor::new(vec![FEATURE_CHANNELS, h, w], data)
}

/// Activates every view's features on its rays and merges them.
/// Returns the pruned cloud and, for each survivor, its index in the unpruned
/// concatenation.
pub fn build_cloud(
    maps: &[GaussianFeatureMap],
    rays: &[RayMap],
    threshold: f64,
) -> Result<(GaussianCloud, Vec<usize>)> {
    if maps.len() != rays.len() {
        return Err(Error::Shape(format!(
            "{} feature maps for {} ray maps",
            maps.len(),
            rays.len()
        )));
    }
    let mut parts = Vec::with_capacity(maps.len());
    for (v, (m, r)) in maps.iter().zip(rays).enumerate() {
        let g = activate_features(m, r)?;
        let n = g.len();
        parts.push(GaussianCloud {
            gaussians: g,
            source_view_index: Some(vec![v as u32; n]),
        });
    }
    Ok(prune_with_indices(&GaussianCloud::merge(parts), threshold))
}

/// Trained network with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

pub struct StepOutput {
    pub grid: LatentGrid,
    pub cloud: GaussianCloud,
    pub renders: Vec<RenderOutput>,
}

impl UNet {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(UNet { config, params })
    }

    /// Inference-only forward producing per-view raw feature maps.
    pub fn predict_features(&self, z: &NoisyLatentGrid, poses: &[CameraPose]) -> Result<Vec<GaussianFeatureMap>> {
        let tape = Tape::<f32>::new().with_finite_checks(false);
        let p = TapeParams::new(&tape, &self.params, false);
        let input = tape.constant(build_input(&z.grid, &latent_raymaps(poses)?)?);
        let out = forward(&self.config, &tape, &p, input, z.t)?;
        let features = tape.value(out);
        split_features(&z.grid, &features)
    }

    /// Network, Gaussians, renders of the rig and their re-encoding.
    pub fn denoise_step_s(&self, z: &NoisyLatentGrid, rig: &ViewRig, background: [f64; 3]) -> Result<StepOutput> {
        let cloud = self.denoise(z, rig)?;
        let renders = render_rig(&cloud, rig, background)?;
        let grid = encode_renders(&renders)?;
        Ok(StepOutput { grid, cloud, renders })
    }
}

impl Denoiser for UNet {
    fn denoise(&self, z: &NoisyLatentGrid, rig: &ViewRig) -> Result<GaussianCloud> {
        if rig.len() != z.grid.views {
            return Err(Error::Pipeline(format!(
                "rig has {} views, grid has {}",
                rig.len(),
                z.grid.views
            )));
        }
        let maps = self.predict_features(z, &rig.poses)?;
        Ok(build_cloud(&maps, &head_raymaps(&rig.poses), DEFAULT_PRUNE_THRESHOLD)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::rig_with_size;
    use crate::codec::{assemble_grid, split_grid, Latent};
    use crate::diffusion::{add_noise, cosine_schedule, first_view_mask};
    use crate::render::WHITE;
    use rand::Rng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            blocks_per_scale: 1,
            time_embed_dim: 16,
            norm_groups: 8,
            head_log_scale_init: 0.0,
        }
    }

    fn noisy(rng: &mut ChaCha8Rng, views: usize, tile: usize) -> NoisyLatentGrid {
        let latents: Vec<Latent> = (0..views)
            .map(|_| {
                Latent::new(
                    tile,
                    tile,
                    (0..tile * tile * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let g = assemble_grid(&latents).unwrap();
        let s = cosine_schedule(1000).unwrap();
        add_noise(&g, &s, 400, rng, &first_view_mask(views)).unwrap()
    }

    /// Independent closed-form count for the default topology family.
    fn closed_form_count(cfg: &DenoiserConfig) -> usize {
        let e = cfg.time_embed_dim;
        let ch = cfg.channels();
        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let res = |ci: usize, co: usize| {
            2 * ci
                + conv(co, ci, 3)
                + e * co
                + co
                + 2 * co
                + conv(co, co, 3)
                + if ci != co { conv(co, ci, 1) } else { 0 }
        };
        let mut n = 2 * (e * e + e) + conv(ch[0], 10, 3);
        let mut c = ch[0];
        for (l, &cl) in ch.iter().enumerate() {
            for _ in 0..cfg.blocks_per_scale {
                n += res(c, cl);
                c = cl;
            }
            if l + 1 < ch.len() {
                n += conv(cl, cl, 3);
            }
        }
        for l in (0..ch.len() - 1).rev() {
            n += conv(ch[l], c, 3);
            c = ch[l];
            n += res(2 * c, c) + (cfg.blocks_per_scale - 1) * res(c, c);
        }
        let hc = cfg.base_channels / 2;
        n + 2 * c + conv(ch[0], c, 3) + conv(hc, ch[0], 3) + conv(14, hc, 3)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [DenoiserConfig::default(), small_config()] {
            assert_eq!(parameter_count(&cfg), closed_form_count(&cfg));
            assert_eq!(ParamStore::init(&cfg, 0).unwrap().count(), parameter_count(&cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let mut c = DenoiserConfig::default();
        c.channel_multipliers = vec![];
        assert!(c.validate().is_err());
        c.channel_multipliers = vec![2, 1];
        assert!(c.validate().is_err());
        c.channel_multipliers = vec![1, 2];
        c.base_channels = 12;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_head_gives_neutral_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::new(small_config(), 3).unwrap();
        let z = noisy(&mut rng, 2, 4);
        let rig = rig_with_size(2, 32, 32).unwrap();
        let maps = net.predict_features(&z, &rig.poses).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!((maps[0].width, maps[0].height), (16, 16));
        assert!(maps.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        let cloud = net.denoise(&z, &rig).unwrap();
        assert_eq!(cloud.len(), 2 * 16 * 16);
        for g in &cloud.gaussians {
            assert_eq!(g.opacity, 0.5);
            assert_eq!(g.scale, nalgebra::Vector3::repeat(1.0));
        }
    }

    #[test]
    fn head_scale_bias_sets_initial_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DenoiserConfig {
            head_log_scale_init: DenoiserConfig::default().head_log_scale_init,
            ..small_config()
        };
        let net = UNet::new(cfg, 3).unwrap();
        let z = noisy(&mut rng, 2, 4);
        let rig = rig_with_size(2, 32, 32).unwrap();
        let s = (-4.0f32 as f64).exp();
        for g in &net.denoise(&z, &rig).unwrap().gaussians {
            assert_eq!(g.opacity, 0.5);
            assert_eq!(g.color, nalgebra::Vector3::repeat(0.5));
            assert_eq!(g.scale, nalgebra::Vector3::repeat(s));
        }
        let mut bad = small_config();
        bad.head_log_scale_init = 3.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_dims_for_256_views() {
        // 256x256 images give 32x32 latents and 128x128 feature maps per view.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = noisy(&mut rng, 6, 32);
        let rig = rig_with_size(6, 256, 256).unwrap();
        let input = build_input(&z.grid, &latent_raymaps(&rig.poses).unwrap()).unwrap();
        assert_eq!(input.shape, vec![10, 64, 96]);
        let feats = Tensor::<f32>::zeros(&[14, 256, 384]);
        let maps = split_features(&z.grid, &feats).unwrap();
        assert_eq!(maps.len(), 6);
        assert!(maps.iter().all(|m| (m.width, m.height) == (128, 128)));
        let rays = head_raymaps(&rig.poses);
        assert_eq!(build_cloud(&maps, &rays, 0.0).unwrap().0.len(), 98_304);
    }

    #[test]
    fn feature_layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = noisy(&mut rng, 4, 2);
        let feats = Tensor::new(
            vec![14, 16, 16],
            (0..14 * 256).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        );
        let maps = split_features(&z.grid, &feats).unwrap();
        let per_view: Vec<Vec<f64>> = maps
            .iter()
            .map(|m| m.data.iter().map(|&v| v as f64).collect())
            .collect();
        assert_eq!(merge_feature_grads(&z.grid, &per_view), feats);
    }

    #[test]
    fn forward_is_deterministic_and_position_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = UNet::new(small_config(), 5).unwrap();
        // Give the head weights so outputs depend on the input.
        for (name, t) in net.params.entries.iter_mut() {
            if name.starts_with("head.out") {
                *t = Tensor::new(
                    t.shape.clone(),
                    (0..t.len()).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
                );
            }
        }
        let rig = rig_with_size(2, 32, 32).unwrap();
        let z = noisy(&mut rng, 2, 4);
        let a = net.predict_features(&z, &rig.poses).unwrap();
        assert_eq!(a, net.predict_features(&z, &rig.poses).unwrap());

        // Swap views and rays, then swap outputs back.
        let mut tiles = split_grid(&z.grid).unwrap();
        tiles.swap(0, 1);
        let zs = NoisyLatentGrid {
            grid: assemble_grid(&tiles).unwrap(),
            ..z.clone()
        };
        let poses = vec![rig.poses[1].clone(), rig.poses[0].clone()];
        let mut b = net.predict_features(&zs, &poses).unwrap();
        b.swap(0, 1);
        let diff = a[0]
            .data
            .iter()
            .zip(&b[0].data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 1e-5);
    }

    #[test]
    fn denoise_step_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = UNet::new(small_config(), 7).unwrap();
        let rig = rig_with_size(2, 32, 32).unwrap();
        let z = noisy(&mut rng, 2, 4);
        let out = net.denoise_step_s(&z, &rig, WHITE).unwrap();
        assert!(out.grid.same_shape(&z.grid));
        let tiles = split_grid(&out.grid).unwrap();
        for (r, tile) in out.renders.iter().zip(&tiles) {
            assert_eq!(&crate::codec::encode_raw(r.width, r.height, &r.color).unwrap(), tile);
        }
    }

    #[test]
    fn mosaic_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = noisy(&mut rng, 2, 4);
        let rig = rig_with_size(2, 64, 64).unwrap();
        assert!(matches!(
            build_input(&z.grid, &latent_raymaps(&rig.poses).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(3, 8);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[4] - 3f64.cos()).abs() < 1e-15);
    }
}
