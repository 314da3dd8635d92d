//! Cosine noise schedule, per-view forward noising of latent grids and the
//! deterministic DDIM sampler driving a 3D-aware denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::ViewRig;
use crate::codec::{assemble_grid, encode_raw, LatentGrid};
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::image::RgbImage;
use crate::render::{render_rig, RenderOutput};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    /// Cumulative signal fraction, indexed by timestep; entry 0 is clean.
    pub alpha_bar: Vec<f64>,
}

fn cosine_f(t: f64, total: f64) -> f64 {
    let x = ((t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

pub fn cosine_schedule(timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::InvalidSchedule("need at least one timestep".into()));
    }
    let total = timesteps as f64;
    let f0 = cosine_f(0.0, total);
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha_bar.push(1.0);
    for t in 1..=timesteps {
        let raw = cosine_f(t as f64, total) / f0;
        let prev = alpha_bar[t - 1];
        // 1 - ab_t / ab_{t-1} <= MAX_BETA
        alpha_bar.push(raw.max(prev * (1.0 - MAX_BETA)).min(prev));
    }
    Ok(NoiseSchedule { timesteps, alpha_bar })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Uniform integer in `[1, T]`.
    pub fn sample_timestep(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(1..=self.timesteps)
    }

    /// Descending DDIM sub-sequence of length `steps + 1`, from `T` to 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 || steps > self.timesteps {
            return Err(Error::InvalidSchedule(format!(
                "{steps} sampling steps for a {}-step schedule",
                self.timesteps
            )));
        }
        let t = self.timesteps as f64;
        Ok((0..=steps)
            .map(|k| (t * (steps - k) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// Seeded timestep draw.
pub fn sample_timestep(schedule: &NoiseSchedule, seed: u64) -> usize {
    schedule.sample_timestep(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyLatentGrid {
    pub grid: LatentGrid,
    pub t: usize,
    pub epsilon: LatentGrid,
    /// `true` where the view is kept clean.
    pub conditioning_mask: Vec<bool>,
}

impl NoisyLatentGrid {
    fn check_mask(&self) -> Result<()> {
        if self.conditioning_mask.len() != self.grid.views {
            return Err(Error::Shape(format!(
                "conditioning mask has {} entries for {} views",
                self.conditioning_mask.len(),
                self.grid.views
            )));
        }
        Ok(())
    }
}

/// Mask with only view 0 kept clean.
pub fn first_view_mask(views: usize) -> Vec<bool> {
    (0..views).map(|i| i == 0).collect()
}

pub fn add_noise(
    grid: &LatentGrid,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut impl Rng,
    conditioning_mask: &[bool],
) -> Result<NoisyLatentGrid> {
    if t < 1 || t > schedule.timesteps {
        return Err(Error::InvalidSchedule(format!(
            "timestep {t} outside [1, {}]",
            schedule.timesteps
        )));
    }
    if conditioning_mask.len() != grid.views {
        return Err(Error::Shape(format!(
            "conditioning mask has {} entries for {} views",
            conditioning_mask.len(),
            grid.views
        )));
    }
    let mut eps = grid.zeros_like();
    for e in eps.data.iter_mut() {
        *e = rng.sample(StandardNormal);
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut noisy = grid.clone();
    for (z, e) in noisy.data.iter_mut().zip(&eps.data) {
        *z = a * *z + b * e;
    }
    restore_conditioning(&mut noisy, grid, conditioning_mask);
    Ok(NoisyLatentGrid {
        grid: noisy,
        t,
        epsilon: eps,
        conditioning_mask: conditioning_mask.to_vec(),
    })
}

/// Copies the masked views from `clean` into `grid`.
fn restore_conditioning(grid: &mut LatentGrid, clean: &LatentGrid, mask: &[bool]) {
    for (v, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let idx: Vec<usize> = clean.tile_indices(v).collect();
        for i in idx {
            grid.data[i] = clean.data[i];
        }
    }
}

/// Deterministic DDIM update from `z_t.t` to `t_prev` given a clean-latent
/// prediction. Conditioning views keep their current (clean) values.
pub fn ddim_step(
    z_t: &NoisyLatentGrid,
    z0_hat: &LatentGrid,
    schedule: &NoiseSchedule,
    t_prev: usize,
) -> Result<NoisyLatentGrid> {
    let t = z_t.t;
    if t_prev >= t {
        return Err(Error::ScheduleOrder { t, t_prev });
    }
    if t > schedule.timesteps {
        return Err(Error::InvalidSchedule(format!("timestep {t} outside schedule")));
    }
    if !z_t.grid.same_shape(z0_hat) {
        return Err(Error::Shape("prediction grid does not match noisy grid".into()));
    }
    z_t.check_mask()?;
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let mut eps = z0_hat.zeros_like();
    let mut next = z0_hat.zeros_like();
    for i in 0..next.data.len() {
        let e = (z_t.grid.data[i] - ab.sqrt() * z0_hat.data[i]) / (1.0 - ab).sqrt();
        eps.data[i] = e;
        next.data[i] = ab_prev.sqrt() * z0_hat.data[i] + (1.0 - ab_prev).sqrt() * e;
    }
    if t_prev == 0 {
        next.data.copy_from_slice(&z0_hat.data);
    }
    restore_conditioning(&mut next, &z_t.grid, &z_t.conditioning_mask);
    Ok(NoisyLatentGrid {
        grid: next,
        t: t_prev,
        epsilon: eps,
        conditioning_mask: z_t.conditioning_mask.clone(),
    })
}

/// Anything mapping a noisy latent grid on a rig to a Gaussian cloud.
pub trait Denoiser {
    fn denoise(&self, z_t: &NoisyLatentGrid, rig: &ViewRig) -> Result<GaussianCloud>;
}

/// Ignores its input and returns a fixed cloud; with the ground-truth cloud
/// this bounds what the sampler can reach.
pub struct OracleDenoiser(pub GaussianCloud);

impl Denoiser for OracleDenoiser {
    fn denoise(&self, _z_t: &NoisyLatentGrid, _rig: &ViewRig) -> Result<GaussianCloud> {
        Ok(self.0.clone())
    }
}

/// Encodes each render and tiles the latents.
pub fn encode_renders(renders: &[RenderOutput]) -> Result<LatentGrid> {
    let latents = renders
        .iter()
        .map(|r| encode_raw(r.width, r.height, &r.color))
        .collect::<Result<Vec<_>>>()?;
    assemble_grid(&latents)
}

pub struct SampleOutput {
    pub cloud: GaussianCloud,
    pub renders: Vec<RenderOutput>,
    /// Number of denoiser invocations.
    pub invocations: usize,
}

/// Conditional generation from a single image placed at rig view 0.
pub fn sample(
    input: &RgbImage,
    rig: &ViewRig,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    background: [f64; 3],
) -> Result<SampleOutput> {
    sample_with_observer(input, rig, denoiser, schedule, steps, seed, background, |_| {})
}

/// [`sample`] with a hook called on the noisy grid before each denoiser call.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_observer(
    input: &RgbImage,
    rig: &ViewRig,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    background: [f64; 3],
    mut observe: impl FnMut(&NoisyLatentGrid),
) -> Result<SampleOutput> {
    let pose0 = rig.poses.first().ok_or_else(|| Error::InvalidRig("empty rig".into()))?;
    if (input.width, input.height) != (pose0.width, pose0.height) {
        return Err(Error::Shape(format!(
            "input image {}x{} does not match rig resolution {}x{}",
            input.height, input.width, pose0.height, pose0.width
        )));
    }
    let times = schedule.ddim_timesteps(steps)?;
    let cond = encode_raw(input.width, input.height, &input.data)?;
    let clean = assemble_grid(&vec![cond; rig.len()])?;
    let mask = first_view_mask(rig.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = clean.zeros_like();
    for e in noise.data.iter_mut() {
        *e = rng.sample(StandardNormal);
    }
    let mut grid = noise.clone();
    restore_conditioning(&mut grid, &clean, &mask);
    let mut z = NoisyLatentGrid {
        grid,
        t: times[0],
        epsilon: noise,
        conditioning_mask: mask,
    };
    let mut last = None;
    for (k, pair) in times.windows(2).enumerate() {
        observe(&z);
        let cloud = denoiser.denoise(&z, rig)?;
        let renders = render_rig(&cloud, rig, background)?;
        let z0_hat = encode_renders(&renders)?;
        if !z0_hat.same_shape(&z.grid) {
            return Err(Error::Pipeline(format!(
                "denoiser step {k}: re-encoded renders do not match the latent grid"
            )));
        }
        z = ddim_step(&z, &z0_hat, schedule, pair[1])?;
        last = Some((cloud, renders));
    }
    let (cloud, renders) = last.expect("at least one step");
    Ok(SampleOutput {
        cloud,
        renders,
        invocations: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{split_grid, Latent};

    fn random_grid(rng: &mut ChaCha8Rng, views: usize, tw: usize, th: usize) -> LatentGrid {
        let latents: Vec<Latent> = (0..views)
            .map(|_| Latent::new(tw, th, (0..tw * th * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        assemble_grid(&latents).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = cosine_schedule(1000).unwrap();
        assert_eq!(s.alpha_bar.len(), 1001);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) > 0.0);
        for t in 1..=1000 {
            assert!(1.0 - s.alpha_bar(t) / s.alpha_bar(t - 1) <= MAX_BETA + 1e-12);
        }
        assert!(cosine_schedule(0).is_err());
    }

    #[test]
    fn schedule_midpoint_matches_direct_evaluation() {
        let s = cosine_schedule(1000).unwrap();
        let f = |t: f64| {
            (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        };
        assert!((s.alpha_bar(500) - f(500.0) / f(0.0)).abs() < 1e-12);
    }

    #[test]
    fn timestep_draws() {
        let s = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buckets = [0usize; 10];
        let n = 100_000;
        for _ in 0..n {
            let t = s.sample_timestep(&mut rng);
            assert!((1..=1000).contains(&t));
            buckets[(t - 1) / 100] += 1;
        }
        for b in buckets {
            assert!((b as f64 / n as f64 - 0.1).abs() < 0.01);
        }
        assert_eq!(sample_timestep(&s, 9), sample_timestep(&s, 9));
    }

    #[test]
    fn ddim_timesteps_descend_to_zero() {
        let s = cosine_schedule(1000).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 51);
        assert_eq!((ts[0], ts[50]), (1000, 0));
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.ddim_timesteps(1000).unwrap().len(), 1001);
        assert!(s.ddim_timesteps(0).is_err());
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn add_noise_masks_and_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 4, 3, 2);
        let s = cosine_schedule(100_000).unwrap();
        let all = add_noise(&g, &s, 500, &mut rng, &[true; 4]).unwrap();
        assert_eq!(all.grid, g);

        let z = add_noise(&g, &s, 1, &mut rng, &[false; 4]).unwrap();
        let (a, b) = (s.alpha_bar(1).sqrt(), (1.0 - s.alpha_bar(1)).sqrt());
        for i in 0..g.data.len() {
            // |z_t - z_0| <= sqrt(1 - ab) |eps| + (1 - sqrt(ab)) |z_0|
            let bound = b * z.epsilon.data[i].abs() + (1.0 - a) * g.data[i].abs();
            assert!((z.grid.data[i] - g.data[i]).abs() <= bound + 1e-12);
            assert!(b < 1e-3);
        }

        let z = add_noise(&g, &s, 50_000, &mut rng, &first_view_mask(4)).unwrap();
        let tiles = split_grid(&z.grid).unwrap();
        assert_eq!(tiles[0], split_grid(&g).unwrap()[0]);
        assert_ne!(tiles[1], split_grid(&g).unwrap()[1]);
        assert!(add_noise(&g, &s, 0, &mut rng, &[false; 4]).is_err());
        assert!(add_noise(&g, &s, 5, &mut rng, &[false; 3]).is_err());
    }

    #[test]
    fn ddim_inverts_forward_noising() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = cosine_schedule(1000).unwrap();
        let z0 = random_grid(&mut rng, 2, 4, 4);
        let zt = add_noise(&z0, &s, 700, &mut rng, &[false, false]).unwrap();
        let step = ddim_step(&zt, &z0, &s, 300).unwrap();
        let (a, b) = (s.alpha_bar(300).sqrt(), (1.0 - s.alpha_bar(300)).sqrt());
        for i in 0..z0.data.len() {
            assert!((step.epsilon.data[i] - zt.epsilon.data[i]).abs() < 1e-5);
            assert!((step.grid.data[i] - (a * z0.data[i] + b * zt.epsilon.data[i])).abs() < 1e-5);
        }
        assert_eq!(ddim_step(&zt, &z0, &s, 0).unwrap().grid, z0);
        assert!(matches!(ddim_step(&zt, &z0, &s, 700), Err(Error::ScheduleOrder { .. })));
    }

    #[test]
    fn oracle_ddim_recovers_z0() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = cosine_schedule(1000).unwrap();
        let z0 = random_grid(&mut rng, 2, 4, 4);
        for steps in [50, 1000] {
            let mut z = add_noise(&z0, &s, 1000, &mut rng, &[false, false]).unwrap();
            for pair in s.ddim_timesteps(steps).unwrap().windows(2) {
                z = ddim_step(&z, &z0, &s, pair[1]).unwrap();
            }
            for (a, b) in z.grid.data.iter().zip(&z0.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = cosine_schedule(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero = assemble_grid(&vec![Latent::zeros(25, 25); 2]).unwrap();
        for t in [100, 500, 900] {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut n = 0.0;
            // 20 draws of 5000 scalars each.
            for _ in 0..20 {
                let z = add_noise(&zero, &s, t, &mut rng, &[false, false]).unwrap();
                for v in z.grid.data {
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let var = sq / n - (sum / n).powi(2);
            let want = 1.0 - s.alpha_bar(t);
            assert!((var / want - 1.0).abs() < 0.02, "t={t}: {var} vs {want}");
        }
    }

    #[test]
    fn composed_noising_matches_direct_marginal() {
        // z_s then s -> t via the transition kernel, versus z_t directly.
        let s = cosine_schedule(1000).unwrap();
        let (t1, t2) = (200, 600);
        let ratio = s.alpha_bar(t2) / s.alpha_bar(t1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = 0.8;
        let n = 10_000;
        let (mut m, mut q) = (0.0, 0.0);
        for _ in 0..n {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let zs = s.alpha_bar(t1).sqrt() * z0 + (1.0 - s.alpha_bar(t1)).sqrt() * e1;
            let zt = ratio.sqrt() * zs + (1.0 - ratio).sqrt() * e2;
            m += zt;
            q += zt * zt;
        }
        let mean = m / n as f64;
        let var = q / n as f64 - mean * mean;
        let want_mean = s.alpha_bar(t2).sqrt() * z0;
        let want_var = 1.0 - s.alpha_bar(t2);
        assert!((mean - want_mean).abs() < 0.02 * want_mean.abs().max(want_var.sqrt()));
        assert!((var / want_var - 1.0).abs() < 0.02);
    }
}
