//! Image metrics and the evaluation report.
//!
//! PSNR of identical images is `+inf`; it is written as `inf` in reports and
//! left out of aggregate means, which instead report how many views were
//! excluded.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::ViewRig;
use crate::data::ObjectRecord;
use crate::diffusion::{sample, Denoiser, NoiseSchedule, OracleDenoiser};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::render::{render, RenderOutput, WHITE};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Metric(format!(
            "image sizes differ: {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.data.is_empty() {
        return Err(Error::Metric("empty image".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for values in [0, 1].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn ssim_weights() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            w[y * SSIM_WINDOW + x] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean structural similarity over every 8×8 window position and channel,
/// with Gaussian window weights.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_pair(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let w = ssim_weights();
    let (nx, ny) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..3 {
        for oy in 0..ny {
            for ox in 0..nx {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..SSIM_WINDOW {
                    for x in 0..SSIM_WINDOW {
                        let k = w[y * SSIM_WINDOW + x];
                        let i = ((oy + y) * a.width + ox + x) * 3 + c;
                        let (p, q) = (a.data[i], b.data[i]);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (3 * nx * ny) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub object: String,
    /// `rig_NN` for generated rig views, `unseen_NN` for extra poses.
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl ViewScore {
    pub fn is_unseen(&self) -> bool {
        self.view.starts_with("unseen")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    /// Mean over views with finite PSNR; NaN if there are none.
    pub psnr: f64,
    pub ssim: f64,
    pub views: usize,
    pub infinite: usize,
}

pub fn aggregate<'a>(scores: impl IntoIterator<Item = &'a ViewScore>) -> Aggregate {
    let (mut p, mut s, mut n, mut inf) = (0.0, 0.0, 0usize, 0usize);
    for v in scores {
        n += 1;
        s += v.ssim;
        if v.psnr.is_finite() {
            p += v.psnr;
        } else {
            inf += 1;
        }
    }
    Aggregate {
        psnr: if n > inf { p / (n - inf) as f64 } else { f64::NAN },
        ssim: if n > 0 { s / n as f64 } else { f64::NAN },
        views: n,
        infinite: inf,
    }
}

/// Scores for a set of objects, plus enough context to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    /// Single-line description of the model configuration.
    pub config: String,
    pub steps: usize,
    pub seed: u64,
    pub scores: Vec<ViewScore>,
}

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn parse_value(s: &str) -> Option<f64> {
    if s == "inf" {
        Some(f64::INFINITY)
    } else {
        s.parse().ok()
    }
}

impl EvalReport {
    pub fn rig(&self) -> Aggregate {
        aggregate(self.scores.iter().filter(|s| !s.is_unseen()))
    }

    pub fn unseen(&self) -> Aggregate {
        aggregate(self.scores.iter().filter(|s| s.is_unseen()))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# checkpoint\t{}", self.checkpoint).unwrap();
        writeln!(out, "# config\t{}", self.config).unwrap();
        writeln!(out, "# steps\t{}", self.steps).unwrap();
        writeln!(out, "# seed\t{}", self.seed).unwrap();
        out.push_str("object\tview\tpsnr\tssim\n");
        for s in &self.scores {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                s.object,
                s.view,
                fmt_value(s.psnr),
                fmt_value(s.ssim)
            )
            .unwrap();
        }
        for (name, a) in [("rig", self.rig()), ("unseen", self.unseen())] {
            writeln!(
                out,
                "# mean_{name}\tpsnr={}\tssim={}\tviews={}\tinf_psnr_views={}",
                fmt_value(a.psnr),
                fmt_value(a.ssim),
                a.views,
                a.infinite
            )
            .unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format {
            path: "<report>".into(),
            msg: m,
        };
        let mut report = EvalReport {
            checkpoint: String::new(),
            config: String::new(),
            steps: 0,
            seed: 0,
            scores: Vec::new(),
        };
        for line in text.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                ["# checkpoint", v] => report.checkpoint = v.to_string(),
                ["# config", v] => report.config = v.to_string(),
                ["# steps", v] => report.steps = v.parse().map_err(|_| bad(format!("steps: {v}")))?,
                ["# seed", v] => report.seed = v.parse().map_err(|_| bad(format!("seed: {v}")))?,
                ["object", "view", "psnr", "ssim"] => {}
                [c, ..] if c.starts_with('#') => {}
                [object, view, p, s] => report.scores.push(ViewScore {
                    object: object.to_string(),
                    view: view.to_string(),
                    psnr: parse_value(p).ok_or_else(|| bad(format!("psnr: {p}")))?,
                    ssim: parse_value(s).ok_or_else(|| bad(format!("ssim: {s}")))?,
                }),
                _ => return Err(bad(format!("unexpected line: {line}"))),
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

fn score(object: &str, view: String, out: &RenderOutput, target: &RgbImage) -> Result<ViewScore> {
    let img = out.image();
    Ok(ViewScore {
        object: object.to_string(),
        view,
        psnr: psnr(&img, target)?,
        ssim: ssim(&img, target)?,
    })
}

/// Generates from the object's first rig view and scores the other rig views
/// and every stored unseen view against their ground truth.
pub fn evaluate_object(
    denoiser: &dyn Denoiser,
    obj: &ObjectRecord,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<ViewScore>> {
    let rig = ViewRig::from_poses(obj.rig_poses.clone())?;
    let out = sample(&obj.rig_images[0], &rig, denoiser, schedule, steps, seed, WHITE)?;
    let mut scores = Vec::new();
    for (i, (r, t)) in out.renders.iter().zip(&obj.rig_images).enumerate().skip(1) {
        scores.push(score(&obj.id, format!("rig_{i:02}"), r, t)?);
    }
    for (i, (p, t)) in obj.unseen_poses.iter().zip(&obj.unseen_images).enumerate() {
        scores.push(score(
            &obj.id,
            format!("unseen_{i:02}"),
            &render(&out.cloud, p, WHITE)?,
            t,
        )?);
    }
    Ok(scores)
}

/// What generates the Gaussians during evaluation.
pub enum EvalModel<'a> {
    Network(&'a dyn Denoiser),
    /// Each object's own ground-truth cloud.
    Oracle,
}

/// Evaluates every object in order; object `i` is sampled with seed `seed + i`.
pub fn evaluate(
    model: EvalModel,
    objects: &[ObjectRecord],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    checkpoint: &str,
    config: &str,
) -> Result<EvalReport> {
    let mut scores = Vec::new();
    for (i, obj) in objects.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let got = match model {
            EvalModel::Network(d) => evaluate_object(d, obj, schedule, steps, s),
            EvalModel::Oracle => evaluate_object(&OracleDenoiser(obj.cloud.clone()), obj, schedule, steps, s),
        };
        scores.extend(got.map_err(|e| Error::Object {
            object: obj.id.clone(),
            source: Box::new(e),
        })?);
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        config: config.to_string(),
        steps,
        seed,
        scores,
    })
}
