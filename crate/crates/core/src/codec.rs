//! Fixed orthonormal linear codec: each 8×8×3 patch is projected onto four
//! low-frequency luma/chroma basis vectors, centered on mid-gray.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Spatial downsampling factor.
pub const LATENT_FACTOR: usize = 8;
/// Channels per latent pixel.
pub const LATENT_CHANNELS: usize = 4;
const PATCH_LEN: usize = LATENT_FACTOR * LATENT_FACTOR * 3;
const MID_GRAY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub width: usize,
    pub height: usize,
    /// `(height, width, LATENT_CHANNELS)` row-major.
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(width: usize, height: usize) -> Self {
        Latent {
            width,
            height,
            data: vec![0.0; width * height * LATENT_CHANNELS],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "latent {height}x{width}x{LATENT_CHANNELS} needs {} values, got {}",
                width * height * LATENT_CHANNELS,
                data.len()
            )));
        }
        Ok(Latent { width, height, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The `4 x 192` projection matrix, rows indexed by latent channel and
/// columns laid out like an `(8, 8, 3)` patch.
pub fn basis() -> &'static [[f64; PATCH_LEN]; LATENT_CHANNELS] {
    static BASIS: OnceLock<[[f64; PATCH_LEN]; LATENT_CHANNELS]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = LATENT_FACTOR as f64;
        let luma = 1.0 / 3f64.sqrt();
        let dc = 1.0 / n.sqrt();
        let harmonic = |i: usize| (2.0 / n).sqrt() * (PI * (2 * i + 1) as f64 / (2.0 * n)).cos();
        let chroma = [1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt()];
        let mut b = [[0.0; PATCH_LEN]; LATENT_CHANNELS];
        for y in 0..LATENT_FACTOR {
            for x in 0..LATENT_FACTOR {
                for c in 0..3 {
                    let i = (y * LATENT_FACTOR + x) * 3 + c;
                    b[0][i] = dc * dc * luma;
                    b[1][i] = harmonic(x) * dc * luma;
                    b[2][i] = dc * harmonic(y) * luma;
                    b[3][i] = dc * dc * chroma[c];
                }
            }
        }
        b
    })
}

fn check_divisible(width: usize, height: usize) -> Result<()> {
    if !width.is_multiple_of(LATENT_FACTOR) || !height.is_multiple_of(LATENT_FACTOR) || width == 0 || height == 0 {
        return Err(Error::Shape(format!(
            "image {height}x{width} is not a positive multiple of {LATENT_FACTOR}"
        )));
    }
    Ok(())
}

/// Encodes an `(h, w, 3)` buffer.
pub fn encode_raw(width: usize, height: usize, rgb: &[f64]) -> Result<Latent> {
    check_divisible(width, height)?;
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "rgb buffer of {} values for {height}x{width}",
            rgb.len()
        )));
    }
    let b = basis();
    let (lw, lh) = (width / LATENT_FACTOR, height / LATENT_FACTOR);
    let mut out = Latent::zeros(lw, lh);
    for ly in 0..lh {
        for lx in 0..lw {
            let o = &mut out.data[(ly * lw + lx) * LATENT_CHANNELS..][..LATENT_CHANNELS];
            for py in 0..LATENT_FACTOR {
                let row = ((ly * LATENT_FACTOR + py) * width + lx * LATENT_FACTOR) * 3;
                for j in 0..LATENT_FACTOR * 3 {
                    let v = rgb[row + j] - MID_GRAY;
                    let i = py * LATENT_FACTOR * 3 + j;
                    for (k, ok) in o.iter_mut().enumerate() {
                        *ok += b[k][i] * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn encode(image: &RgbImage) -> Result<Latent> {
    encode_raw(image.width, image.height, &image.data)
}

/// Transpose of the projection without the mid-gray offset or clamping; this
/// is also the gradient of [`encode_raw`] with respect to its input.
pub fn encode_transpose(latent: &Latent) -> Vec<f64> {
    let b = basis();
    let (w, h) = (latent.width * LATENT_FACTOR, latent.height * LATENT_FACTOR);
    let mut out = vec![0.0; w * h * 3];
    for ly in 0..latent.height {
        for lx in 0..latent.width {
            let z = &latent.data[(ly * latent.width + lx) * LATENT_CHANNELS..][..LATENT_CHANNELS];
            for py in 0..LATENT_FACTOR {
                let row = ((ly * LATENT_FACTOR + py) * w + lx * LATENT_FACTOR) * 3;
                for j in 0..LATENT_FACTOR * 3 {
                    let i = py * LATENT_FACTOR * 3 + j;
                    out[row + j] = (0..LATENT_CHANNELS).map(|k| b[k][i] * z[k]).sum();
                }
            }
        }
    }
    out
}

/// Pseudo-inverse used for visualization.
pub fn decode(latent: &Latent) -> RgbImage {
    let data = encode_transpose(latent)
        .into_iter()
        .map(|v| (v + MID_GRAY).clamp(0.0, 1.0))
        .collect();
    RgbImage {
        width: latent.width * LATENT_FACTOR,
        height: latent.height * LATENT_FACTOR,
        data,
    }
}

/// `v` per-view latents tiled into a `2 x (v/2)` mosaic.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub views: usize,
    /// Per-view latent size.
    pub tile_width: usize,
    pub tile_height: usize,
    /// `(2 * tile_height, views/2 * tile_width, LATENT_CHANNELS)` row-major.
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn columns(&self) -> usize {
        self.views / 2
    }

    pub fn width(&self) -> usize {
        self.columns() * self.tile_width
    }

    pub fn height(&self) -> usize {
        2 * self.tile_height
    }

    pub fn zeros_like(&self) -> Self {
        LatentGrid {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    /// Top-left corner of view `i` in mosaic pixels.
    pub fn tile_origin(&self, i: usize) -> (usize, usize) {
        let cols = self.columns();
        ((i % cols) * self.tile_width, (i / cols) * self.tile_height)
    }

    /// Flat indices of view `i`'s elements, in tile row-major order.
    pub fn tile_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x0, y0) = self.tile_origin(i);
        let gw = self.width();
        (0..self.tile_height).flat_map(move |y| {
            let start = ((y0 + y) * gw + x0) * LATENT_CHANNELS;
            start..start + self.tile_width * LATENT_CHANNELS
        })
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.views == other.views
            && self.tile_width == other.tile_width
            && self.tile_height == other.tile_height
            && self.data.len() == other.data.len()
    }

    /// `(C, H, W)` single-precision copy for the network.
    pub fn to_chw(&self) -> Vec<f32> {
        let (w, h) = (self.width(), self.height());
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..LATENT_CHANNELS {
                    out[(c * h + y) * w + x] = self.data[(y * w + x) * LATENT_CHANNELS + c] as f32;
                }
            }
        }
        out
    }
}

pub fn assemble_grid(latents: &[Latent]) -> Result<LatentGrid> {
    let v = latents.len();
    if v == 0 || !v.is_multiple_of(2) {
        return Err(Error::Arrangement(format!("{v} views cannot form a 2 x (v/2) grid")));
    }
    let (tw, th) = (latents[0].width, latents[0].height);
    if latents.iter().any(|l| l.width != tw || l.height != th) {
        return Err(Error::Arrangement("views have differing latent sizes".into()));
    }
    let mut grid = LatentGrid {
        views: v,
        tile_width: tw,
        tile_height: th,
        data: vec![0.0; v * tw * th * LATENT_CHANNELS],
    };
    for (i, l) in latents.iter().enumerate() {
        let idx: Vec<usize> = grid.tile_indices(i).collect();
        for (dst, &src) in idx.into_iter().zip(&l.data) {
            grid.data[dst] = src;
        }
    }
    Ok(grid)
}

pub fn split_grid(grid: &LatentGrid) -> Result<Vec<Latent>> {
    if grid.views == 0 || !grid.views.is_multiple_of(2) {
        return Err(Error::Arrangement(format!("{} views cannot form a grid", grid.views)));
    }
    if grid.data.len() != grid.views * grid.tile_width * grid.tile_height * LATENT_CHANNELS {
        return Err(Error::Shape("latent grid buffer length".into()));
    }
    Ok((0..grid.views)
        .map(|i| Latent {
            width: grid.tile_width,
            height: grid.tile_height,
            data: grid.tile_indices(i).map(|j| grid.data[j]).collect(),
        })
        .collect())
}
