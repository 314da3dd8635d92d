//! Training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSCK" | version u32 | header_len u64 | header (UTF-8 TOML)
//! tensor_count u64 | tensors...
//! tensor: name_len u32 | name | dtype u8 (0 = f32) | ndim u32 | dims u64 * ndim | payload
//! ```
//!
//! The header holds the training config, the step counter and the RNG state.
//! Network tensors keep their parameter names; Adam moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::training::{Adam, TrainConfig, Trainer};
use crate::unet::{ParamStore, UNet};

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    adam_step: u64,
    /// Hex-encoded ChaCha key.
    rng_seed: String,
    /// Decimal; the word position does not fit a TOML integer.
    rng_word_pos: String,
    rng_stream: String,
    config: TrainConfig,
}

/// A complete, resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub params: ParamStore,
    pub adam: Adam,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("length {v} too large")))
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend((t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend((d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend(v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let n = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::format(r.path, "tensor name is not UTF-8"))?
        .to_string();
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(r.path, format!("tensor {name}: unknown dtype {dtype}")));
    }
    let ndim = r.u32()? as usize;
    let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::format(r.path, format!("tensor {name}: shape {shape:?} overflows")))?;
    let data = r
        .take(count)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(shape, data)))
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            step: t.step,
            rng: t.rng.clone(),
            params: t.net.params.clone(),
            adam: t.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let net = UNet {
            config: self.config.denoiser.clone(),
            params: self.params,
        };
        Trainer::from_parts(self.config, net, Some(self.adam), self.step, self.rng)
    }

    pub fn network(&self) -> UNet {
        UNet {
            config: self.config.denoiser.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            adam_step: self.adam.t,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            rng_stream: self.rng.get_stream().to_string(),
            config: self.config.clone(),
        };
        let header = toml::to_string(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header.as_bytes());
        let groups = [("", &self.params), ("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)];
        let count: usize = groups.iter().map(|(_, s)| s.entries.len()).sum();
        out.extend((count as u64).to_le_bytes());
        for (prefix, store) in groups {
            for (name, t) in &store.entries {
                write_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let n = r.len()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let h: Header = toml::from_str(text).map_err(|e| Error::format(path, format!("header: {e}")))?;
        h.config.validate()?;

        let parse = |what: &str, s: &str| Error::format(path, format!("{what}: {s}"));
        let seed: [u8; 32] = hex::decode(&h.rng_seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| parse("rng_seed", &h.rng_seed))?;
        let word_pos: u128 = h
            .rng_word_pos
            .parse()
            .map_err(|_| parse("rng_word_pos", &h.rng_word_pos))?;
        let stream: u64 = h.rng_stream.parse().map_err(|_| parse("rng_stream", &h.rng_stream))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let count = r.len()?;
        let mut params = ParamStore { entries: Vec::new() };
        let mut m = ParamStore { entries: Vec::new() };
        let mut v = ParamStore { entries: Vec::new() };
        for _ in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            if let Some(rest) = name.strip_prefix("adam.m/") {
                m.entries.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                v.entries.push((rest.to_string(), t));
            } else {
                params.entries.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let cfg = &h.config.denoiser;
        for (what, store) in [("parameters", &params), ("adam.m", &m), ("adam.v", &v)] {
            if !store.matches(cfg) {
                return Err(Error::format(path, format!("{what} do not match the network config")));
            }
        }
        let adam = Adam {
            lr: h.config.learning_rate,
            beta1: h.config.adam_beta1,
            beta2: h.config.adam_beta2,
            eps: h.config.adam_eps,
            t: h.adam_step,
            m,
            v,
        };
        Ok(Checkpoint {
            config: h.config,
            step: h.step,
            rng,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Content identifier used in reports: SHA-256 of the checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
