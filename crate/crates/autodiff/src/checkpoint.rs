//! `PACC` checkpoints.
//!
//! Layout (little-endian): magic, version `u16`, config hash `u64`, config
//! text, step `u64`, entry count `u32`, then per entry name, kind `u8`
//! (0 parameter, 1 buffer), dtype `u8` (0 = f32), rank `u32`, dims `u32`
//! and data. Optimiser state follows behind a presence byte: the four
//! hyperparameters as `f64` bits, step, moment count and `(name, len, m, v)`
//! records. A trailing FNV-1a 64 of everything before it catches truncation
//! and bit rot.

use std::path::Path;

use indexmap::IndexMap;
use pachubert_core::formats::{write_atomic, Decoder, Encoder, FormatError, CHECKPOINT_MAGIC};
use pachubert_core::hash::fnv1a64;
use thiserror::Error;

use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config hash mismatch: checkpoint {found:016x}, expected {expected:016x}")]
    ConfigMismatch { found: u64, expected: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn put_table(e: &mut Encoder, kind: u8, table: &IndexMap<String, Tensor<f32>>) {
    for (name, t) in table {
        e.str(name).u8(kind).u8(DTYPE_F32).u32(t.shape.len() as u32);
        for &d in &t.shape {
            e.u32(d as u32);
        }
        e.f32s(t.data.iter().copied());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(CHECKPOINT_MAGIC).u16(CHECKPOINT_VERSION).u64(self.config_hash).str(&self.config_text).u64(self.step);
        e.u32((self.params.params.len() + self.params.buffers.len()) as u32);
        put_table(&mut e, 0, &self.params.params);
        put_table(&mut e, 1, &self.params.buffers);
        match &self.optimizer {
            None => {
                e.u8(0);
            }
            Some(opt) => {
                let c = opt.config;
                e.u8(1);
                for h in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                    e.u64(h.to_bits());
                }
                e.u64(opt.step).u32(opt.m.len() as u32);
                for (name, m) in &opt.m {
                    let v = &opt.v[name];
                    e.str(name).u32(m.len() as u32).f32s(m.iter().copied()).f32s(v.iter().copied());
                }
            }
        }
        let sum = fnv1a64(&e.buf);
        e.u64(sum);
        e.buf
    }

    pub fn decode(data: &[u8]) -> Result<Self, CheckpointError> {
        if data.len() < 12 {
            return Err(FormatError::Corrupt("truncated checkpoint".into()).into());
        }
        let (body, tail) = data.split_at(data.len() - 8);
        let mut d = Decoder::new(body);
        d.expect_magic(CHECKPOINT_MAGIC)?;
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(FormatError::Corrupt("checksum mismatch (truncated or damaged checkpoint)".into()).into());
        }
        let version = d.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version { what: "checkpoint", version }.into());
        }
        let config_hash = d.u64()?;
        let config_text = d.str()?;
        let step = d.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..d.u32()? {
            let name = d.str()?;
            let kind = d.u8()?;
            if d.u8()? != DTYPE_F32 {
                return Err(FormatError::Corrupt(format!("{name}: unsupported dtype")).into());
            }
            let rank = d.u32()? as usize;
            let shape = (0..rank).map(|_| d.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| FormatError::Corrupt("size overflow".into()))?;
            let t = Tensor::new(shape, d.f32s(n)?);
            match kind {
                0 => params.insert(name, t),
                1 => params.insert_buffer(name, t),
                k => return Err(FormatError::Corrupt(format!("{name}: entry kind {k}")).into()),
            }
        }
        let optimizer = match d.u8()? {
            0 => None,
            1 => {
                let mut h = [0.0; 4];
                for v in &mut h {
                    *v = f64::from_bits(d.u64()?);
                }
                let config = AdamConfig { beta1: h[0], beta2: h[1], eps: h[2], weight_decay: h[3] };
                let mut opt = Adam::new(config);
                opt.step = d.u64()?;
                for _ in 0..d.u32()? {
                    let name = d.str()?;
                    let n = d.u32()? as usize;
                    opt.m.insert(name.clone(), d.f32s(n)?);
                    opt.v.insert(name, d.f32s(n)?);
                }
                Some(opt)
            }
            b => return Err(FormatError::Corrupt(format!("optimizer flag {b}")).into()),
        };
        d.finish()?;
        Ok(Self { config_hash, config_text, step, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        write_atomic(path, &self.encode()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let data = std::fs::read(path).map_err(FormatError::from)?;
        Self::decode(&data)
    }

    /// Loads and rejects a checkpoint written under a different config.
    pub fn load_expecting(path: impl AsRef<Path>, config_hash: u64) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.config_hash != config_hash {
            return Err(CheckpointError::ConfigMismatch { found: ck.config_hash, expected: config_hash });
        }
        Ok(ck)
    }
}
