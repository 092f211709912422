//! Binary artifact formats (little-endian throughout).
//!
//! * `PACF` patch features: magic, version `u16`, `C T F patch_t patch_f D`
//!   as `u32`, primitive-config fingerprint `u64`, config text (`u32` length
//!   + UTF-8), then `N x D` row-major `f32`.
//! * `PACL` patch labels: magic, `K` `u32`, grid rows/cols `u32`, then `u16`
//!   labels in time-major order.
//! * `PACK` K-means model: magic, `K` `u32`, `D` `u32`, seed `u64`, then mean,
//!   std and centroids as `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::labels::{KMeansModel, PatchLabelSequence};

pub const FEATURE_MAGIC: &[u8; 4] = b"PACF";
pub const LABEL_MAGIC: &[u8; 4] = b"PACL";
pub const KMEANS_MAGIC: &[u8; 4] = b"PACK";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PACC";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("unknown magic {0:?}")]
    UnknownMagic([u8; 4]),
    #[error("unsupported {what} version {version}")]
    Version { what: &'static str, version: u16 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `bytes` to a sibling temp file and renames it into place, so a
/// crash never leaves a partial file under the final name.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Append-only little-endian encoder.
#[derive(Default)]
pub struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) -> &mut Self {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32).bytes(s.as_bytes())
    }
}

/// Bounds-checked little-endian decoder; running off the end is `Corrupt`.
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            FormatError::Corrupt(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self) -> Result<[u8; 4], FormatError> {
        Ok(self.take(4)?.try_into().unwrap())
    }

    pub fn expect_magic(&mut self, want: &[u8; 4]) -> Result<(), FormatError> {
        let m = self.magic()?;
        if &m != want {
            return Err(FormatError::UnknownMagic(m));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Corrupt("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| FormatError::Corrupt(e.to_string()))
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.data.len() {
            return Err(FormatError::Corrupt(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Header and rows of a `PACF` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub channels: u32,
    pub frames: u32,
    pub freq_bins: u32,
    pub patch_t: u32,
    pub patch_f: u32,
    pub config_hash: u64,
    pub config_text: String,
    /// `[patches, D]`
    pub features: Array2<f32>,
}

impl FeatureFile {
    pub fn grid(&self) -> (usize, usize) {
        ((self.frames / self.patch_t) as usize, (self.freq_bins / self.patch_f) as usize)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(FEATURE_MAGIC)
            .u16(FEATURE_VERSION)
            .u32(self.channels)
            .u32(self.frames)
            .u32(self.freq_bins)
            .u32(self.patch_t)
            .u32(self.patch_f)
            .u32(self.features.ncols() as u32)
            .u64(self.config_hash)
            .str(&self.config_text)
            .f32s(self.features.iter().copied());
        e.buf
    }

    pub fn decode(data: &[u8]) -> Result<Self, FormatError> {
        let mut d = Decoder::new(data);
        d.expect_magic(FEATURE_MAGIC)?;
        let version = d.u16()?;
        if version != FEATURE_VERSION {
            return Err(FormatError::Version { what: "feature", version });
        }
        let (channels, frames, freq_bins, patch_t, patch_f, dim) = (d.u32()?, d.u32()?, d.u32()?, d.u32()?, d.u32()?, d.u32()?);
        if patch_t == 0 || patch_f == 0 {
            return Err(FormatError::Corrupt("zero patch size".into()));
        }
        let config_hash = d.u64()?;
        let config_text = d.str()?;
        let rows = (frames / patch_t) as usize * (freq_bins / patch_f) as usize;
        let data = d.f32s(rows * dim as usize)?;
        d.finish()?;
        let features = Array2::from_shape_vec((rows, dim as usize), data).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        Ok(Self { channels, frames, freq_bins, patch_t, patch_f, config_hash, config_text, features })
    }
}

pub fn encode_labels(labels: &PatchLabelSequence) -> Vec<u8> {
    let (gt, gf) = labels.labels.dim();
    let mut e = Encoder::default();
    e.bytes(LABEL_MAGIC).u32(labels.k as u32).u32(gt as u32).u32(gf as u32);
    for &l in labels.labels.iter() {
        e.u16(l);
    }
    e.buf
}

pub fn decode_labels(data: &[u8]) -> Result<PatchLabelSequence, FormatError> {
    let mut d = Decoder::new(data);
    d.expect_magic(LABEL_MAGIC)?;
    let k = d.u32()? as usize;
    let (gt, gf) = (d.u32()? as usize, d.u32()? as usize);
    let mut flat = Vec::with_capacity(gt * gf);
    for _ in 0..gt * gf {
        let l = d.u16()?;
        if l as usize >= k {
            return Err(FormatError::Corrupt(format!("label {l} outside [0, {k})")));
        }
        flat.push(l);
    }
    d.finish()?;
    Ok(PatchLabelSequence { labels: Array2::from_shape_vec((gt, gf), flat).unwrap(), k })
}

pub fn encode_kmeans(model: &KMeansModel) -> Vec<u8> {
    let mut e = Encoder::default();
    e.bytes(KMEANS_MAGIC)
        .u32(model.k() as u32)
        .u32(model.dim() as u32)
        .u64(model.seed)
        .f32s(model.feature_mean.iter().copied())
        .f32s(model.feature_std.iter().copied())
        .f32s(model.centroids.iter().copied());
    e.buf
}

pub fn decode_kmeans(data: &[u8]) -> Result<KMeansModel, FormatError> {
    let mut d = Decoder::new(data);
    d.expect_magic(KMEANS_MAGIC)?;
    let (k, dim) = (d.u32()? as usize, d.u32()? as usize);
    let seed = d.u64()?;
    let feature_mean = d.f32s(dim)?;
    let feature_std = d.f32s(dim)?;
    let centroids = d.f32s(k * dim)?;
    d.finish()?;
    Ok(KMeansModel {
        centroids: Array2::from_shape_vec((k, dim), centroids).unwrap(),
        feature_mean,
        feature_std,
        seed,
    })
}

/// Reads the four-byte magic of a file.
pub fn sniff_magic(data: &[u8]) -> Result<[u8; 4], FormatError> {
    Decoder::new(data).magic()
}
