//! Network geometry and hyperparameters.

use pachubert_core::hash::fnv1a64;
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Everything that fixes tensor shapes. Serialised as TOML next to every
/// checkpoint; the checkpoint header stores the hash of that text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    /// Samples per training clip.
    pub clip_len: usize,
    /// Audio channels `C`.
    pub channels: usize,
    /// Frames `T` after zero padding.
    pub frames: usize,
    /// Frequency bins `F` (`window / 2`).
    pub freq_bins: usize,
    /// Bottleneck width `C_b`.
    pub c_b: usize,
    pub patch_t: usize,
    pub patch_f: usize,
    /// Transformer blocks `N`.
    pub n_blocks: usize,
    pub heads: usize,
    /// Transformer width `h`.
    pub hidden: usize,
    /// Feed-forward inner width as a multiple of `h`.
    pub ffn_mult: usize,
    /// Projection dimension `E` of the masked-unit head.
    pub proj_dim: usize,
    /// Pseudo-label classes `K`.
    pub classes: usize,
    pub n_sources: usize,
    /// Percentage of tokens drawn as span starts.
    pub mask_p: f64,
    /// Span length in tokens.
    pub mask_l: usize,
    /// Logit scale.
    pub tau: f64,
    /// Output width of each encoder block; the last equals `c_b`.
    pub enc_widths: Vec<usize>,
    pub strides_t: Vec<usize>,
    pub strides_f: Vec<usize>,
    /// Transformer block whose output is clustered for relabelling (1-based).
    pub relabel_layer: usize,
}

impl ModelConfig {
    /// Full-scale geometry: 3 s stereo at 44.1 kHz, STFT 2048/441.
    pub fn full() -> Self {
        Self {
            sample_rate: 44_100,
            window: 2048,
            hop: 441,
            clip_len: 132_300,
            channels: 2,
            frames: 320,
            freq_bins: 1024,
            c_b: 384,
            patch_t: 32,
            patch_f: 64,
            n_blocks: 12,
            heads: 8,
            hidden: 384,
            ffn_mult: 4,
            proj_dim: 256,
            classes: 960,
            n_sources: 4,
            mask_p: 40.0,
            mask_l: 5,
            tau: 10.0,
            enc_widths: vec![16, 32, 64, 128, 256, 384],
            strides_t: vec![2, 2, 2, 2, 2, 1],
            strides_f: vec![2, 2, 2, 2, 2, 2],
            relabel_layer: 6,
        }
    }

    /// Desk-scale geometry used by tests and the synthetic corpus: 960-sample
    /// clips, STFT 128/32, an 8 x 8 token grid.
    pub fn toy() -> Self {
        Self {
            sample_rate: 44_100,
            window: 128,
            hop: 32,
            clip_len: 960,
            channels: 2,
            frames: 32,
            freq_bins: 64,
            c_b: 16,
            patch_t: 4,
            patch_f: 8,
            n_blocks: 2,
            heads: 2,
            hidden: 16,
            ffn_mult: 4,
            proj_dim: 256,
            classes: 8,
            n_sources: 4,
            mask_p: 40.0,
            mask_l: 5,
            tau: 10.0,
            enc_widths: vec![8, 8, 16, 16, 16, 16],
            strides_t: vec![2, 2, 1, 1, 1, 1],
            strides_f: vec![2, 2, 2, 1, 1, 1],
            relabel_layer: 1,
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        let prod = |v: &[usize]| v.iter().product::<usize>();
        if self.enc_widths.is_empty() || self.enc_widths.len() != self.strides_t.len() || self.enc_widths.len() != self.strides_f.len() {
            return fail("enc_widths, strides_t and strides_f need the same non-zero length".into());
        }
        if prod(&self.strides_t) != self.patch_t || prod(&self.strides_f) != self.patch_f {
            return fail(format!("stride products ({}, {}) must equal the patch ({}, {})", prod(&self.strides_t), prod(&self.strides_f), self.patch_t, self.patch_f));
        }
        if self.enc_widths.last() != Some(&self.c_b) || self.hidden != self.c_b {
            return fail("the last encoder width and hidden must both equal c_b".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide hidden {}", self.heads, self.hidden));
        }
        if !(self.mask_p > 0.0 && self.mask_p < 100.0) || self.mask_l == 0 {
            return fail("mask_p must lie in (0, 100) and mask_l be positive".into());
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive".into());
        }
        if self.window / 2 != self.freq_bins || !self.window.is_power_of_two() || self.hop == 0 || self.hop > self.window {
            return fail("freq_bins must be window / 2 with a power-of-two window and 0 < hop <= window".into());
        }
        if !self.frames.is_multiple_of(self.patch_t) || !self.freq_bins.is_multiple_of(self.patch_f) {
            return fail("frames and freq_bins must be multiples of the patch".into());
        }
        let valid = self.valid_frames();
        if valid == 0 || valid > self.frames || self.clip_len <= self.window / 2 {
            return fail(format!("clip_len {} gives {valid} frames for a {}-frame grid", self.clip_len, self.frames));
        }
        if (valid - 1) * self.hop + self.window / 2 < self.clip_len {
            return fail("frames do not cover clip_len".into());
        }
        if self.classes == 0 || self.classes > u16::MAX as usize + 1 || self.n_sources == 0 || self.channels == 0 || self.proj_dim == 0 {
            return fail("classes, n_sources, channels and proj_dim must be positive (classes <= 65536)".into());
        }
        if self.n_blocks > 0 && !(1..=self.n_blocks).contains(&self.relabel_layer) {
            return fail(format!("relabel_layer {} outside 1..={}", self.relabel_layer, self.n_blocks));
        }
        Ok(())
    }

    pub fn valid_frames(&self) -> usize {
        pachubert_core::dsp::frame_count(self.clip_len, self.hop)
    }

    /// Token grid `(T / P_t, F / P_f)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.frames / self.patch_t, self.freq_bins / self.patch_f)
    }

    pub fn n_tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }
}
