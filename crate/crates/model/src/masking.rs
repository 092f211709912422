//! Span masking over the token sequence.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    /// Span starts, ascending.
    pub starts: Vec<usize>,
    /// Union of the spans, ascending.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn as_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_tokens];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }

    /// Every token masked.
    pub fn full(n_tokens: usize) -> Self {
        Self { n_tokens, starts: (0..n_tokens).collect(), masked: (0..n_tokens).collect() }
    }

    pub fn fraction(&self) -> f64 {
        self.masked.len() as f64 / self.n_tokens as f64
    }
}

/// `round(p% * n_tokens)` starts drawn without replacement; each masks
/// `l` tokens, truncated at the end of the sequence.
pub fn make_mask_plan_with(n_tokens: usize, p: f64, l: usize, rng: &mut impl Rng) -> Result<MaskPlan, ModelError> {
    if l == 0 || n_tokens < l {
        return Err(ModelError::Mask(format!("span length {l} does not fit {n_tokens} tokens")));
    }
    let n_starts = (p / 100.0 * n_tokens as f64).round() as usize;
    if n_starts == 0 || n_starts > n_tokens {
        return Err(ModelError::Mask(format!("{p}% of {n_tokens} tokens gives {n_starts} starts")));
    }
    let mut starts = sample(rng, n_tokens, n_starts).into_vec();
    starts.sort_unstable();
    let mut flags = vec![false; n_tokens];
    for &s in &starts {
        for f in flags.iter_mut().skip(s).take(l) {
            *f = true;
        }
    }
    let masked = flags.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    Ok(MaskPlan { n_tokens, starts, masked })
}

pub fn make_mask_plan(n_tokens: usize, p: f64, l: usize, seed: u64) -> Result<MaskPlan, ModelError> {
    make_mask_plan_with(n_tokens, p, l, &mut ChaCha8Rng::seed_from_u64(seed))
}
