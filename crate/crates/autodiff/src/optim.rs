//! Adam / AdamW, global-norm clipping and learning-rate schedules.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for {0} has shape {1:?}, parameter has {2:?}")]
    ShapeMismatch(String, Vec<usize>, Vec<usize>),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

/// Optimiser hyperparameters. `weight_decay > 0` gives AdamW's decoupled
/// decay; 0 gives plain Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn adam() -> Self {
        Self::adamw(0.0)
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::adamw(0.01)
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

/// What one optimiser step did.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    /// A gradient contained NaN or infinity; nothing was updated.
    SkippedNonFinite { param: String },
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update at learning rate `lr`. Gradients are clipped to global
    /// norm `clip` first when given.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<StepOutcome, OptimError> {
        for (name, g) in grads {
            let p = params.params.get(name).ok_or_else(|| OptimError::ShapeMismatch(name.clone(), g.shape.clone(), vec![]))?;
            if p.shape != g.shape {
                return Err(OptimError::ShapeMismatch(name.clone(), g.shape.clone(), p.shape.clone()));
            }
            if !g.all_finite() {
                return Ok(StepOutcome::SkippedNonFinite { param: name.clone() });
            }
        }
        let norm = global_norm(grads.values());
        let gscale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                let gi = g.data[i].as_f64() * gscale;
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let mut w = p.data[i].as_f64();
                w -= lr * c.weight_decay * w;
                w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p.data[i] = T::of(w);
            }
        }
        Ok(StepOutcome::Applied { grad_norm: norm })
    }
}

/// L2 norm over all gradient entries, accumulated in f64.
pub fn global_norm<'a, T: Float>(grads: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
    grads.into_iter().flat_map(|g| g.data.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Learning-rate schedule with linear warm-up from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base_lr` after warm-up, `base_lr · drop_factor` from `drop_step` on.
    WarmupThenDrop { base_lr: f64, warmup_steps: u64, drop_step: u64, drop_factor: f64 },
    /// `base_lr · alpha^floor((step - warmup) / decay_every)` after warm-up.
    WarmupThenStepDecay { base_lr: f64, warmup_steps: u64, decay_every: u64, alpha: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Schedule(m.to_string()));
        match *self {
            Self::WarmupThenDrop { base_lr, drop_factor, .. } => {
                if !(base_lr > 0.0) || !(drop_factor > 0.0 && drop_factor <= 1.0) {
                    return bad("base_lr must be > 0 and drop_factor in (0, 1]");
                }
            }
            Self::WarmupThenStepDecay { base_lr, decay_every, alpha, .. } => {
                if !(base_lr > 0.0) || decay_every == 0 || !(alpha > 0.0 && alpha <= 1.0) {
                    return bad("base_lr must be > 0, decay_every > 0 and alpha in (0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        match *self {
            Self::WarmupThenDrop { warmup_steps, .. } | Self::WarmupThenStepDecay { warmup_steps, .. } => warmup_steps,
        }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            Self::WarmupThenDrop { base_lr, .. } | Self::WarmupThenStepDecay { base_lr, .. } => base_lr,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let (base, warm) = (self.base_lr(), self.warmup_steps());
        if step < warm {
            return base * step as f64 / warm as f64;
        }
        match *self {
            Self::WarmupThenDrop { drop_step, drop_factor, .. } => {
                if step >= drop_step {
                    base * drop_factor
                } else {
                    base
                }
            }
            Self::WarmupThenStepDecay { decay_every, alpha, .. } => base * alpha.powi(((step - warm) / decay_every) as i32),
        }
    }
}
