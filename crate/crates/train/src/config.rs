//! Stage configuration: batch size, step budget, schedule and cadence.

use pachubert_autodiff::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    /// Validations without a new best before stopping is allowed.
    pub patience: usize,
    pub early_stop: bool,
    /// Fraction of training songs used (fine-tuning).
    pub data_ratio: f64,
    pub schedule: LrSchedule,
}

impl StageConfig {
    /// Full-scale pretraining: batch 96, 250k steps, AdamW, warm-up 32k,
    /// learning rate cut 10x after 150k steps.
    pub fn full_pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            batch_size: 96,
            steps: 250_000,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: None,
            checkpoint_every: 1000,
            validate_every: 1000,
            patience: 10,
            early_stop: true,
            data_ratio: 1.0,
            schedule: LrSchedule::WarmupThenDrop { base_lr: 5e-4, warmup_steps: 32_000, drop_step: 150_000, drop_factor: 0.1 },
        }
    }

    /// Full-scale fine-tuning: 200k steps, Adam, warm-up 3k then x0.9
    /// every 15k steps.
    pub fn full_finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: 96,
            steps: 200_000,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: None,
            checkpoint_every: 500,
            validate_every: 500,
            patience: 10,
            early_stop: true,
            data_ratio: 1.0,
            schedule: LrSchedule::WarmupThenStepDecay { base_lr: 1e-3, warmup_steps: 3000, decay_every: 15_000, alpha: 0.9 },
        }
    }

    pub fn toy_pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            batch_size: 2,
            steps: 2000,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: Some(5.0),
            checkpoint_every: 500,
            validate_every: 250,
            patience: 10,
            early_stop: false,
            data_ratio: 1.0,
            schedule: LrSchedule::WarmupThenDrop { base_lr: 2e-3, warmup_steps: 100, drop_step: 1500, drop_factor: 0.1 },
        }
    }

    pub fn toy_finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: 1,
            steps: 3000,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: Some(5.0),
            checkpoint_every: 500,
            validate_every: 250,
            patience: 10,
            early_stop: false,
            data_ratio: 1.0,
            schedule: LrSchedule::WarmupThenStepDecay { base_lr: 2e-3, warmup_steps: 100, decay_every: 500, alpha: 0.7 },
        }
    }

    /// `<profile>` is `full` or `toy`.
    pub fn profile(stage: Stage, profile: &str) -> Option<Self> {
        match (stage, profile) {
            (Stage::Pretrain, "full") => Some(Self::full_pretrain()),
            (Stage::Pretrain, "toy") => Some(Self::toy_pretrain()),
            (Stage::Finetune, "full") => Some(Self::full_finetune()),
            (Stage::Finetune, "toy") => Some(Self::toy_finetune()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return bad("checkpoint_every and validate_every must be positive");
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return bad("data_ratio must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        self.schedule.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stage config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for cfg in [StageConfig::full_pretrain(), StageConfig::full_finetune(), StageConfig::toy_pretrain(), StageConfig::toy_finetune()] {
            cfg.validate().unwrap();
            assert_eq!(StageConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_unknown_keys_and_zero_steps() {
        let text = StageConfig::toy_pretrain().to_toml();
        assert!(StageConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
        assert!(StageConfig::from_toml(&text.replace("steps = 2000", "steps = 0")).is_err());
    }
}
