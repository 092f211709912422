//! Structured training log, one JSON object per line.

use std::path::Path;

use pachubert_core::formats::write_atomic;
use serde::{Deserialize, Serialize};

use crate::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// One optimiser update; `step` counts updates from 1.
    Pretrain { step: u64, lr: f64, loss: f64, masked_accuracy: f64 },
    Finetune { step: u64, lr: f64, loss: f64, per_source_l1: Vec<f64> },
    /// Held-out metric after `step` updates (0 = before training).
    Validation { step: u64, metric: String, value: f64, best: bool },
}

impl Record {
    pub fn step(&self) -> u64 {
        match self {
            Self::Pretrain { step, .. } | Self::Finetune { step, .. } | Self::Validation { step, .. } => *step,
        }
    }

    pub fn loss(&self) -> Option<f64> {
        match self {
            Self::Pretrain { loss, .. } | Self::Finetune { loss, .. } => Some(*loss),
            Self::Validation { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<Record>,
}

impl TrainLog {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    /// Training-step records in order.
    pub fn steps(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !matches!(r, Record::Validation { .. }))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps().filter_map(Record::loss).collect()
    }

    pub fn validations(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| matches!(r, Record::Validation { .. }))
    }

    /// Drops everything logged after `step` (for resuming).
    pub fn truncate_after(&mut self, step: u64) {
        self.records.retain(|r| r.step() <= step);
    }

    /// Training steps strictly increase, and so do validations.
    pub fn is_ordered(&self) -> bool {
        let inc = |v: Vec<u64>| v.windows(2).all(|w| w[0] < w[1]);
        inc(self.steps().map(Record::step).collect()) && inc(self.validations().map(Record::step).collect())
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialise") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(write_atomic(path, self.to_jsonl().as_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}
