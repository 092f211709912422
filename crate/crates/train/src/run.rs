//! Pieces shared by the training loops: start state, checkpoint files and
//! validation bookkeeping.

use std::path::{Path, PathBuf};

use pachubert_autodiff::{Adam, AdamConfig, Checkpoint, ParamStore};
use pachubert_core::formats::write_atomic;
use pachubert_model::network::init_params;
use pachubert_model::ModelConfig;

use crate::config::StageConfig;
use crate::data::{derive_seed, stream};
use crate::log::{Record, TrainLog};
use crate::TrainError;

pub const LATEST: &str = "latest.ckpt";
pub const BEST: &str = "best.ckpt";
pub const LOG: &str = "train_log.jsonl";
pub const MODEL_CONFIG: &str = "model.toml";
pub const STAGE_CONFIG: &str = "stage.toml";

/// Where a run starts from.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Start {
    /// Seeded initialisation.
    Fresh,
    /// Given weights, fresh optimiser at step 0.
    Weights(ParamStore<f32>),
    /// Weights, optimiser moments and step of an interrupted run.
    Resume(Checkpoint),
}

/// Runtime options that do not change results.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoints, log and config snapshots go here when set.
    pub out_dir: Option<PathBuf>,
    /// Build batches on the training thread instead of a prefetch worker.
    pub deterministic: bool,
    pub on_record: Option<&'a mut dyn FnMut(&Record)>,
}

impl RunOptions<'_> {
    pub(crate) fn emit(&mut self, r: &Record) {
        if let Some(f) = self.on_record.as_mut() {
            f(r);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    /// Updates applied in total.
    pub step: u64,
    pub log: TrainLog,
    /// Best validation metric seen, if any validation ran.
    pub best: Option<f64>,
    pub stopped_early: bool,
}

pub(crate) struct State {
    pub store: ParamStore<f32>,
    pub opt: Adam<f32>,
    pub step: u64,
    pub log: TrainLog,
}

pub(crate) fn initial_state(model: &ModelConfig, stage: &StageConfig, start: Start, out_dir: Option<&Path>) -> Result<State, TrainError> {
    let adam = Adam::new(AdamConfig::adamw(stage.weight_decay));
    let check_shapes = |store: &ParamStore<f32>| -> Result<(), TrainError> {
        let fresh = init_params(model, 0);
        for (name, t) in fresh.params.iter().chain(fresh.buffers.iter()) {
            let found = store.params.get(name).or_else(|| store.buffers.get(name));
            if found.map(|f| &f.shape) != Some(&t.shape) {
                return Err(TrainError::Config(format!("initial weights lack {name} with shape {:?}", t.shape)));
            }
        }
        Ok(())
    };
    Ok(match start {
        Start::Fresh => State { store: init_params(model, derive_seed(stage.seed, &[stream::INIT])), opt: adam, step: 0, log: TrainLog::default() },
        Start::Weights(store) => {
            check_shapes(&store)?;
            State { store, opt: adam, step: 0, log: TrainLog::default() }
        }
        Start::Resume(ck) => {
            if ck.config_hash != model.hash() {
                return Err(TrainError::Config(format!("checkpoint config hash {:016x} does not match the model config {:016x}", ck.config_hash, model.hash())));
            }
            check_shapes(&ck.params)?;
            if ck.step > stage.steps {
                return Err(TrainError::Config(format!("checkpoint is at step {} beyond the {} configured", ck.step, stage.steps)));
            }
            let mut log = match out_dir.map(|d| d.join(LOG)) {
                Some(p) if p.exists() => TrainLog::load(p)?,
                _ => TrainLog::default(),
            };
            log.truncate_after(ck.step);
            let opt = ck.optimizer.unwrap_or(adam);
            State { store: ck.params, opt, step: ck.step, log }
        }
    })
}

pub(crate) fn write_snapshots(dir: &Path, model: &ModelConfig, stage: &StageConfig) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(dir.join(MODEL_CONFIG), model.to_toml().as_bytes())?;
    write_atomic(dir.join(STAGE_CONFIG), stage.to_toml().as_bytes())?;
    Ok(())
}

pub fn checkpoint_of(model: &ModelConfig, state_store: &ParamStore<f32>, opt: Option<&Adam<f32>>, step: u64) -> Checkpoint {
    Checkpoint { config_hash: model.hash(), config_text: model.to_toml(), step, params: state_store.clone(), optimizer: opt.cloned() }
}

/// Tracks the best validation value and the validations since it.
pub(crate) struct Tracker {
    pub best: Option<f64>,
    pub since_best: usize,
    higher_is_better: bool,
}

impl Tracker {
    pub fn new(higher_is_better: bool, log: &TrainLog) -> Self {
        let mut t = Self { best: None, since_best: 0, higher_is_better };
        for r in log.validations() {
            if let Record::Validation { value, .. } = r {
                t.observe(*value);
            }
        }
        t
    }

    /// Returns whether `v` is a new best.
    pub fn observe(&mut self, v: f64) -> bool {
        let better = match self.best {
            None => true,
            Some(b) => (self.higher_is_better && v > b) || (!self.higher_is_better && v < b),
        };
        if better {
            self.best = Some(v);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }
}
