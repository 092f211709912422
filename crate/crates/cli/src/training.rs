//! `pretrain` and `finetune`.

use std::path::{Path, PathBuf};

use pachubert_autodiff::Checkpoint;
use pachubert_core::audio::Split;
use pachubert_core::formats::decode_labels;
use pachubert_model::ModelConfig;
use pachubert_train::run::LATEST;
use pachubert_train::{run_finetune, run_pretrain, PretrainExample, Record, RunOptions, StageConfig, Start};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{clip_file, load_checkpoint, load_manifest, load_song, load_song_list, manifest_clips, read, require};

/// Flags shared by both training stages.
pub struct StageFlags {
    pub out: PathBuf,
    pub seed: u64,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub resume: bool,
    pub deterministic: bool,
}

impl StageFlags {
    fn apply(&self, base: &StageConfig) -> Result<StageConfig> {
        let mut s = base.clone();
        s.seed = self.seed;
        if let Some(n) = self.steps {
            s.steps = n;
        }
        if let Some(b) = self.batch_size {
            s.batch_size = b;
        }
        s.validate()?;
        Ok(s)
    }

    fn start(&self, model: &ModelConfig, init: Option<&Path>) -> Result<Start> {
        if self.resume {
            let p = self.out.join(LATEST);
            require(&p)?;
            return Ok(Start::Resume(Checkpoint::decode(&read(&p)?)?));
        }
        match init {
            None => Ok(Start::Fresh),
            Some(p) => {
                let (ck, cfg) = load_checkpoint(p)?;
                if cfg.hash() != model.hash() {
                    return Err(CliError::Config(format!("{} was trained with a different model config", p.display())));
                }
                Ok(Start::Weights(ck.params))
            }
        }
    }
}

fn progress(total: u64) -> impl FnMut(&Record) {
    let every = (total / 20).max(1);
    move |r: &Record| match r {
        Record::Validation { step, metric, value, best } => eprintln!("step {step} {metric}={value:.6}{}", if *best { " best" } else { "" }),
        r if r.step() % every == 0 => eprintln!("step {} loss={:.6}", r.step(), r.loss().unwrap_or(f64::NAN)),
        _ => {}
    }
}

fn summary(stage: &str, out: &pachubert_train::TrainOutcome, dir: &Path) {
    let last = out.log.losses().last().copied().unwrap_or(f64::NAN);
    let best = out.best.map_or("none".to_string(), |b| b.to_string());
    println!("stage={stage} steps={} final_loss={last} best={best} stopped_early={} out={}", out.step, out.stopped_early, dir.display());
}

pub fn pretrain(cfg: &RunConfig, manifest: &Path, labels: &Path, flags: &StageFlags) -> Result<()> {
    let stage = flags.apply(&cfg.pretrain)?;
    let m = load_manifest(manifest)?;
    let clips = manifest_clips(&m, &cfg.model)?;
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, (entry, clip)) in m.entries.iter().zip(&clips).enumerate() {
        let p = labels.join(clip_file(i, "pacl"));
        let seq = decode_labels(&read(&p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        let ex = PretrainExample::new(&cfg.model, clip, &seq)?;
        match entry.split {
            Split::Train => train.push(ex),
            Split::Valid => valid.push(ex),
            Split::Test => {}
        }
    }
    if train.is_empty() {
        return Err(CliError::Input(format!("{} has no train clips", manifest.display())));
    }
    let start = flags.start(&cfg.model, None)?;
    let mut cb = progress(stage.steps);
    let mut opts = RunOptions { out_dir: Some(flags.out.clone()), deterministic: flags.deterministic, on_record: Some(&mut cb) };
    let out = run_pretrain(&cfg.model, &stage, &train, &valid, start, &mut opts)?;
    summary("pretrain", &out, &flags.out);
    Ok(())
}

pub fn finetune(cfg: &RunConfig, songs: &Path, init: Option<&Path>, data_ratio: Option<f64>, flags: &StageFlags) -> Result<()> {
    let mut stage = flags.apply(&cfg.finetune)?;
    if let Some(r) = data_ratio {
        stage.data_ratio = r;
        stage.validate()?;
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (dir, split) in load_song_list(songs)? {
        let song = load_song(&dir, &cfg.model)?;
        match split {
            Split::Train => train.push(song),
            Split::Valid => valid.push(song),
            Split::Test => {}
        }
    }
    if train.is_empty() {
        return Err(CliError::Input(format!("{} has no train songs", songs.display())));
    }
    let start = flags.start(&cfg.model, init)?;
    let mut cb = progress(stage.steps);
    let mut opts = RunOptions { out_dir: Some(flags.out.clone()), deterministic: flags.deterministic, on_record: Some(&mut cb) };
    let out = run_finetune(&cfg.model, &stage, &train, &valid, start, &mut opts)?;
    summary("finetune", &out, &flags.out);
    Ok(())
}
