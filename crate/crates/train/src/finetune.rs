//! Separation fine-tuning with a time-domain L1 loss.

use pachubert_autodiff::{BatchStats, Binding, Graph, ParamStore, StepOutcome, Tensor, Var};
use pachubert_core::audio::AudioClip;
use pachubert_core::dsp::Spectrogram;
use pachubert_model::network::{update_running_stats, BN_MOMENTUM, HEAD};
use pachubert_model::separate::model_spectrogram;
use pachubert_model::{separation_forward, stem_l1, synthesis_plan, ModelConfig, Net};

use crate::config::{Stage, StageConfig};
use crate::data::{crop_start, drive, select_subset, BatchSampler, FinetuneSong};
use crate::log::Record;
use crate::run::{checkpoint_of, initial_state, write_snapshots, RunOptions, Start, TrainOutcome, Tracker, BEST, LATEST, LOG};
use crate::TrainError;

const EVAL_BATCH: usize = 8;

/// Parameters the separation loss reaches.
fn separation_param(name: &str) -> bool {
    !name.starts_with(HEAD) && name != "tf.mask_emb"
}

struct Batch {
    specs: Vec<Spectrogram>,
    /// `[N, S, C, L]`.
    stems: Tensor<f32>,
}

fn batch_of(cfg: &ModelConfig, crops: Vec<(AudioClip, Vec<AudioClip>)>) -> Result<Batch, TrainError> {
    let mut specs = Vec::with_capacity(crops.len());
    let mut data = Vec::with_capacity(crops.len() * cfg.n_sources * cfg.channels * cfg.clip_len);
    for (mix, stems) in &crops {
        specs.push(model_spectrogram(cfg, mix)?);
        for s in stems {
            data.extend(s.samples.iter().copied());
        }
    }
    Ok(Batch { specs, stems: Tensor::new(vec![crops.len(), cfg.n_sources, cfg.channels, cfg.clip_len], data) })
}

fn check_songs(cfg: &ModelConfig, songs: &[FinetuneSong]) -> Result<(), TrainError> {
    for (i, s) in songs.iter().enumerate() {
        if s.stems.len() != cfg.n_sources {
            return Err(TrainError::StemMismatch(format!("song {i} has {} stems, the model separates {}", s.stems.len(), cfg.n_sources)));
        }
        if s.mixture.channels() != cfg.channels || s.mixture.sample_rate != cfg.sample_rate {
            return Err(TrainError::StemMismatch(format!("song {i} is not {} channels at {} Hz", cfg.channels, cfg.sample_rate)));
        }
        if s.is_empty() {
            return Err(TrainError::StemMismatch(format!("song {i} is empty")));
        }
    }
    Ok(())
}

struct Forward {
    g: Graph<f32>,
    vars: Binding,
    loss: Var,
    wav: Var,
    stats: Vec<(String, BatchStats)>,
}

fn forward(store: &ParamStore<f32>, cfg: &ModelConfig, batch: &Batch, train: bool) -> Result<Forward, TrainError> {
    let plan = synthesis_plan(cfg);
    let mut g = Graph::new();
    let vars = store.bind_where(&mut g, separation_param);
    let (wav, stats) = {
        let mut net = Net::new(&mut g, &vars, store, cfg, train);
        let (_, wav) = separation_forward(&mut net, &batch.specs, &plan)?;
        (wav, std::mem::take(&mut net.stats))
    };
    let loss = stem_l1(&mut g, wav, batch.stems.clone())?;
    Ok(Forward { g, vars, loss, wav, stats })
}

/// Mean absolute error per source over the batch.
fn per_source_l1(wav: &Tensor<f32>, stems: &Tensor<f32>) -> Vec<f64> {
    let (n, s) = (wav.shape[0], wav.shape[1]);
    let per = wav.shape[2] * wav.shape[3];
    (0..s)
        .map(|si| {
            let mut acc = 0.0f64;
            for b in 0..n {
                let off = (b * s + si) * per;
                acc += wav.data[off..off + per].iter().zip(&stems.data[off..off + per]).map(|(a, t)| (a - t).abs() as f64).sum::<f64>();
            }
            acc / (n * per) as f64
        })
        .collect()
}

/// Eval-mode fine-tuning loss over consecutive model-sized chunks of every
/// song (a short song gives one zero-padded chunk), averaged over chunks.
pub fn evaluate_l1(store: &ParamStore<f32>, cfg: &ModelConfig, songs: &[FinetuneSong]) -> Result<f64, TrainError> {
    check_songs(cfg, songs)?;
    let l = cfg.clip_len;
    let crops: Vec<(usize, usize)> = songs.iter().enumerate().flat_map(|(i, s)| (0..(s.len() / l).max(1)).map(move |k| (i, k * l))).collect();
    let mut total = 0.0f64;
    for chunk in crops.chunks(EVAL_BATCH) {
        let batch = batch_of(cfg, chunk.iter().map(|&(i, start)| songs[i].crop(start, l)).collect())?;
        let f = forward(store, cfg, &batch, false)?;
        total += f.g.value(f.loss).data[0] as f64 * chunk.len() as f64;
    }
    Ok(total / crops.len() as f64)
}

/// Fine-tunes the whole network on random crops of the selected training
/// songs, validating L1 on fixed chunks of `valid`.
pub fn run_finetune(
    model: &ModelConfig,
    stage: &StageConfig,
    train: &[FinetuneSong],
    valid: &[FinetuneSong],
    start: Start,
    opts: &mut RunOptions,
) -> Result<TrainOutcome, TrainError> {
    model.validate()?;
    stage.validate()?;
    if stage.stage != Stage::Finetune {
        return Err(TrainError::Config("stage config is not a fine-tuning config".into()));
    }
    check_songs(model, train)?;
    check_songs(model, valid)?;
    let subset = select_subset(train.len(), stage.data_ratio, stage.seed)?;
    let songs: Vec<&FinetuneSong> = subset.iter().map(|&i| &train[i]).collect();
    let out_dir = opts.out_dir.clone();
    if let Some(d) = &out_dir {
        write_snapshots(d, model, stage)?;
    }
    let mut st = initial_state(model, stage, start, out_dir.as_deref())?;
    let sampler = BatchSampler::new(songs.len(), stage.batch_size, stage.seed)?;
    let mut tracker = Tracker::new(false, &st.log);

    let validate = |st: &mut crate::run::State, tracker: &mut Tracker, opts: &mut RunOptions| -> Result<(), TrainError> {
        if valid.is_empty() {
            return Ok(());
        }
        let l1 = evaluate_l1(&st.store, model, valid)?;
        let best = tracker.observe(l1);
        let r = Record::Validation { step: st.step, metric: "l1".into(), value: l1, best };
        opts.emit(&r);
        st.log.push(r);
        if let (true, Some(d)) = (best, &out_dir) {
            checkpoint_of(model, &st.store, None, st.step).save(d.join(BEST))?;
        }
        Ok(())
    };
    if st.step == 0 {
        validate(&mut st, &mut tracker, opts)?;
    }

    let make = |s: u64| -> Result<Batch, TrainError> {
        let crops = sampler
            .batch(s)
            .into_iter()
            .enumerate()
            .map(|(b, i)| songs[i].crop(crop_start(stage.seed, s, b, songs[i].len(), model.clip_len), model.clip_len))
            .collect();
        batch_of(model, crops)
    };
    let mut stopped_early = false;
    drive(st.step..stage.steps, !opts.deterministic, make, |s, batch| {
        let step = s + 1;
        let lr = stage.schedule.lr_at(step);
        let (loss, per_source, grads, stats) = {
            let f = forward(&st.store, model, &batch, true)?;
            let loss_v = f.g.value(f.loss).data[0] as f64;
            if !loss_v.is_finite() {
                return Err(TrainError::NonFinite { step, detail: format!("loss is {loss_v}") });
            }
            let per_source = per_source_l1(f.g.value(f.wav), &batch.stems);
            let mut grads = f.g.backward(f.loss)?;
            let grads = f.vars.collect(&f.g, &mut grads);
            (loss_v, per_source, grads, f.stats)
        };
        if let StepOutcome::SkippedNonFinite { param } = st.opt.step(&mut st.store, &grads, lr, stage.grad_clip)? {
            return Err(TrainError::NonFinite { step, detail: format!("gradient of {param}") });
        }
        update_running_stats(&mut st.store, &stats, BN_MOMENTUM);
        st.step = step;
        let r = Record::Finetune { step, lr, loss, per_source_l1: per_source };
        opts.emit(&r);
        st.log.push(r);
        if step % stage.validate_every == 0 || step == stage.steps {
            validate(&mut st, &mut tracker, opts)?;
        }
        if let Some(d) = &out_dir {
            if step % stage.checkpoint_every == 0 || step == stage.steps {
                checkpoint_of(model, &st.store, Some(&st.opt), step).save(d.join(LATEST))?;
                st.log.save(d.join(LOG))?;
            }
        }
        if stage.early_stop && tracker.since_best >= stage.patience {
            stopped_early = true;
            return Ok(false);
        }
        Ok(true)
    })?;
    if let Some(d) = &out_dir {
        checkpoint_of(model, &st.store, Some(&st.opt), st.step).save(d.join(LATEST))?;
        st.log.save(d.join(LOG))?;
        if valid.is_empty() {
            checkpoint_of(model, &st.store, None, st.step).save(d.join(BEST))?;
        }
    }
    Ok(TrainOutcome { params: st.store, optimizer: st.opt, step: st.step, log: st.log, best: tracker.best, stopped_early })
}
