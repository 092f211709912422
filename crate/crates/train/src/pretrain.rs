//! Masked-unit pretraining.

use pachubert_autodiff::{BatchStats, Binding, Graph, ParamStore, StepOutcome, Tensor, Var};
use pachubert_core::audio::AudioClip;
use pachubert_core::eval::argmax;
use pachubert_core::labels::PatchLabelSequence;
use pachubert_model::network::{input_features, stack, update_running_stats, BN_MOMENTUM, DECODER};
use pachubert_model::separate::model_spectrogram;
use pachubert_model::{make_mask_plan, ModelConfig, Net};

use crate::config::{Stage, StageConfig};
use crate::data::{derive_seed, drive, stream, BatchSampler};
use crate::log::Record;
use crate::run::{checkpoint_of, initial_state, write_snapshots, RunOptions, Start, TrainOutcome, Tracker, BEST, LATEST, LOG};
use crate::TrainError;

/// Clips per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

/// Input features of one clip with its token labels.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    /// `[C, T, F]`.
    pub features: Tensor<f32>,
    /// Time-major, one per token.
    pub labels: Vec<usize>,
}

impl PretrainExample {
    pub fn new(cfg: &ModelConfig, clip: &AudioClip, labels: &PatchLabelSequence) -> Result<Self, TrainError> {
        if labels.labels.dim() != cfg.grid() {
            return Err(TrainError::LabelMismatch(format!("label grid {:?}, model grid {:?}", labels.labels.dim(), cfg.grid())));
        }
        if labels.k != cfg.classes {
            return Err(TrainError::LabelMismatch(format!("labels have K = {}, model has K = {}", labels.k, cfg.classes)));
        }
        let spec = model_spectrogram(cfg, clip)?;
        Ok(Self { features: input_features(&spec), labels: labels.flat() })
    }
}

struct Batch {
    features: Tensor<f32>,
    labels: Vec<usize>,
    mask: Vec<bool>,
}

fn batch_of(items: &[&PretrainExample], masks: Vec<Vec<bool>>) -> Batch {
    let feats: Vec<Tensor<f32>> = items.iter().map(|e| e.features.clone()).collect();
    Batch { features: stack(&feats), labels: items.iter().flat_map(|e| e.labels.iter().copied()).collect(), mask: masks.concat() }
}

struct Forward {
    g: Graph<f32>,
    vars: Binding,
    loss: Var,
    logits: Var,
    stats: Vec<(String, BatchStats)>,
}

fn forward(store: &ParamStore<f32>, cfg: &ModelConfig, batch: &Batch, train: bool) -> Result<Forward, TrainError> {
    let mut g = Graph::new();
    let vars = store.bind_where(&mut g, |n| !n.starts_with(DECODER));
    let (loss, logits, stats) = {
        let mut net = Net::new(&mut g, &vars, store, cfg, train);
        let x = net.g.constant(batch.features.clone());
        let (tokens, _) = net.encode(x)?;
        let out = net.bottleneck(tokens, Some(&batch.mask))?;
        let logits = net.unit_logits(out.out)?;
        let loss = net.unit_loss(logits, &batch.labels, &batch.mask)?;
        (loss, logits, std::mem::take(&mut net.stats))
    };
    Ok(Forward { g, vars, loss, logits, stats })
}

/// Correct and total masked rows.
fn hits(logits: &Tensor<f32>, labels: &[usize], mask: &[bool]) -> (usize, usize) {
    let k = logits.shape[1];
    let rows = logits.data.chunks(k);
    let mut good = 0;
    let mut total = 0;
    for ((row, &l), &m) in rows.zip(labels).zip(mask) {
        if m {
            total += 1;
            good += usize::from(argmax(row) == l);
        }
    }
    (good, total)
}

/// Eval-mode masked accuracy with masks fixed by `seed` and clip index,
/// pooled over all masked tokens.
pub fn evaluate_masked_accuracy(store: &ParamStore<f32>, cfg: &ModelConfig, examples: &[PretrainExample], seed: u64) -> Result<f64, TrainError> {
    let n = cfg.n_tokens();
    let (mut good, mut total) = (0, 0);
    for (c, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let masks = (0..chunk.len())
            .map(|i| Ok(make_mask_plan(n, cfg.mask_p, cfg.mask_l, derive_seed(seed, &[stream::VALID_MASK, (c * EVAL_BATCH + i) as u64]))?.as_flags()))
            .collect::<Result<Vec<_>, TrainError>>()?;
        let refs: Vec<&PretrainExample> = chunk.iter().collect();
        let batch = batch_of(&refs, masks);
        let f = forward(store, cfg, &batch, false)?;
        let (a, b) = hits(f.g.value(f.logits), &batch.labels, &batch.mask);
        good += a;
        total += b;
    }
    if total == 0 {
        return Err(TrainError::Config("no examples to evaluate".into()));
    }
    Ok(good as f64 / total as f64)
}

/// Masked-unit pretraining with AdamW and periodic validation accuracy.
/// Each step draws a fresh mask plan per clip.
pub fn run_pretrain(
    model: &ModelConfig,
    stage: &StageConfig,
    train: &[PretrainExample],
    valid: &[PretrainExample],
    start: Start,
    opts: &mut RunOptions,
) -> Result<TrainOutcome, TrainError> {
    model.validate()?;
    stage.validate()?;
    if stage.stage != Stage::Pretrain {
        return Err(TrainError::Config("stage config is not a pretraining config".into()));
    }
    for e in train.iter().chain(valid) {
        if e.labels.len() != model.n_tokens() || e.features.shape != [model.channels, model.frames, model.freq_bins] {
            return Err(TrainError::LabelMismatch(format!("example does not match the model geometry ({} labels)", e.labels.len())));
        }
        if let Some(&bad) = e.labels.iter().find(|&&l| l >= model.classes) {
            return Err(TrainError::LabelMismatch(format!("label {bad} outside 0..{}", model.classes)));
        }
    }
    let out_dir = opts.out_dir.clone();
    if let Some(d) = &out_dir {
        write_snapshots(d, model, stage)?;
    }
    let mut st = initial_state(model, stage, start, out_dir.as_deref())?;
    let sampler = BatchSampler::new(train.len(), stage.batch_size, stage.seed)?;
    let mut tracker = Tracker::new(true, &st.log);
    let n = model.n_tokens();

    let validate = |st: &mut crate::run::State, tracker: &mut Tracker, opts: &mut RunOptions| -> Result<(), TrainError> {
        if valid.is_empty() {
            return Ok(());
        }
        let acc = evaluate_masked_accuracy(&st.store, model, valid, stage.seed)?;
        let best = tracker.observe(acc);
        let r = Record::Validation { step: st.step, metric: "masked_accuracy".into(), value: acc, best };
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
        let idx = sampler.batch(s);
        let masks = (0..idx.len())
            .map(|b| Ok(make_mask_plan(n, model.mask_p, model.mask_l, derive_seed(stage.seed, &[stream::MASK, s, b as u64]))?.as_flags()))
            .collect::<Result<Vec<_>, TrainError>>()?;
        let items: Vec<&PretrainExample> = idx.iter().map(|&i| &train[i]).collect();
        Ok(batch_of(&items, masks))
    };
    let mut stopped_early = false;
    drive(st.step..stage.steps, !opts.deterministic, make, |s, batch| {
        let step = s + 1;
        let lr = stage.schedule.lr_at(step);
        let (loss, acc, grads, stats) = {
            let f = forward(&st.store, model, &batch, true)?;
            let loss_v = f.g.value(f.loss).data[0] as f64;
            if !loss_v.is_finite() {
                return Err(TrainError::NonFinite { step, detail: format!("loss is {loss_v}") });
            }
            let (a, b) = hits(f.g.value(f.logits), &batch.labels, &batch.mask);
            let mut grads = f.g.backward(f.loss)?;
            let grads = f.vars.collect(&f.g, &mut grads);
            (loss_v, a as f64 / b as f64, grads, f.stats)
        };
        if let StepOutcome::SkippedNonFinite { param } = st.opt.step(&mut st.store, &grads, lr, stage.grad_clip)? {
            return Err(TrainError::NonFinite { step, detail: format!("gradient of {param}") });
        }
        update_running_stats(&mut st.store, &stats, BN_MOMENTUM);
        st.step = step;
        let r = Record::Pretrain { step, lr, loss, masked_accuracy: acc };
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
