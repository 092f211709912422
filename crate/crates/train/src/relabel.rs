//! Second-iteration labels from intermediate transformer activations.

use ndarray::{concatenate, Array2, Axis};
use pachubert_autodiff::{Graph, ParamStore, Tensor};
use pachubert_core::dsp::Spectrogram;
use pachubert_core::labels::{kmeans_assign, relabel_from_latents, subsample_rows, FitReport, KMeansModel, PatchLabelSequence};
use pachubert_model::network::{input_features, stack, BOTTLENECK, ENCODER};
use pachubert_model::{ModelConfig, Net};

use crate::TrainError;

const EVAL_BATCH: usize = 8;

/// Unmasked eval-mode outputs of transformer block `layer` (1-based), one
/// `[n_tokens, h]` matrix per clip.
pub fn collect_latents(store: &ParamStore<f32>, cfg: &ModelConfig, specs: &[Spectrogram], layer: usize) -> Result<Vec<Array2<f32>>, TrainError> {
    if !(1..=cfg.n_blocks).contains(&layer) {
        return Err(TrainError::Config(format!("layer {layer} outside 1..={}", cfg.n_blocks)));
    }
    let (n, h) = (cfg.n_tokens(), cfg.hidden);
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let vars = store.bind_where(&mut g, |name| name.starts_with(ENCODER) || name.starts_with(BOTTLENECK));
        let mut net = Net::new(&mut g, &vars, store, cfg, false);
        let feats: Vec<Tensor<f32>> = chunk.iter().map(input_features).collect();
        let x = net.g.constant(stack(&feats));
        let (tokens, _) = net.encode(x)?;
        let b = net.bottleneck(tokens, None)?;
        let v = g.value(b.layers[layer - 1]);
        for item in v.data.chunks(n * h) {
            out.push(Array2::from_shape_vec((n, h), item.to_vec()).expect("token block"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RelabelOutcome {
    pub model: KMeansModel,
    pub report: FitReport,
    pub labels: Vec<PatchLabelSequence>,
}

/// Clusters layer-`layer` token latents of every clip into `k` classes and
/// relabels the clips. At most `max_rows` latents (seeded subsample) are
/// used for fitting; every token is assigned.
pub fn run_relabel(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    specs: &[Spectrogram],
    layer: usize,
    k: usize,
    seed: u64,
    max_rows: Option<usize>,
) -> Result<RelabelOutcome, TrainError> {
    if specs.is_empty() {
        return Err(TrainError::Config("no clips to relabel".into()));
    }
    let latents = collect_latents(store, cfg, specs, layer)?;
    let views: Vec<_> = latents.iter().map(|a| a.view()).collect();
    let all = concatenate(Axis(0), &views).expect("equal widths");
    let fit_rows = match max_rows {
        Some(m) if m < all.nrows() => subsample_rows(all.view(), m, seed),
        _ => all,
    };
    let (model, report) = relabel_from_latents(fit_rows.view(), k, seed)?;
    let grid = cfg.grid();
    let labels = latents
        .iter()
        .map(|a| Ok(PatchLabelSequence::from_flat(&kmeans_assign(&model, a.view())?, grid, k)))
        .collect::<Result<_, TrainError>>()?;
    Ok(RelabelOutcome { model, report, labels })
}
