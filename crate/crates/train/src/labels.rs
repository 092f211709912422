//! First-iteration labels: primitive cues, patch features and K-means.

use ndarray::{concatenate, Array2, Axis};
use pachubert_core::audio::AudioClip;
use pachubert_core::labels::{feature_matrix, kmeans_assign, kmeans_fit, patchify, subsample_rows, KMeansOptions, PatchLabelSequence};
use pachubert_core::primitives::{extract_all, PrimitiveConfig};
use pachubert_model::separate::model_spectrogram;
use pachubert_model::ModelConfig;

use crate::relabel::RelabelOutcome;
use crate::TrainError;

/// Patch features of one model-sized clip, `[n_tokens, D]`.
pub fn clip_features(cfg: &ModelConfig, clip: &AudioClip, prim: &PrimitiveConfig) -> Result<Array2<f32>, TrainError> {
    let spec = model_spectrogram(cfg, clip)?;
    let cues = extract_all(&spec, prim).map_err(pachubert_core::labels::LabelError::from)?;
    Ok(feature_matrix(&patchify(&cues, cfg.patch_t, cfg.patch_f)?))
}

/// Fits a `k`-cluster codebook on the patch features of `clips` (at most
/// `max_rows` rows, seeded subsample) and labels every clip.
pub fn fit_initial_labels(
    cfg: &ModelConfig,
    clips: &[AudioClip],
    prim: &PrimitiveConfig,
    k: usize,
    seed: u64,
    max_rows: Option<usize>,
) -> Result<RelabelOutcome, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::Config("no clips to label".into()));
    }
    let feats = clips.iter().map(|c| clip_features(cfg, c, prim)).collect::<Result<Vec<_>, _>>()?;
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let all = concatenate(Axis(0), &views).expect("equal widths");
    let rows = match max_rows {
        Some(m) if m < all.nrows() => subsample_rows(all.view(), m, seed),
        _ => all,
    };
    let (model, report) = kmeans_fit(rows.view(), &KMeansOptions::new(k, seed))?;
    let labels = feats
        .iter()
        .map(|f| Ok(PatchLabelSequence::from_flat(&kmeans_assign(&model, f.view())?, cfg.grid(), k)))
        .collect::<Result<_, TrainError>>()?;
    Ok(RelabelOutcome { model, report, labels })
}
