//! Mask-based separation of whole recordings.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use pachubert_autodiff::{Float, Graph, ParamStore, Tensor, Var};
use pachubert_core::audio::AudioClip;
use pachubert_core::dsp::{stft, IstftPlan, Spectrogram};

use crate::config::ModelConfig;
use crate::istft_op::MaskedIstft;
use crate::network::{input_features, stack, Net, BOTTLENECK, DECODER, ENCODER};
use crate::ModelError;

/// Clips separated per forward pass when chunking long audio.
const CHUNK_BATCH: usize = 16;

/// STFT at the model geometry; the clip must be exactly `clip_len` long
/// with the model's channel count.
pub fn model_spectrogram(cfg: &ModelConfig, clip: &AudioClip) -> Result<Spectrogram, ModelError> {
    if clip.len() != cfg.clip_len || clip.channels() != cfg.channels {
        return Err(ModelError::Shape(format!(
            "clip is {} x {}, model expects {} x {}",
            clip.channels(),
            clip.len(),
            cfg.channels,
            cfg.clip_len
        )));
    }
    Ok(stft(clip, cfg.window, cfg.hop, Some(cfg.frames))?)
}

pub fn synthesis_plan(cfg: &ModelConfig) -> Arc<IstftPlan> {
    Arc::new(IstftPlan::new(cfg.window, cfg.hop, cfg.valid_frames()))
}

/// Builds encoder, bottleneck (unmasked) and decoder followed by masked
/// resynthesis. Returns the masks `[N, S, C, T, F]` and waveforms
/// `[N, S, C, L]`.
pub fn separation_forward<T: Float>(net: &mut Net<'_, T>, specs: &[Spectrogram], plan: &Arc<IstftPlan>) -> Result<(Var, Var), ModelError> {
    let feats: Vec<Tensor<T>> = specs.iter().map(input_features).collect();
    let x = net.g.constant(stack(&feats));
    let (tokens, skips) = net.encode(x)?;
    let bott = net.bottleneck(tokens, None)?;
    let masks = net.decode(bott.out, &skips)?;
    let refs: Vec<&Spectrogram> = specs.iter().collect();
    let op = Arc::new(MaskedIstft::new(plan.clone(), &refs, net.cfg.clip_len));
    let wav = net.g.custom(op, &[masks])?;
    Ok((masks, wav))
}

/// Fine-tuning loss: L1 against target stems `[N, S, C, L]`, summed over
/// sources and averaged over batch, channels and samples.
pub fn stem_l1<T: Float>(g: &mut Graph<T>, wav: Var, stems: Tensor<T>) -> Result<Var, ModelError> {
    let sources = g.shape(wav).get(1).copied().unwrap_or(1);
    let t = g.constant(stems);
    let l = g.l1_loss(wav, t)?;
    Ok(g.scale(l, T::of(sources as f64))?)
}

/// Applies fixed masks `[S, C, T, F]` to a mixture spectrogram and
/// resynthesises `out_len` samples per source.
pub fn apply_masks(spec: &Spectrogram, masks: &[f32], n_sources: usize, plan: &IstftPlan, out_len: usize) -> Vec<AudioClip> {
    let (c, t, f) = spec.bins.dim();
    assert_eq!(masks.len(), n_sources * c * t * f);
    (0..n_sources)
        .map(|s| {
            let mut samples = Array2::zeros((c, out_len));
            for ch in 0..c {
                let base = (s * c + ch) * t * f;
                let frames: Vec<Complex64> = (0..plan.frames * f)
                    .map(|i| {
                        let z = spec.bins[[ch, i / f, i % f]];
                        Complex64::new(z.re as f64, z.im as f64) * masks[base + i] as f64
                    })
                    .collect();
                for (j, v) in plan.synthesize(&frames, out_len).into_iter().enumerate() {
                    samples[[ch, j]] = v as f32;
                }
            }
            AudioClip { samples, sample_rate: spec.sample_rate }
        })
        .collect()
}

/// Eval-mode separation of model-sized clips, batched.
pub fn separate_clips(store: &ParamStore<f32>, cfg: &ModelConfig, clips: &[AudioClip]) -> Result<Vec<Vec<AudioClip>>, ModelError> {
    let plan = synthesis_plan(cfg);
    let mut out = Vec::with_capacity(clips.len());
    for batch in clips.chunks(CHUNK_BATCH) {
        let specs = batch.iter().map(|c| model_spectrogram(cfg, c)).collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::<f32>::new();
        let vars = store.bind_where(&mut g, |n| n.starts_with(ENCODER) || n.starts_with(BOTTLENECK) || n.starts_with(DECODER));
        let mut net = Net::new(&mut g, &vars, store, cfg, false);
        let (_, wav) = separation_forward(&mut net, &specs, &plan)?;
        let w = g.value(wav);
        let (s, c, l) = (cfg.n_sources, cfg.channels, cfg.clip_len);
        for b in 0..batch.len() {
            out.push(
                (0..s)
                    .map(|si| {
                        let base = (b * s + si) * c * l;
                        let samples = Array2::from_shape_vec((c, l), w.data[base..base + c * l].to_vec()).unwrap();
                        AudioClip { samples, sample_rate: cfg.sample_rate }
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Chunk starts for 50 % overlap covering `len` samples.
pub fn chunk_starts(len: usize, chunk: usize) -> Vec<usize> {
    let hop = (chunk / 2).max(1);
    if len <= chunk {
        return vec![0];
    }
    let n = (len - chunk).div_ceil(hop) + 1;
    (0..n).map(|k| k * hop).collect()
}

/// Triangular cross-fade weight of sample `i` in a chunk; the first and
/// last chunks keep full weight on their outer halves.
fn fade(i: usize, chunk: usize, first: bool, last: bool) -> f64 {
    let half = chunk as f64 / 2.0;
    let pos = i as f64 + 0.5;
    if (first && pos < half) || (last && pos >= half) {
        return 1.0;
    }
    1.0 - (pos - half).abs() / half
}

/// Separates a recording of any length into `n_sources` clips. Audio is
/// converted to the model's channel count, cut into model-sized chunks with
/// 50 % overlap and recombined with triangular cross-fades.
pub fn separate(store: &ParamStore<f32>, cfg: &ModelConfig, mixture: &AudioClip) -> Result<Vec<AudioClip>, ModelError> {
    if mixture.sample_rate != cfg.sample_rate {
        return Err(ModelError::Shape(format!("sample rate {} differs from the model's {}", mixture.sample_rate, cfg.sample_rate)));
    }
    let mix = mixture.clone().with_channels(cfg.channels)?;
    let (len, chunk) = (mix.len(), cfg.clip_len);
    let starts = chunk_starts(len, chunk);
    let pieces: Vec<AudioClip> = starts.iter().map(|&s| mix.slice_padded(s, chunk)).collect();
    let separated = separate_clips(store, cfg, &pieces)?;
    let mut acc = vec![Array2::<f64>::zeros((cfg.channels, len)); cfg.n_sources];
    let mut wsum = vec![0.0f64; len];
    for (k, (&start, srcs)) in starts.iter().zip(&separated).enumerate() {
        let (first, last) = (k == 0, k + 1 == starts.len());
        for i in 0..chunk.min(len - start) {
            let w = fade(i, chunk, first, last);
            wsum[start + i] += w;
            for (a, src) in acc.iter_mut().zip(srcs) {
                for c in 0..cfg.channels {
                    a[[c, start + i]] += w * src.samples[[c, i]] as f64;
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| {
            let samples = Array2::from_shape_fn((cfg.channels, len), |(c, i)| (a[[c, i]] / wsum[i]) as f32);
            AudioClip { samples, sample_rate: cfg.sample_rate }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_the_signal() {
        assert_eq!(chunk_starts(500, 960), vec![0]);
        assert_eq!(chunk_starts(960, 960), vec![0]);
        assert_eq!(chunk_starts(961, 960), vec![0, 480]);
        let s = chunk_starts(132_300, 960);
        assert!(*s.last().unwrap() + 960 >= 132_300);
    }

    #[test]
    fn interior_fades_sum_to_one() {
        for i in 0..480 {
            let a = fade(i + 480, 960, false, false);
            let b = fade(i, 960, false, false);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
