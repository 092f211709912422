use std::sync::Arc;

use ndarray::Array2;
use pachubert_autodiff::gradcheck::check;
use pachubert_autodiff::Tensor;
use pachubert_core::audio::AudioClip;
use pachubert_core::dsp::{istft, stft};
use pachubert_model::istft_op::MaskedIstft;
use pachubert_model::network::init_params;
use pachubert_model::separate::model_spectrogram;
use pachubert_model::{apply_masks, separate, separate_clips, synthesis_plan, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_clip(channels: usize, len: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = Array2::from_shape_fn((channels, len), |_| rng.gen_range(-0.5f32..0.5));
    AudioClip { samples, sample_rate: 44_100 }
}

fn max_diff(a: &AudioClip, b: &AudioClip) -> f32 {
    a.samples.iter().zip(b.samples.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn mask_len(cfg: &ModelConfig) -> usize {
    cfg.channels * cfg.frames * cfg.freq_bins
}

#[test]
fn identity_mask_reproduces_the_resynthesis() {
    let cfg = ModelConfig::toy();
    let mix = noise_clip(2, cfg.clip_len, 1);
    let spec = model_spectrogram(&cfg, &mix).unwrap();
    let plan = synthesis_plan(&cfg);
    let per = mask_len(&cfg);
    let mut masks = vec![0.0f32; cfg.n_sources * per];
    masks[per..2 * per].iter_mut().for_each(|m| *m = 1.0);
    let out = apply_masks(&spec, &masks, cfg.n_sources, &plan, cfg.clip_len);
    let reference = istft(&stft(&mix, cfg.window, cfg.hop, None).unwrap(), cfg.clip_len).unwrap();
    assert!(max_diff(&out[1], &reference) <= 1e-5);
    for s in [0, 2, 3] {
        assert!(out[s].samples.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn half_masks_split_the_mixture_evenly() {
    let cfg = ModelConfig { n_sources: 2, ..ModelConfig::toy() };
    let mix = noise_clip(2, cfg.clip_len, 2);
    let spec = model_spectrogram(&cfg, &mix).unwrap();
    let masks = vec![0.5f32; 2 * mask_len(&cfg)];
    let out = apply_masks(&spec, &masks, 2, &synthesis_plan(&cfg), cfg.clip_len);
    assert_eq!(out[0].samples, out[1].samples);
    for (a, m) in out[0].samples.iter().zip(mix.samples.iter()) {
        assert!((a - 0.5 * m).abs() <= 1e-5);
    }
}

#[test]
fn partition_masks_reconstruct_the_mixture() {
    let cfg = ModelConfig::toy();
    let mix = noise_clip(2, cfg.clip_len, 3);
    let spec = model_spectrogram(&cfg, &mix).unwrap();
    let per = mask_len(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut masks = vec![0.0f32; cfg.n_sources * per];
    for i in 0..per {
        let raw: Vec<f32> = (0..cfg.n_sources).map(|_| rng.gen_range(0.01f32..1.0)).collect();
        let total: f32 = raw.iter().sum();
        for (s, r) in raw.iter().enumerate() {
            masks[s * per + i] = r / total;
        }
    }
    let out = apply_masks(&spec, &masks, cfg.n_sources, &synthesis_plan(&cfg), cfg.clip_len);
    for (i, m) in mix.samples.iter().enumerate() {
        let sum: f32 = out.iter().map(|o| o.samples.as_slice().unwrap()[i]).sum();
        assert!((sum - m).abs() <= 1e-5, "sample {i}: {sum} vs {m}");
    }
}

#[test]
fn masked_istft_op_matches_finite_differences() {
    let cfg = ModelConfig { n_sources: 2, window: 32, hop: 8, freq_bins: 16, frames: 12, clip_len: 96, ..ModelConfig::toy() };
    assert_eq!(cfg.valid_frames(), 12);
    let a = noise_clip(2, cfg.clip_len, 5);
    let b = noise_clip(2, cfg.clip_len, 6);
    let specs = [model_spectrogram(&cfg, &a).unwrap(), model_spectrogram(&cfg, &b).unwrap()];
    let refs: Vec<_> = specs.iter().collect();
    let op = Arc::new(MaskedIstft::new(synthesis_plan(&cfg), &refs, cfg.clip_len));
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::<f64>::uniform(&[2, 2, 2, cfg.frames, cfg.freq_bins], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[2, 2, 2, cfg.clip_len], 1.0, &mut rng);
        let report = check(&[m], 1e-4, |g, v| {
            let y = g.custom(op.clone(), &[v[0]])?;
            let w = g.constant(w.clone());
            let p = g.mul(y, w)?;
            g.sum_all(p)
        })
        .unwrap();
        assert!(report[0].rel_error <= 1e-4, "seed {seed}: {}", report[0].rel_error);
    }
}

#[test]
fn three_second_clip_gives_four_full_length_stems() {
    let cfg = ModelConfig::toy();
    let store = init_params(&cfg, 7);
    let mix = noise_clip(2, 132_300, 8);
    let stems = separate(&store, &cfg, &mix).unwrap();
    assert_eq!(stems.len(), 4);
    for s in &stems {
        assert_eq!((s.channels(), s.len()), (2, 132_300));
        assert!(s.samples.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn single_chunk_matches_direct_separation() {
    let cfg = ModelConfig::toy();
    let store = init_params(&cfg, 9);
    let mix = noise_clip(2, cfg.clip_len, 10);
    let chunked = separate(&store, &cfg, &mix).unwrap();
    let direct = separate_clips(&store, &cfg, std::slice::from_ref(&mix)).unwrap();
    for (a, b) in chunked.iter().zip(&direct[0]) {
        assert!(max_diff(a, b) <= 1e-6);
    }
}

#[test]
fn mono_input_is_accepted() {
    let cfg = ModelConfig::toy();
    let store = init_params(&cfg, 11);
    let stems = separate(&store, &cfg, &noise_clip(1, 2000, 12)).unwrap();
    assert!(stems.iter().all(|s| s.channels() == 2 && s.len() == 2000));
    let bad = AudioClip { sample_rate: 22_050, ..noise_clip(2, 2000, 13) };
    assert!(separate(&store, &cfg, &bad).is_err());
}
