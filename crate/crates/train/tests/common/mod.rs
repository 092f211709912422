#![allow(dead_code)]

use pachubert_core::primitives::PrimitiveConfig;
use pachubert_core::synth::{synth_song, tone_click_song};
use pachubert_model::ModelConfig;
use pachubert_train::{fit_initial_labels, FinetuneSong, PretrainExample};

/// Two toy clips labelled with a K = 8 codebook fitted on them.
pub fn toy_pretrain_set(cfg: &ModelConfig) -> Vec<PretrainExample> {
    let clips: Vec<_> = (0..2).map(|i| synth_song(11, i, cfg.clip_len, cfg.sample_rate).mixture).collect();
    let fit = fit_initial_labels(cfg, &clips, &PrimitiveConfig::default(), cfg.classes, 5, None).unwrap();
    clips.iter().zip(&fit.labels).map(|(c, l)| PretrainExample::new(cfg, c, l).unwrap()).collect()
}

pub fn tone_click_config() -> ModelConfig {
    ModelConfig { n_sources: 2, ..ModelConfig::toy() }
}

pub const CLICK_PERIOD: usize = 240;

pub fn tone_click(cfg: &ModelConfig) -> FinetuneSong {
    let song = tone_click_song(cfg.clip_len, cfg.sample_rate, CLICK_PERIOD);
    FinetuneSong::new(song.mixture, song.stems, cfg.channels).unwrap()
}
