//! Deterministic synthetic multitrack corpus: tones, clicks, periodic loops
//! and noise, mixed to stereo.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip, AudioError, ClipManifest, ManifestEntry, Split, WavFormat};

pub const SOURCES: [&str; 4] = ["vocals", "drums", "bass", "other"];

/// Sustained harmonic tone with `1/h` partial amplitudes.
pub fn harmonic_tone(len: usize, sample_rate: u32, f0: f64, harmonics: usize, amp: f64) -> Vec<f32> {
    let sr = sample_rate as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let v: f64 = (1..=harmonics).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum();
            (amp * v) as f32
        })
        .collect()
}

/// Unit impulses every `period` samples, starting at `offset`.
pub fn click_train(len: usize, period: usize, offset: usize, amp: f32) -> Vec<f32> {
    (0..len).map(|i| if i >= offset && (i - offset).is_multiple_of(period) { amp } else { 0.0 }).collect()
}

fn pan(mono: &[f32], position: f64, sample_rate: u32) -> AudioClip {
    // constant-power pan, position in [-1, 1]
    let theta = (position + 1.0) * PI / 4.0;
    let gains = [theta.cos() as f32, theta.sin() as f32];
    let samples = Array2::from_shape_fn((2, mono.len()), |(c, i)| mono[i] * gains[c]);
    AudioClip { samples, sample_rate }
}

/// A mixture and its stems; the mixture is the exact sum of the stems.
#[derive(Debug, Clone)]
pub struct SynthSong {
    pub mixture: AudioClip,
    pub stems: Vec<AudioClip>,
}

fn mix(stems: Vec<AudioClip>) -> SynthSong {
    let mut mixture = AudioClip::zeros(stems[0].channels(), stems[0].len(), stems[0].sample_rate);
    for s in &stems {
        mixture.samples += &s.samples;
    }
    SynthSong { mixture, stems }
}

fn song_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64)
}

/// Four-source song in [`SOURCES`] order.
pub fn synth_song(seed: u64, index: usize, len: usize, sample_rate: u32) -> SynthSong {
    let mut rng = song_rng(seed, index);
    let sr = sample_rate as f64;
    let beat = (sr * rng.gen_range(0.22..0.32)) as usize;

    // vocals: harmonic notes with vibrato and rests
    let note_len = beat * 2;
    let scale = [392.0, 440.0, 493.9, 523.3, 587.3, 659.3, 784.0];
    let notes: Vec<Option<f64>> = (0..len / note_len + 1)
        .map(|_| if rng.gen_bool(0.8) { Some(scale[rng.gen_range(0..scale.len())]) } else { None })
        .collect();
    let mut phase = 0.0f64;
    let mut vocals = vec![0.0f32; len];
    for (i, v) in vocals.iter_mut().enumerate() {
        let n = i / note_len;
        let Some(f0) = notes[n] else { continue };
        let pos = (i % note_len) as f64 / note_len as f64;
        let env = (pos * 20.0).min(1.0) * ((1.0 - pos) * 10.0).min(1.0);
        let f = f0 * (1.0 + 0.01 * (2.0 * PI * 5.5 * i as f64 / sr).sin());
        phase += 2.0 * PI * f / sr;
        let s: f64 = (1..=6).map(|h| (phase * h as f64).sin() * 0.7f64.powi(h - 1)).sum();
        *v = (0.25 * env * s) as f32;
    }

    // drums: broadband noise hits, a long one on beats and a short one off-beat
    let mut drums = vec![0.0f32; len];
    let snare_noise: Vec<f64> = (0..beat).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hat_noise: Vec<f64> = (0..beat).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for (i, d) in drums.iter_mut().enumerate() {
        let k = i % beat;
        let snare = snare_noise[k] * (-(k as f64) / sr * 30.0).exp();
        let h = (i + beat / 2) % beat;
        let hat = hat_noise[h] * (-(h as f64) / sr * 200.0).exp();
        *d = (0.35 * snare + 0.2 * hat) as f32;
    }

    // bass: sustained low sines, one note per bar
    let bar = beat * 4;
    let roots = [82.4, 98.0, 110.0, 123.5, 146.8];
    let bass_notes: Vec<f64> = (0..len / bar + 1).map(|_| roots[rng.gen_range(0..roots.len())]).collect();
    let mut bphase = 0.0f64;
    let bass: Vec<f32> = (0..len)
        .map(|i| {
            bphase += 2.0 * PI * bass_notes[i / bar] / sr;
            (0.3 * (bphase.sin() + 0.3 * (2.0 * bphase).sin())) as f32
        })
        .collect();

    // other: a repeating high-register arpeggio loop plus faint noise
    let loop_len = beat;
    let chord = [5274.0, 6271.9, 7040.0, 8372.0];
    let mut other = vec![0.0f32; len];
    for (i, o) in other.iter_mut().enumerate() {
        let step = (i / (loop_len / 2).max(1)) % chord.len();
        let t = (i % loop_len) as f64 / sr;
        let env = (-(((i % (loop_len / 2).max(1)) as f64) / sr) * 12.0).exp();
        *o = (0.12 * env * (2.0 * PI * chord[step] * t).sin() + 0.005 * rng.gen_range(-1.0..1.0)) as f32;
    }

    let positions = [0.0, rng.gen_range(-0.3..0.3), 0.0, rng.gen_range(-0.6..0.6)];
    let stems = [vocals, drums, bass, other].iter().zip(positions).map(|(m, p)| pan(m, p, sample_rate)).collect();
    mix(stems)
}

/// Short high-frequency bursts every `period` samples: 16 samples of
/// alternating sign with an exponential decay of 4 samples.
pub fn burst_train(len: usize, period: usize, offset: usize, amp: f32) -> Vec<f32> {
    let mut out = vec![0.0; len];
    for start in (offset..len).step_by(period.max(1)) {
        for (k, v) in out[start..].iter_mut().take(16).enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * amp * (-(k as f32) / 4.0).exp();
        }
    }
    out
}

/// Two-source stereo mixture: a 1 kHz tone and a train of short clicks
/// (see [`burst_train`]) every `click_period` samples.
pub fn tone_click_song(len: usize, sample_rate: u32, click_period: usize) -> SynthSong {
    let tone = harmonic_tone(len, sample_rate, 1000.0, 1, 0.3);
    let clicks = burst_train(len, click_period, 100 % click_period, 0.8);
    mix(vec![pan(&tone, 0.0, sample_rate), pan(&clicks, 0.0, sample_rate)])
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    /// One directory per song with `mixture.wav` and one WAV per source.
    pub song_dirs: Vec<PathBuf>,
    /// Fixed-length mixture clips of every song.
    pub clips: PathBuf,
    /// `song_dir<TAB>split` lines.
    pub songs: PathBuf,
}

/// Writes `n_songs` songs of `song_len` samples plus manifests. The last
/// `n_valid` songs are tagged `valid`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    n_songs: usize,
    n_valid: usize,
    song_len: usize,
    clip_len: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<CorpusLayout, AudioError> {
    if clip_len == 0 || clip_len > song_len {
        return Err(AudioError::TooShort { clip_len, len: song_len });
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut song_dirs = Vec::new();
    let mut manifest = ClipManifest::default();
    let mut songs_text = String::new();
    for idx in 0..n_songs {
        let song = synth_song(seed, idx, song_len, sample_rate);
        let sdir = dir.join(format!("song_{idx:03}"));
        std::fs::create_dir_all(&sdir)?;
        let mix_path = sdir.join("mixture.wav");
        write_wav(&song.mixture, &mix_path, WavFormat::Float32)?;
        for (stem, name) in song.stems.iter().zip(SOURCES) {
            write_wav(stem, sdir.join(format!("{name}.wav")), WavFormat::Float32)?;
        }
        let split = if idx + n_valid >= n_songs { Split::Valid } else { Split::Train };
        for start in (0..song_len / clip_len).map(|i| i * clip_len) {
            manifest.entries.push(ManifestEntry { path: mix_path.clone(), start, len: clip_len, split });
        }
        songs_text.push_str(&format!("{}\t{split}\n", sdir.display()));
        song_dirs.push(sdir);
    }
    let clips = dir.join("clips.tsv");
    let songs = dir.join("songs.tsv");
    std::fs::write(&clips, manifest.to_text())?;
    std::fs::write(&songs, songs_text)?;
    Ok(CorpusLayout { song_dirs, clips, songs })
}
