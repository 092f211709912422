//! Synthetic-signal oracles for the primitive separators and the label
//! pipeline.

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex32;
use pachubert_core::audio::AudioClip;
use pachubert_core::dsp::{stft, Spectrogram};
use pachubert_core::labels::{
    feature_matrix, kmeans_assign, kmeans_assign_with_inertia, kmeans_fit, label_clip, patchify, KMeansOptions,
};
use pachubert_core::primitives::{
    extract_all, ft2d, hpss, melody_salience, repet, repet_detailed, repet_sim, Ft2dVariant, PrimitiveConfig,
};
use pachubert_core::synth::{harmonic_tone, synth_song};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 44_100;
const LEN: usize = 3 * SR as usize;

fn stereo(mono: &[f32]) -> AudioClip {
    AudioClip::new(Array2::from_shape_fn((2, mono.len()), |(_, i)| mono[i]), SR).unwrap()
}

fn full_spec(clip: &AudioClip) -> Spectrogram {
    stft(clip, 2048, 441, Some(320)).unwrap()
}

fn spec_from_mags(mags: Array3<f32>) -> Spectrogram {
    let (_, t, f) = mags.dim();
    Spectrogram {
        bins: mags.mapv(|m| Complex32::new(m, 0.0)),
        frame_hop: 441,
        window_size: 2 * f,
        sample_rate: SR,
        valid_frames: t,
    }
}

#[test]
fn hpss_steady_tone_is_harmonic() {
    let tone: Vec<f32> = (0..LEN).map(|i| (0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / SR as f64).sin()) as f32).collect();
    let spec = full_spec(&stereo(&tone));
    let pair = hpss(&spec, 17, 17).unwrap();
    let bin = (1000.0 * 2048.0 / SR as f64).round() as usize;
    let bg = pair.background.slice(s![.., ..spec.valid_frames, bin]);
    let mean = bg.mean().unwrap();
    assert!(mean >= 0.9, "mean harmonic mask {mean}");
}

#[test]
fn hpss_click_is_percussive() {
    let mut x = vec![0.0f32; LEN];
    let at = 441 * 150;
    x[at] = 1.0;
    let spec = full_spec(&stereo(&x));
    let pair = hpss(&spec, 17, 17).unwrap();
    let frame = at / 441;
    let mean = pair.foreground.slice(s![.., frame, ..]).mean().unwrap();
    assert!(mean >= 0.9, "mean percussive mask {mean}");
}

fn periodic_background(t: usize, f: usize, period: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = Array2::from_shape_fn((period, f), |_| rng.gen_range(0.05f32..0.5));
    Array2::from_shape_fn((t, f), |(i, k)| pattern[[i % period, k]])
}

#[test]
fn repet_recovers_period_eight() {
    for seed in 0..5 {
        let bg = periodic_background(96, 64, 8, seed);
        let spec = spec_from_mags(bg.insert_axis(Axis(0)));
        let (_, periods) = repet_detailed(&spec, None).unwrap();
        assert_eq!(periods, vec![8], "seed {seed}");
    }
}

#[test]
fn repet_assigns_burst_to_foreground() {
    for seed in 0..5 {
        let mut mags = periodic_background(96, 64, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let burst_frame = 45;
        let burst: Vec<f32> = (0..64).map(|_| rng.gen_range(0.5f32..1.5)).collect();
        for (k, b) in burst.iter().enumerate() {
            mags[[burst_frame, k]] += b;
        }
        let pair = repet(&spec_from_mags(mags.clone().insert_axis(Axis(0))), None).unwrap();
        // foreground magnitude estimate is mask * mixture; credit at most the burst itself
        let num: f64 = burst
            .iter()
            .enumerate()
            .map(|(k, &b)| ((pair.foreground[[0, burst_frame, k]] * mags[[burst_frame, k]]).min(b) as f64).powi(2))
            .sum();
        let den: f64 = burst.iter().map(|b| (*b as f64).powi(2)).sum();
        assert!(num / den >= 0.8, "seed {seed}: {}", num / den);
    }
}

#[test]
fn repet_sim_two_state_has_no_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f32> = (0..48).map(|_| rng.gen_range(0.1f32..1.0)).collect();
    let b: Vec<f32> = (0..48).map(|_| rng.gen_range(0.1f32..1.0)).collect();
    let mags = Array3::from_shape_fn((2, 40, 48), |(_, t, f)| if t % 2 == 0 { a[f] } else { b[f] });
    let pair = repet_sim(&spec_from_mags(mags), None).unwrap();
    assert!(pair.foreground.iter().all(|&v| v == 0.0));
}

#[test]
fn repet_sim_all_neighbours_is_median_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = 15;
    let mags = Array3::from_shape_fn((1, t, 20), |_| rng.gen_range(0.1f32..1.0));
    let spec = spec_from_mags(mags.clone());
    let pair = repet_sim(&spec, Some(t - 1)).unwrap();
    let peak = mags.iter().copied().fold(0.0f32, f32::max) as f64;
    for j in 0..t {
        for b in 0..20 {
            let mut others: Vec<f64> = (0..t).filter(|&i| i != j).map(|i| mags[[0, i, b]] as f64 / peak).collect();
            others.sort_by(f64::total_cmp);
            let n = others.len();
            let med = 0.5 * (others[n / 2 - 1] + others[n / 2]);
            let v = mags[[0, j, b]] as f64 / peak;
            let want = 1.0 - ((med + 1e-8) / (v + 1e-8)).min(1.0);
            assert!((pair.foreground[[0, j, b]] as f64 - want).abs() < 1e-5);
        }
    }
}

#[test]
fn ft2d_m_moves_spike_to_foreground() {
    for seed in 0..5u64 {
        let (t, f) = (64, 128);
        let mut mags = Array2::from_shape_fn((t, f), |(i, k)| {
            let p = 2.0 * std::f32::consts::PI;
            0.5 + 0.25 * (p * 8.0 * i as f32 / t as f32).cos() * (p * 16.0 * k as f32 / f as f32).cos()
        });
        let (si, sk) = (7 + seed as usize * 9, 11 + seed as usize * 17);
        let spike = 2.0f32;
        mags[[si, sk]] += spike;
        let pair = ft2d(&spec_from_mags(mags.clone().insert_axis(Axis(0))), Ft2dVariant::M, 2.0, 2);
        let assigned = pair.foreground[[0, si, sk]] * mags[[si, sk]];
        assert!(assigned >= 0.8 * spike, "seed {seed}: {assigned}");
    }
}

#[test]
fn ft2d_zero_input_ties() {
    let z = spec_from_mags(Array3::zeros((1, 16, 32)));
    for v in [Ft2dVariant::M, Ft2dVariant::R] {
        let pair = ft2d(&z, v, 2.0, 2);
        assert!(pair.foreground.iter().all(|&x| x == 0.5));
    }
}

fn cents(a: f64, b: f64) -> f64 {
    1200.0 * (a / b).log2()
}

#[test]
fn melody_tracks_220_hz() {
    let tone = harmonic_tone(LEN, SR, 220.0, 5, 0.2);
    let spec = full_spec(&stereo(&tone));
    let track = melody_salience(&spec, (80.0, 1000.0), 5, 10.0).unwrap();
    for ch in &track.f0 {
        let frames = &ch[..spec.valid_frames];
        let hits = frames.iter().filter(|f| f.is_some_and(|f0| cents(f0, 220.0).abs() <= 10.0)).count();
        let frac = hits as f64 / frames.len() as f64;
        assert!(frac >= 0.95, "{frac}");
    }
}

#[test]
fn melody_mostly_unvoiced_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let noise: Vec<f32> = (0..LEN).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    let spec = full_spec(&stereo(&noise));
    let track = melody_salience(&spec, (80.0, 1000.0), 5, 10.0).unwrap();
    let frames = &track.f0[0][..spec.valid_frames];
    let voiced = frames.iter().filter(|f| f.is_some()).count() as f64 / frames.len() as f64;
    assert!(voiced <= 0.2, "{voiced}");
}

#[test]
fn melody_silence_is_unvoiced() {
    let spec = full_spec(&AudioClip::zeros(2, LEN, SR));
    let track = melody_salience(&spec, (80.0, 1000.0), 5, 10.0).unwrap();
    assert!(track.f0.iter().flatten().all(|f| f.is_none()));
}

/// Dyadic gains keep the scaled f32 waveform exact. Other gains perturb the
/// input itself by f32 rounding; those are checked on the spectrogram.
fn song_spec(seed: u64, gain: f32) -> Spectrogram {
    let mut song = synth_song(seed, 0, LEN, SR).mixture;
    song.samples.mapv_inplace(|x| x * gain);
    full_spec(&song)
}

#[test]
fn cues_are_scale_covariant_and_complementary() {
    let cfg = PrimitiveConfig::default();
    let base = song_spec(5, 1.0);
    let a = extract_all(&base, &cfg).unwrap();
    assert_eq!(a.cues.dim(), (2, 320, 1024, 12));
    let scaled_spec = base.with_bins(base.bins.mapv(|z| z * 0.37));
    for spec in [song_spec(5, 0.25), song_spec(5, 8.0), scaled_spec] {
        let b = extract_all(&spec, &cfg).unwrap();
        let max_diff = a.cues.iter().zip(b.cues.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-5, "{max_diff}");
    }
    for alg in 0..6 {
        let fg = a.cues.slice(s![.., .., .., 2 * alg]);
        let bg = a.cues.slice(s![.., .., .., 2 * alg + 1]);
        for (x, y) in fg.iter().zip(bg.iter()) {
            assert!((x + y - 1.0).abs() <= 1e-6);
        }
    }
    let again = extract_all(&song_spec(5, 1.0), &cfg).unwrap();
    assert_eq!(a, again);
}

#[test]
fn swapping_channels_swaps_cues() {
    let cfg = PrimitiveConfig::default();
    let clip = synth_song(9, 0, 960 * 8, SR).mixture;
    let mut swapped = clip.clone();
    swapped.samples.invert_axis(Axis(0));
    let a = extract_all(&stft(&clip, 128, 32, Some(240)).unwrap(), &cfg).unwrap();
    let b = extract_all(&stft(&swapped, 128, 32, Some(240)).unwrap(), &cfg).unwrap();
    assert_eq!(a.cues.index_axis(Axis(0), 0), b.cues.index_axis(Axis(0), 1));
    assert_eq!(a.cues.index_axis(Axis(0), 1), b.cues.index_axis(Axis(0), 0));
}

/// Adjusted Rand index from the contingency table.
fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / c2(a.len() as u64);
    let max = 0.5 * (rows + cols);
    (index - expected) / (max - expected)
}

fn blobs(seed: u64, n: usize, dim: usize) -> (Array2<f32>, Vec<usize>) {
    use rand_distr_like::normal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f32>> = (0..3).map(|c| (0..dim).map(|d| if d == c % dim { 3.0 * c as f32 } else { 0.0 }).collect()).collect();
    let truth: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let x = Array2::from_shape_fn((n, dim), |(i, d)| centres[truth[i]][d] + 0.05 * normal(&mut rng));
    (x, truth)
}

/// Box-Muller standard normal draws for the blob generator.
mod rand_distr_like {
    use rand::Rng;
    pub fn normal(rng: &mut impl Rng) -> f32 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }
}

#[test]
fn kmeans_recovers_blobs() {
    for seed in 0..5 {
        let (x, truth) = blobs(seed, 300, 2);
        let (_, report) = kmeans_fit(x.view(), &KMeansOptions::new(3, seed)).unwrap();
        assert_eq!(adjusted_rand(&report.assignments, &truth), 1.0, "seed {seed}");
        for w in report.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "inertia rose: {:?}", report.inertia_history);
        }
    }
}

#[test]
fn kmeans_final_assignment_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array2::from_shape_fn((400, 6), |_| rng.gen_range(0.0f32..1.0));
    let (model, report) = kmeans_fit(x.view(), &KMeansOptions::new(12, 2)).unwrap();
    for w in report.inertia_history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
    let (labels, inertia) = kmeans_assign_with_inertia(&model, x.view()).unwrap();
    assert_eq!(labels, report.assignments);
    assert_eq!(inertia, report.final_inertia);
}

#[test]
fn kmeans_absorbs_feature_scale() {
    let (x, _) = blobs(7, 150, 3);
    let mut scaled = x.clone();
    scaled.column_mut(1).mapv_inplace(|v| v * 250.0);
    let opts = KMeansOptions::new(3, 11);
    let (_, a) = kmeans_fit(x.view(), &opts).unwrap();
    let (_, b) = kmeans_fit(scaled.view(), &opts).unwrap();
    assert_eq!(a.assignments, b.assignments);
}

#[test]
fn full_clip_label_grid() {
    let cfg = PrimitiveConfig::default();
    let specs: Vec<Spectrogram> = (0..2).map(|s| song_spec(s, 1.0)).collect();
    let mut rows = Vec::new();
    for spec in &specs {
        let feats = patchify(&extract_all(spec, &cfg).unwrap(), 32, 64).unwrap();
        assert_eq!(feats.len(), 160);
        assert!(feats.iter().all(|f| f.vec.len() == 48 && f.vec.iter().all(|v| (0.0..=1.0).contains(v))));
        rows.push(feature_matrix(&feats));
    }
    let all = ndarray::concatenate(Axis(0), &[rows[0].view(), rows[1].view()]).unwrap();
    let (model, _) = kmeans_fit(all.view(), &KMeansOptions::new(8, 0)).unwrap();
    let labels = label_clip(&specs[0], &model, &cfg, 32, 64).unwrap();
    assert_eq!(labels.labels.dim(), (10, 16));
    assert!(labels.flat().iter().all(|&l| l < 8));
    assert_eq!(labels.flat(), kmeans_assign(&model, rows[0].view()).unwrap());
    assert_eq!(labels, label_clip(&specs[0], &model, &cfg, 32, 64).unwrap());
}
