//! Primitive auditory foreground/background estimators.
//!
//! Each estimator maps a mixture spectrogram to a pair of complementary soft
//! masks per channel. Magnitudes are divided by the clip's peak magnitude
//! before any ratio is formed, so masks do not depend on the input gain.


use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, median, FilterAxis, Spectrogram};
use crate::hash::fnv1a64;
use crate::par;

/// Regulariser in every mask ratio.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PrimitiveError {
    #[error("clip of {frames} frames is too short for any repetition period")]
    TooShortForPeriod { frames: usize },
    #[error("empty f0 range [{lo}, {hi}] Hz")]
    EmptyF0Range { lo: f64, hi: f64 },
    #[error("f0 range up to {hi} Hz with {harmonics} harmonics exceeds the Nyquist limit {nyquist} Hz")]
    F0RangeTooHigh { hi: f64, harmonics: usize, nyquist: f64 },
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Hpss,
    Repet,
    RepetSim,
    Ft2dM,
    Ft2dR,
    Melodia,
}

impl Algorithm {
    /// Order of the cue axis in [`PrimitiveFeatureMap`].
    pub const ALL: [Algorithm; 6] =
        [Algorithm::Hpss, Algorithm::Repet, Algorithm::RepetSim, Algorithm::Ft2dM, Algorithm::Ft2dR, Algorithm::Melodia];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hpss => "HPSS",
            Algorithm::Repet => "REPET",
            Algorithm::RepetSim => "REPET_SIM",
            Algorithm::Ft2dM => "FT2D_M",
            Algorithm::Ft2dR => "FT2D_R",
            Algorithm::Melodia => "MELODIA",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ft2dVariant {
    /// Keep the periodic peaks as the background model.
    M,
    /// Remove the periodic peaks; the residual is the foreground model.
    R,
}

/// Parameters of all six estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimitiveConfig {
    pub hpss_kernel_time: usize,
    pub hpss_kernel_freq: usize,
    /// `None` means a third of the frame count.
    pub repet_max_period: Option<usize>,
    /// `None` means a tenth of the frame count, rounded up.
    pub repet_sim_k: Option<usize>,
    pub ft2d_peak_factor: f64,
    /// Half-width of the square peak-picking neighbourhood.
    pub ft2d_radius: usize,
    pub melody_f0_min: f64,
    pub melody_f0_max: f64,
    pub melody_harmonics: usize,
    /// Spacing of the f0 candidate grid.
    pub melody_cents: f64,
}

impl Default for PrimitiveConfig {
    fn default() -> Self {
        Self {
            hpss_kernel_time: 17,
            hpss_kernel_freq: 17,
            repet_max_period: None,
            repet_sim_k: None,
            ft2d_peak_factor: 2.0,
            ft2d_radius: 2,
            melody_f0_min: 80.0,
            melody_f0_max: 1000.0,
            melody_harmonics: 5,
            melody_cents: 10.0,
        }
    }
}

impl PrimitiveConfig {
    /// Canonical `key=value` lines; the fingerprint is taken over this text.
    pub fn kv_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        format!(
            "hpss_kernel_time={}\nhpss_kernel_freq={}\nrepet_max_period={}\nrepet_sim_k={}\n\
             ft2d_peak_factor={:?}\nft2d_radius={}\nmelody_f0_min={:?}\nmelody_f0_max={:?}\n\
             melody_harmonics={}\nmelody_cents={:?}\n",
            self.hpss_kernel_time,
            self.hpss_kernel_freq,
            opt(self.repet_max_period),
            opt(self.repet_sim_k),
            self.ft2d_peak_factor,
            self.ft2d_radius,
            self.melody_f0_min,
            self.melody_f0_max,
            self.melody_harmonics,
            self.melody_cents,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.kv_text().as_bytes())
    }
}

/// Complementary soft masks, each `[C, T, F]` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveMaskPair {
    pub foreground: Array3<f32>,
    pub background: Array3<f32>,
    pub algorithm: Algorithm,
}

impl PrimitiveMaskPair {
    fn from_foreground(foreground: Array3<f32>, algorithm: Algorithm) -> Self {
        let background = foreground.mapv(|v| 1.0 - v);
        Self { foreground, background, algorithm }
    }

    fn from_channels(channels: Vec<Array2<f32>>, algorithm: Algorithm) -> Self {
        let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
        let fg = ndarray::stack(Axis(0), &views).expect("channel masks share a shape");
        Self::from_foreground(fg, algorithm)
    }
}

/// The twelve cues per TF bin, `[C, T, F, 12]`, in [`Algorithm::ALL`] order
/// with foreground before background.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveFeatureMap {
    pub cues: Array4<f32>,
}

pub const N_CUES: usize = 12;

/// Magnitudes scaled so the loudest bin of the clip is 1.
pub fn normalized_magnitude(spec: &Spectrogram) -> Array3<f64> {
    let mags = spec.bins.mapv(|z| (z.re as f64).hypot(z.im as f64));
    let peak = mags.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        mags / peak
    } else {
        mags
    }
}

fn per_channel<F>(mags: &Array3<f64>, f: F) -> Vec<Array2<f32>>
where
    F: Fn(ArrayView2<f64>) -> Array2<f32> + Sync + Send,
{
    par::map_range(mags.dim().0, |c| f(mags.index_axis(Axis(0), c)))
}

/// Foreground share of a (foreground, background) magnitude split.
fn wiener(fg: f64, bg: f64) -> f32 {
    let den = fg * fg + bg * bg;
    if den == 0.0 {
        0.5
    } else {
        (fg * fg / (den + EPS)) as f32
    }
}

/// Background share when `model` is the repeating estimate of `v`. Models
/// are medians of f32 magnitudes, so `v` is compared at the same precision.
fn repeating_background(model: f64, v: f64) -> f32 {
    let v = v as f32 as f64;
    if v == 0.0 {
        0.5
    } else {
        ((model + EPS) / (v + EPS)).min(1.0) as f32
    }
}

/// Median-filtering harmonic/percussive split; percussive is foreground.
pub fn hpss(spec: &Spectrogram, kernel_t: usize, kernel_f: usize) -> Result<PrimitiveMaskPair, PrimitiveError> {
    if kernel_t.is_multiple_of(2) {
        return Err(dsp::DspError::EvenFilter(kernel_t).into());
    }
    if kernel_f.is_multiple_of(2) {
        return Err(dsp::DspError::EvenFilter(kernel_f).into());
    }
    let mags = normalized_magnitude(spec);
    let channels = per_channel(&mags, |v| {
        let v32 = v.mapv(|x| x as f32);
        let h = dsp::median_filter(v32.view(), FilterAxis::Time, kernel_t).expect("odd kernel");
        let p = dsp::median_filter(v32.view(), FilterAxis::Frequency, kernel_f).expect("odd kernel");
        ndarray::Zip::from(&h).and(&p).map_collect(|&h, &p| wiener(p as f64, h as f64))
    });
    Ok(PrimitiveMaskPair::from_channels(channels, Algorithm::Hpss))
}

/// Beat spectrum: per-bin autocorrelation of the power spectrogram along
/// time, normalised by the number of overlapping frames and averaged over
/// bins, for lags `0..=max_lag`.
pub fn beat_spectrum(v: ArrayView2<f64>, max_lag: usize) -> Vec<f64> {
    let (t, f) = v.dim();
    let p = v.mapv(|x| x * x);
    (0..=max_lag.min(t.saturating_sub(1)))
        .map(|lag| {
            let mut acc = 0.0;
            for i in 0..t - lag {
                acc += p.row(i).iter().zip(p.row(i + lag).iter()).map(|(a, b)| a * b).sum::<f64>();
            }
            acc / ((t - lag) as f64 * f as f64)
        })
        .collect()
}

/// Repetition period in frames: the shortest lag in `[2, max_period]` whose
/// beat-spectrum value is within a relative 1e-4 of the maximum, which keeps
/// multiples of the true period from winning on rounding noise.
pub fn repeating_period(v: ArrayView2<f64>, max_period: usize) -> usize {
    let b = beat_spectrum(v, max_period);
    let best = b[2..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (2..b.len()).find(|&l| b[l] >= best - 1e-4 * best.abs()).unwrap_or(2)
}

fn resolve_max_period(cfg: Option<usize>, frames: usize) -> Result<usize, PrimitiveError> {
    let p = cfg.unwrap_or(frames / 3).min(frames / 2);
    if p < 2 {
        return Err(PrimitiveError::TooShortForPeriod { frames });
    }
    Ok(p)
}

/// Per-channel repeating periods alongside the REPET masks.
pub fn repet_detailed(
    spec: &Spectrogram,
    max_period_frames: Option<usize>,
) -> Result<(PrimitiveMaskPair, Vec<usize>), PrimitiveError> {
    let frames = spec.frames();
    let max_period = resolve_max_period(max_period_frames, frames)?;
    let mags = normalized_magnitude(spec);
    let results: Vec<(Array2<f32>, usize)> = par::map_range(mags.dim().0, |c| {
        let v = mags.index_axis(Axis(0), c);
        let (t, f) = v.dim();
        let period = repeating_period(v, max_period);
        let mut model = Array2::<f64>::zeros((t, f));
        let mut buf = Vec::with_capacity(t / period + 1);
        for phase in 0..period {
            for k in 0..f {
                buf.clear();
                buf.extend((phase..t).step_by(period).map(|i| v[[i, k]] as f32));
                let m = median(&mut buf) as f64;
                for i in (phase..t).step_by(period) {
                    model[[i, k]] = m;
                }
            }
        }
        let fg = ndarray::Zip::from(&model).and(&v).map_collect(|&m, &x| 1.0 - repeating_background(m, x));
        (fg, period)
    });
    let (channels, periods) = results.into_iter().unzip();
    Ok((PrimitiveMaskPair::from_channels(channels, Algorithm::Repet), periods))
}

/// Repeating-pattern extraction from the beat-spectrum period; the
/// non-repeating part is foreground.
pub fn repet(spec: &Spectrogram, max_period_frames: Option<usize>) -> Result<PrimitiveMaskPair, PrimitiveError> {
    repet_detailed(spec, max_period_frames).map(|(pair, _)| pair)
}

/// Indices of the `k` frames most similar to `frame`, excluding itself;
/// ties go to the lower index.
pub fn nearest_frames(sim: ArrayView2<f32>, frame: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sim.nrows()).filter(|&i| i != frame).collect();
    order.sort_by(|&a, &b| sim[[frame, b]].total_cmp(&sim[[frame, a]]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Similarity-based repetition: each frame's repeating model is the median
/// of its `k` most cosine-similar frames.
pub fn repet_sim(spec: &Spectrogram, k_neighbors: Option<usize>) -> Result<PrimitiveMaskPair, PrimitiveError> {
    let frames = spec.frames();
    let k = k_neighbors.unwrap_or(frames.div_ceil(10)).clamp(1, frames.saturating_sub(1).max(1));
    let mags = normalized_magnitude(spec);
    let channels = per_channel(&mags, |v| {
        let (t, f) = v.dim();
        let v32 = v.mapv(|x| x as f32);
        let sim = dsp::self_similarity(v32.view());
        let mut fg = Array2::zeros((t, f));
        let mut buf = Vec::with_capacity(k);
        for j in 0..t {
            let neighbors = if t > 1 { nearest_frames(sim.view(), j, k) } else { vec![j] };
            for b in 0..f {
                buf.clear();
                buf.extend(neighbors.iter().map(|&i| v32[[i, b]]));
                let m = median(&mut buf) as f64;
                fg[[j, b]] = 1.0 - repeating_background(m, v[[j, b]]);
            }
        }
        fg
    });
    Ok(PrimitiveMaskPair::from_channels(channels, Algorithm::RepetSim))
}

/// Cells of the 2-D magnitude transform that are periodic peaks: local
/// maxima (wrap-around neighbourhood of radius `radius`) exceeding
/// `peak_factor` times the neighbourhood mean. Cells with zero temporal rate
/// are never peaks.
pub fn ft2d_peaks(amp: ArrayView2<f64>, peak_factor: f64, radius: usize) -> Array2<bool> {
    let (t, f) = amp.dim();
    let r = radius as isize;
    Array2::from_shape_fn((t, f), |(i, j)| {
        if i == 0 {
            return false;
        }
        let centre = amp[[i, j]];
        let mut sum = 0.0;
        let mut count = 0usize;
        for di in -r..=r {
            for dj in -r..=r {
                if di == 0 && dj == 0 {
                    continue;
                }
                let ii = (i as isize + di).rem_euclid(t as isize) as usize;
                let jj = (j as isize + dj).rem_euclid(f as isize) as usize;
                if (ii, jj) == (i, j) {
                    continue;
                }
                let a = amp[[ii, jj]];
                if a > centre {
                    return false;
                }
                sum += a;
                count += 1;
            }
        }
        count > 0 && centre > peak_factor * sum / count as f64
    })
}

/// Common-fate separation in the 2-D Fourier domain of the magnitude
/// spectrogram. The zero-temporal-rate line always belongs to the
/// background model; repeating content shows up as isolated peaks.
pub fn ft2d(spec: &Spectrogram, variant: Ft2dVariant, peak_factor: f64, radius: usize) -> PrimitiveMaskPair {
    let mags = normalized_magnitude(spec);
    let algorithm = match variant {
        Ft2dVariant::M => Algorithm::Ft2dM,
        Ft2dVariant::R => Algorithm::Ft2dR,
    };
    let channels = per_channel(&mags, |v| {
        let v32 = v.mapv(|x| x as f32);
        let y = dsp::fft2(v32.view());
        let amp = y.mapv(|z| z.norm());
        let peaks = ft2d_peaks(amp.view(), peak_factor, radius);
        let keep_background = |i: usize, j: usize| i == 0 || peaks[[i, j]];
        let mut filtered = y.clone();
        for ((i, j), z) in filtered.indexed_iter_mut() {
            let keep = match variant {
                Ft2dVariant::M => keep_background(i, j),
                Ft2dVariant::R => !keep_background(i, j),
            };
            if !keep {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        let model = dsp::fft2_inv(&filtered).mapv(|z| z.re.max(0.0));
        ndarray::Zip::from(&model).and(&v).map_collect(|&m, &x| {
            let (fg, bg) = match variant {
                Ft2dVariant::M => ((x - m).max(0.0), m),
                Ft2dVariant::R => (m, (x - m).max(0.0)),
            };
            wiener(fg, bg)
        })
    });
    PrimitiveMaskPair::from_channels(channels, algorithm)
}

/// Per-frame melody estimate from harmonic-summation salience.
#[derive(Debug, Clone, PartialEq)]
pub struct MelodyTrack {
    /// `[channel][frame]`; `None` for unvoiced frames.
    pub f0: Vec<Vec<Option<f64>>>,
    /// The f0 candidate grid in Hz.
    pub candidates: Vec<f64>,
    pub masks: PrimitiveMaskPair,
}

/// Harmonic weight decay of the salience function.
pub const HARMONIC_DECAY: f64 = 0.8;
/// A frame is voiced when its best salience exceeds this fraction of the
/// frame's summed magnitude.
pub const VOICING_RATIO: f64 = 0.1;
const OVERSAMPLE: usize = 8;

fn interp3(fine: &[f64], pos: f64) -> f64 {
    let m = pos.round() as isize;
    let at = |i: isize| -> f64 {
        let n = fine.len() as isize;
        fine[i.clamp(0, n - 1) as usize]
    };
    let d = pos - m as f64;
    let (a, b, c) = (at(m - 1), at(m), at(m + 1));
    b + 0.5 * d * (c - a) + 0.5 * d * d * (c - 2.0 * b + a)
}

/// Melody cue: harmonic-summation salience with weights `0.8^(h-1)` over an
/// oversampled spectrum, per-frame argmax f0, and Gaussian bumps (one-bin
/// standard deviation) on the melody harmonics as foreground.
pub fn melody_salience(
    spec: &Spectrogram,
    f0_range: (f64, f64),
    n_harmonics: usize,
    cents: f64,
) -> Result<MelodyTrack, PrimitiveError> {
    let (lo, hi) = f0_range;
    if !(lo > 0.0 && hi >= lo && n_harmonics > 0 && cents > 0.0) {
        return Err(PrimitiveError::EmptyF0Range { lo, hi });
    }
    let nyquist = spec.sample_rate as f64 / 2.0;
    if hi * n_harmonics as f64 > nyquist {
        return Err(PrimitiveError::F0RangeTooHigh { hi, harmonics: n_harmonics, nyquist });
    }
    let candidates: Vec<f64> = (0..)
        .map(|i| lo * 2f64.powf(i as f64 * cents / 1200.0))
        .take_while(|&f| f <= hi * (1.0 + 1e-12))
        .collect();
    let window = spec.window_size;
    let fine_len = window * OVERSAMPLE;
    let hz_to_bin = window as f64 / spec.sample_rate as f64;
    let peak = spec.bins.iter().map(|z| z.norm() as f64).fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let (channels, frames, bins) = spec.bins.dim();

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fine_len);

    let per_channel: Vec<(Vec<Option<f64>>, Array2<f32>)> = par::map_range(channels, |c| {
        let ch = spec.bins.index_axis(Axis(0), c);
        let mut track = Vec::with_capacity(frames);
        let mut fg = Array2::<f32>::zeros((frames, bins));
        for t in 0..frames {
            let half: Vec<Complex64> =
                ch.row(t).iter().map(|z| Complex64::new(z.re as f64 * scale, z.im as f64 * scale)).collect();
            let total: f64 = half.iter().map(|z| z.norm()).sum();
            if total == 0.0 {
                fg.row_mut(t).fill(0.5);
                track.push(None);
                continue;
            }
            let frame = dsp::irfft_frame(&half, window, &ifft);
            let mut buf = vec![Complex64::new(0.0, 0.0); fine_len];
            for (b, x) in buf.iter_mut().zip(frame.iter()) {
                b.re = *x;
            }
            fft.process(&mut buf);
            let fine: Vec<f64> = buf[..fine_len / 2].iter().map(|z| z.norm()).collect();
            let salience = |f0: f64| -> f64 {
                (1..=n_harmonics)
                    .map(|h| {
                        let pos = h as f64 * f0 * hz_to_bin * OVERSAMPLE as f64;
                        HARMONIC_DECAY.powi(h as i32 - 1) * interp3(&fine, pos)
                    })
                    .sum()
            };
            let (best_f0, best) = candidates
                .iter()
                .map(|&f0| (f0, salience(f0)))
                .fold((candidates[0], f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best > VOICING_RATIO * total {
                for h in 1..=n_harmonics {
                    let centre = h as f64 * best_f0 * hz_to_bin;
                    for b in 0..bins {
                        let d = b as f64 - centre;
                        let g = (-0.5 * d * d).exp() as f32;
                        if g > fg[[t, b]] {
                            fg[[t, b]] = g;
                        }
                    }
                }
                track.push(Some(best_f0));
            } else {
                track.push(None);
            }
        }
        (track, fg)
    });
    let (f0, masks): (Vec<_>, Vec<_>) = per_channel.into_iter().unzip();
    Ok(MelodyTrack { f0, candidates, masks: PrimitiveMaskPair::from_channels(masks, Algorithm::Melodia) })
}

/// Runs all six estimators and stacks their mask pairs on the cue axis.
pub fn extract_all(spec: &Spectrogram, cfg: &PrimitiveConfig) -> Result<PrimitiveFeatureMap, PrimitiveError> {
    let pairs = [
        hpss(spec, cfg.hpss_kernel_time, cfg.hpss_kernel_freq)?,
        repet(spec, cfg.repet_max_period)?,
        repet_sim(spec, cfg.repet_sim_k)?,
        ft2d(spec, Ft2dVariant::M, cfg.ft2d_peak_factor, cfg.ft2d_radius),
        ft2d(spec, Ft2dVariant::R, cfg.ft2d_peak_factor, cfg.ft2d_radius),
        melody_salience(spec, (cfg.melody_f0_min, cfg.melody_f0_max), cfg.melody_harmonics, cfg.melody_cents)?.masks,
    ];
    let (c, t, f) = spec.bins.dim();
    let mut cues = Array4::<f32>::zeros((c, t, f, N_CUES));
    for (a, pair) in pairs.iter().enumerate() {
        debug_assert_eq!(pair.algorithm, Algorithm::ALL[a]);
        cues.index_axis_mut(Axis(3), 2 * a).assign(&pair.foreground);
        cues.index_axis_mut(Axis(3), 2 * a + 1).assign(&pair.background);
    }
    Ok(PrimitiveFeatureMap { cues })
}
