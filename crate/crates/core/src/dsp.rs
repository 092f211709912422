//! STFT/iSTFT, median filtering, 2-D FFT and frame self-similarity.
//!
//! All transforms run in f64 internally; spectrogram storage is f32.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::{Complex32, Complex64};
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("window size {0} is not a power of two")]
    WindowNotPowerOfTwo(usize),
    #[error("hop {hop} must be in 1..={window}")]
    BadHop { hop: usize, window: usize },
    #[error("signal of {len} samples is too short for window {window} / hop {hop}")]
    TooShort { len: usize, window: usize, hop: usize },
    #[error("requested {out_len} samples but the frames cover only {covered}")]
    OutputTooLong { out_len: usize, covered: usize },
    #[error("median filter length must be odd and positive, got {0}")]
    EvenFilter(usize),
}

/// Complex STFT, `[channels, frames, bins]`, DC kept and Nyquist dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Array3<Complex32>,
    pub frame_hop: usize,
    pub window_size: usize,
    pub sample_rate: u32,
    /// Frames computed from the signal; any further frames are zero padding.
    pub valid_frames: usize,
}

impl Spectrogram {
    pub fn channels(&self) -> usize {
        self.bins.dim().0
    }

    pub fn frames(&self) -> usize {
        self.bins.dim().1
    }

    pub fn freq_bins(&self) -> usize {
        self.bins.dim().2
    }

    /// `|X|`, the non-negative magnitude view.
    pub fn magnitude(&self) -> Array3<f32> {
        self.bins.mapv(|z| z.norm())
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_hz(&self, k: f64) -> f64 {
        k * self.sample_rate as f64 / self.window_size as f64
    }

    /// Same geometry, new contents.
    pub fn with_bins(&self, bins: Array3<Complex32>) -> Self {
        Self { bins, ..self.clone() }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    // a single reflection suffices because len > window / 2
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Number of frames produced from `len` samples before padding: centred
/// framing yields `len / hop + 1`, and the final frame is dropped.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop
}

/// Hann-windowed, centred STFT.
///
/// The signal is reflection-padded by `window / 2` at both ends, the final
/// centred frame is dropped, and with `pad_frames_to` the frame axis is then
/// truncated or right-padded with zero frames to that length.
pub fn stft(
    clip: &AudioClip,
    window: usize,
    hop: usize,
    pad_frames_to: Option<usize>,
) -> Result<Spectrogram, DspError> {
    if !window.is_power_of_two() || window < 2 {
        return Err(DspError::WindowNotPowerOfTwo(window));
    }
    if hop == 0 || hop > window {
        return Err(DspError::BadHop { hop, window });
    }
    let len = clip.len();
    if len < hop || len <= window / 2 {
        return Err(DspError::TooShort { len, window, hop });
    }
    let n_frames = frame_count(len, hop);
    let total = pad_frames_to.unwrap_or(n_frames);
    let valid = n_frames.min(total);
    let n_bins = window / 2;
    let channels = clip.channels();
    let win = hann(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);

    let frames: Vec<Vec<Complex32>> = par::map_range(channels * valid, |idx| {
        let (c, k) = (idx / valid, idx % valid);
        let row = clip.samples.row(c);
        let mut buf: Vec<Complex64> = (0..window)
            .map(|n| {
                let i = reflect((k * hop + n) as isize - (window / 2) as isize, len);
                Complex64::new(row[i] as f64 * win[n], 0.0)
            })
            .collect();
        fft.process(&mut buf);
        buf[..n_bins].iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect()
    });

    let mut bins = Array3::zeros((channels, total, n_bins));
    for (idx, frame) in frames.into_iter().enumerate() {
        let (c, k) = (idx / valid, idx % valid);
        for (f, z) in frame.into_iter().enumerate() {
            bins[[c, k, f]] = z;
        }
    }
    Ok(Spectrogram { bins, frame_hop: hop, window_size: window, sample_rate: clip.sample_rate, valid_frames: valid })
}

/// Inverse of a half spectrum (bins `0..window/2`, Nyquist taken as zero).
pub(crate) fn irfft_frame(half: &[Complex64], window: usize, ifft: &Arc<dyn Fft<f64>>) -> Vec<f64> {
    let mut full = vec![Complex64::new(0.0, 0.0); window];
    full[0] = Complex64::new(half[0].re, 0.0);
    for k in 1..half.len().min(window / 2) {
        full[k] = half[k];
        full[window - k] = half[k].conj();
    }
    ifft.process(&mut full);
    full.iter().map(|z| z.re / window as f64).collect()
}

/// Samples of the original signal covered by the valid frames.
pub fn covered_len(spec: &Spectrogram) -> usize {
    if spec.valid_frames == 0 {
        0
    } else {
        (spec.valid_frames - 1) * spec.frame_hop + spec.window_size / 2
    }
}

/// Least-squares synthesis operator for a fixed STFT geometry.
///
/// Plain overlap-add cannot undo the missing Nyquist bin. Knowing bins
/// `0..W/2` of a real frame is the same as knowing the frame minus its
/// projection onto `nu[n] = (-1)^n / sqrt(W)`, so the normal equations are
/// `(D - N N^T) x = acc`, with `D` the summed squared window and column `k` of
/// `N` the windowed `nu` placed at frame `k`. The Woodbury identity reduces
/// this to a small banded system over frames, factored once here.
#[derive(Debug, Clone)]
pub struct IstftPlan {
    pub window: usize,
    pub hop: usize,
    pub frames: usize,
    win: Vec<f64>,
    /// `w[n] * nu[n]`.
    wnu: Vec<f64>,
    /// `1 / D`, zero where no window reaches.
    dinv: Vec<f64>,
    /// Lower Cholesky factor of `I - N^T D^-1 N`, row-major.
    chol: Vec<f64>,
}

impl IstftPlan {
    pub fn new(window: usize, hop: usize, frames: usize) -> Self {
        assert!(frames > 0 && hop > 0 && window >= 2);
        let win = hann(window);
        let scale = 1.0 / (window as f64).sqrt();
        let wnu: Vec<f64> = win.iter().enumerate().map(|(n, w)| if n % 2 == 0 { w * scale } else { -w * scale }).collect();
        let padded = (frames - 1) * hop + window;
        let mut d = vec![0.0f64; padded];
        for k in 0..frames {
            for n in 0..window {
                d[k * hop + n] += win[n] * win[n];
            }
        }
        let dinv: Vec<f64> = d.iter().map(|&v| if v > 1e-12 { 1.0 / v } else { 0.0 }).collect();

        let mut m = vec![0.0f64; frames * frames];
        for k in 0..frames {
            for j in k..frames {
                if (j - k) * hop >= window {
                    break;
                }
                let mut acc = 0.0;
                for pos in j * hop..k * hop + window {
                    acc += wnu[pos - k * hop] * wnu[pos - j * hop] * dinv[pos];
                }
                let v = if j == k { 1.0 - acc } else { -acc };
                m[k * frames + j] = v;
                m[j * frames + k] = v;
            }
        }
        let chol = cholesky(&m, frames).expect("normal equations are positive definite for Hann frames");
        Self { window, hop, frames, win, wnu, dinv, chol }
    }

    pub fn padded_len(&self) -> usize {
        (self.frames - 1) * self.hop + self.window
    }

    pub fn window_fn(&self) -> &[f64] {
        &self.win
    }

    /// Applies `(D - N N^T)^-1` in place to a padded-domain vector.
    pub fn apply_inverse(&self, v: &mut [f64]) {
        let (h, w, f) = (self.hop, self.window, self.frames);
        for (x, di) in v.iter_mut().zip(&self.dinv) {
            *x *= di;
        }
        let mut b: Vec<f64> = (0..f).map(|k| (0..w).map(|n| self.wnu[n] * v[k * h + n]).sum()).collect();
        // forward then backward substitution with the banded factor
        let band = w.div_ceil(h);
        for i in 0..f {
            let lo = i.saturating_sub(band);
            let s: f64 = (lo..i).map(|j| self.chol[i * f + j] * b[j]).sum();
            b[i] = (b[i] - s) / self.chol[i * f + i];
        }
        for i in (0..f).rev() {
            let hi = (i + band + 1).min(f);
            let s: f64 = (i + 1..hi).map(|j| self.chol[j * f + i] * b[j]).sum();
            b[i] = (b[i] - s) / self.chol[i * f + i];
        }
        for (k, c) in b.iter().enumerate() {
            for n in 0..w {
                let pos = k * h + n;
                v[pos] += self.dinv[pos] * self.wnu[n] * c;
            }
        }
    }
}

/// Dense Cholesky factorisation; `None` if not positive definite.
fn cholesky(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i * n + p] * l[j * n + p]).sum();
            if i == j {
                let d = m[i * n + i] - s;
                if d <= 1e-12 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (m[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Least-squares inverse STFT over the valid frames. Reconstruction of an
/// unmodified STFT is exact up to rounding, the missing Nyquist bin included.
pub fn istft(spec: &Spectrogram, out_len: usize) -> Result<AudioClip, DspError> {
    let covered = covered_len(spec);
    if out_len > covered || out_len == 0 {
        return Err(DspError::OutputTooLong { out_len, covered });
    }
    let plan = IstftPlan::new(spec.window_size, spec.frame_hop, spec.valid_frames.max(1));
    istft_with_plan(spec, out_len, &plan)
}

/// [`istft`] with a precomputed plan matching the spectrogram geometry.
pub fn istft_with_plan(spec: &Spectrogram, out_len: usize, plan: &IstftPlan) -> Result<AudioClip, DspError> {
    let covered = covered_len(spec);
    if out_len > covered || out_len == 0 {
        return Err(DspError::OutputTooLong { out_len, covered });
    }
    assert_eq!((plan.window, plan.hop, plan.frames), (spec.window_size, spec.frame_hop, spec.valid_frames));
    let channels = spec.channels();
    let rows: Vec<Vec<f64>> = par::map_range(channels, |c| {
        let ch = spec.bins.index_axis(Axis(0), c);
        let frames: Vec<Complex64> = ch
            .rows()
            .into_iter()
            .take(spec.valid_frames)
            .flat_map(|r| r.iter().map(|z| Complex64::new(z.re as f64, z.im as f64)).collect::<Vec<_>>())
            .collect();
        plan.synthesize(&frames, out_len)
    });
    let mut samples = Array2::zeros((channels, out_len));
    for (c, row) in rows.into_iter().enumerate() {
        for (i, x) in row.into_iter().enumerate() {
            samples[[c, i]] = x as f32;
        }
    }
    Ok(AudioClip { samples, sample_rate: spec.sample_rate })
}

impl IstftPlan {
    /// One channel from `frames x window/2` half spectra (row-major), cropped
    /// to `out_len` samples after the centring offset.
    pub fn synthesize(&self, half_frames: &[Complex64], out_len: usize) -> Vec<f64> {
        let (w, h, half) = (self.window, self.hop, self.window / 2);
        assert_eq!(half_frames.len(), self.frames * half);
        assert!(half + out_len <= self.padded_len());
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(w);
        let mut acc = vec![0.0f64; self.padded_len()];
        for (k, frame) in half_frames.chunks(half).enumerate() {
            let s = irfft_frame(frame, w, &ifft);
            for n in 0..w {
                acc[k * h + n] += self.win[n] * s[n];
            }
        }
        self.apply_inverse(&mut acc);
        acc[half..half + out_len].to_vec()
    }

    /// Adjoint of [`IstftPlan::synthesize`] up to the real-FFT weighting: for
    /// an output gradient it returns, per frame, `FFT(w * h_k)` over bins
    /// `0..window/2`, where `h` is the synthesis operator applied to the
    /// zero-padded gradient and `h_k` its segment under frame `k`. The
    /// gradient with respect to a real gain `m` on bin `f` of a frame with
    /// content `X` is then `c_f / W * Re(X * conj(result))`, `c_0 = 1`,
    /// `c_f = 2` otherwise.
    pub fn synthesize_adjoint(&self, grad: &[f64]) -> Vec<Complex64> {
        let (w, h, half) = (self.window, self.hop, self.window / 2);
        assert!(half + grad.len() <= self.padded_len());
        let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
        let mut v = vec![0.0f64; self.padded_len()];
        v[half..half + grad.len()].copy_from_slice(grad);
        self.apply_inverse(&mut v);
        let mut out = Vec::with_capacity(self.frames * half);
        for k in 0..self.frames {
            let mut buf: Vec<Complex64> = (0..w).map(|n| Complex64::new(self.win[n] * v[k * h + n], 0.0)).collect();
            fft.process(&mut buf);
            out.extend_from_slice(&buf[..half]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterAxis {
    /// Along axis 0 (frames).
    Time,
    /// Along axis 1 (frequency bins).
    Frequency,
}

/// Median of a buffer; even lengths average the two central values.
pub fn median(buf: &mut [f32]) -> f32 {
    let n = buf.len();
    assert!(n > 0, "median of an empty buffer");
    let mid = n / 2;
    let (_, upper, _) = buf.select_nth_unstable_by(mid, f32::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        0.5 * (lower + upper)
    }
}

/// Sliding median of odd `length` along one axis, with edge replication.
pub fn median_filter(x: ArrayView2<f32>, axis: FilterAxis, length: usize) -> Result<Array2<f32>, DspError> {
    if length.is_multiple_of(2) {
        return Err(DspError::EvenFilter(length));
    }
    if length == 1 {
        return Ok(x.to_owned());
    }
    let (rows, cols) = x.dim();
    let r = (length / 2) as isize;
    let (lines, line_len) = match axis {
        FilterAxis::Time => (cols, rows),
        FilterAxis::Frequency => (rows, cols),
    };
    let at = |line: usize, i: usize| match axis {
        FilterAxis::Time => x[[i, line]],
        FilterAxis::Frequency => x[[line, i]],
    };
    let filtered: Vec<Vec<f32>> = par::map_range(lines, |line| {
        let mut buf = vec![0.0f32; length];
        (0..line_len)
            .map(|i| {
                for (o, slot) in buf.iter_mut().enumerate() {
                    let j = (i as isize + o as isize - r).clamp(0, line_len as isize - 1) as usize;
                    *slot = at(line, j);
                }
                median(&mut buf)
            })
            .collect()
    });
    let mut out = Array2::zeros((rows, cols));
    for (line, vals) in filtered.into_iter().enumerate() {
        for (i, v) in vals.into_iter().enumerate() {
            match axis {
                FilterAxis::Time => out[[i, line]] = v,
                FilterAxis::Frequency => out[[line, i]] = v,
            }
        }
    }
    Ok(out)
}

fn fft_axis(data: &mut Array2<Complex64>, axis: usize, inverse: bool) {
    let n = data.len_of(Axis(axis));
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for mut lane in data.lanes_mut(Axis(axis)) {
        for (b, z) in buf.iter_mut().zip(lane.iter()) {
            *b = *z;
        }
        fft.process(&mut buf);
        for (z, b) in lane.iter_mut().zip(buf.iter()) {
            *z = if inverse { *b / n as f64 } else { *b };
        }
    }
}

/// Unnormalised 2-D DFT of a real array.
pub fn fft2(x: ArrayView2<f32>) -> Array2<Complex64> {
    let mut data = x.mapv(|v| Complex64::new(v as f64, 0.0));
    fft2_complex(&mut data, false);
    data
}

/// In-place 2-D DFT; the inverse includes the `1 / (rows * cols)` factor.
pub fn fft2_complex(data: &mut Array2<Complex64>, inverse: bool) {
    fft_axis(data, 1, inverse);
    fft_axis(data, 0, inverse);
}

pub fn fft2_inv(y: &Array2<Complex64>) -> Array2<Complex64> {
    let mut data = y.clone();
    fft2_complex(&mut data, true);
    data
}

/// Cosine similarity between every pair of rows.
///
/// Zero-norm rows have similarity 0 to every other row and 1 to themselves.
pub fn self_similarity(mags: ArrayView2<f32>) -> Array2<f32> {
    let t = mags.nrows();
    let norms: Vec<f64> = mags
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .collect();
    let rows: Vec<Vec<f32>> = par::map_range(t, |i| {
        (0..t)
            .map(|j| {
                if i == j {
                    return 1.0;
                }
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    return 0.0;
                }
                let dot: f64 = mags
                    .row(i)
                    .iter()
                    .zip(mags.row(j).iter())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (dot / (norms[i] * norms[j])) as f32
            })
            .collect()
    });
    Array2::from_shape_fn((t, t), |(i, j)| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(channels: usize, len: usize, seed: u64, rate: u32) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new(Array2::from_shape_fn((channels, len), |_| rng.gen_range(-0.5..0.5)), rate).unwrap()
    }

    fn rel_err(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
        let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn full_geometry() {
        let clip = noise_clip(2, 132_300, 1, 44_100);
        let spec = stft(&clip, 2048, 441, Some(320)).unwrap();
        assert_eq!(spec.bins.dim(), (2, 320, 1024));
        assert_eq!(spec.valid_frames, 300);
        assert!(spec.bins.slice(ndarray::s![.., 300.., ..]).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn zero_signal_gives_zero_bins() {
        let clip = AudioClip::zeros(1, 4096, 44_100);
        let spec = stft(&clip, 2048, 441, None).unwrap();
        assert!(spec.bins.iter().all(|z| z.norm() == 0.0));
        let back = istft(&spec.with_bins(Array3::zeros(spec.bins.dim())), 4096).unwrap();
        assert!(back.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sinusoid_peak_and_leakage() {
        let sr = 44_100;
        let x: Vec<f32> = (0..44_100).map(|n| (2.0 * PI * n as f64 / 441.0).sin() as f32).collect();
        let clip = AudioClip::new(Array2::from_shape_vec((1, x.len()), x).unwrap(), sr).unwrap();
        let spec = stft(&clip, 2048, 441, None).unwrap();
        let mags = spec.magnitude();
        let expected_bin = (100.0 * 2048.0 / sr as f64).round() as usize;
        let frame = mags.index_axis(Axis(0), 0).row(spec.frames() / 2).to_owned();
        let peak = (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        assert_eq!(peak, expected_bin);
        for (k, &m) in frame.iter().enumerate() {
            if (k as isize - peak as isize).abs() > 3 {
                assert!(frame[peak] >= 10.0 * m, "bin {k}: {m} vs peak {}", frame[peak]);
            }
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let clip = noise_clip(2, 20_000, 7, 44_100);
        let spec = stft(&clip, 2048, 441, None).unwrap();
        let back = istft(&spec, clip.len()).unwrap();
        let err = rel_err(&clip.samples, &back.samples);
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn round_trip_with_padding_frames() {
        let clip = noise_clip(1, 960, 3, 44_100);
        let spec = stft(&clip, 128, 32, Some(32)).unwrap();
        assert_eq!(spec.bins.dim(), (1, 32, 64));
        let back = istft(&spec, 960).unwrap();
        assert!(rel_err(&clip.samples, &back.samples) <= 1e-6);
    }

    #[test]
    fn plan_inverse_is_symmetric() {
        let plan = IstftPlan::new(128, 32, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..plan.padded_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..plan.padded_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut gu, mut gv) = (u.clone(), v.clone());
        plan.apply_inverse(&mut gu);
        plan.apply_inverse(&mut gv);
        let a: f64 = gu.iter().zip(&v).map(|(x, y)| x * y).sum();
        let b: f64 = u.iter().zip(&gv).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn synthesize_adjoint_gives_mask_gradient() {
        let (w, hop, frames, out_len) = (32, 8, 9, 60);
        let plan = IstftPlan::new(w, hop, frames);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let half = w / 2;
        let x: Vec<Complex64> = (0..frames * half).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let m: Vec<f64> = (0..frames * half).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |m: &[f64]| -> f64 {
            let y: Vec<Complex64> = x.iter().zip(m).map(|(z, a)| z * a).collect();
            plan.synthesize(&y, out_len).iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let adj = plan.synthesize_adjoint(&g);
        for idx in [0, 1, 5, half - 1, 3 * half, 4 * half + 7, frames * half - 1] {
            let f = idx % half;
            let c = if f == 0 { 1.0 } else { 2.0 };
            let analytic = c / w as f64 * (x[idx] * adj[idx].conj()).re;
            let mut mp = m.clone();
            mp[idx] += 1e-5;
            let mut mm = m.clone();
            mm[idx] -= 1e-5;
            let numeric = (loss(&mp) - loss(&mm)) / 2e-5;
            assert!((analytic - numeric).abs() <= 1e-7 * numeric.abs().max(1.0), "{idx}: {analytic} vs {numeric}");
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip_any_geometry(log_w in 4u32..9, hop_div in 2usize..8, extra in 0usize..300, seed in 0u64..1000) {
            let window = 1usize << log_w;
            let hop = (window / hop_div).max(1);
            let len = window + extra;
            let clip = noise_clip(1, len, seed, 8000);
            let spec = stft(&clip, window, hop, None).unwrap();
            // stay where the last frame's window is at least 1/2, away from
            // samples seen only through its vanishing tail
            let out = len.min(covered_len(&spec) - window / 4);
            let back = istft(&spec, out).unwrap();
            let a = clip.samples.slice(ndarray::s![.., ..out]).to_owned();
            proptest::prop_assert!(rel_err(&a, &back.samples) <= 1e-6);
        }
    }

    #[test]
    fn impulse_round_trip() {
        let mut clip = AudioClip::zeros(1, 8192, 44_100);
        clip.samples[[0, 1000]] = 1.0;
        let spec = stft(&clip, 2048, 441, None).unwrap();
        let back = istft(&spec, 8192).unwrap();
        for (i, &v) in back.samples.row(0).iter().enumerate() {
            let want = if i == 1000 { 1.0 } else { 0.0 };
            assert!((v - want).abs() <= 1e-6, "sample {i}: {v}");
        }
    }

    #[test]
    fn stft_errors() {
        let clip = AudioClip::zeros(1, 100, 8000);
        assert_eq!(stft(&clip, 100, 10, None).unwrap_err(), DspError::WindowNotPowerOfTwo(100));
        assert!(matches!(stft(&clip, 128, 200, None), Err(DspError::BadHop { .. })));
        assert!(matches!(stft(&AudioClip::zeros(1, 20, 8000), 128, 32, None), Err(DspError::TooShort { .. })));
        let spec = stft(&AudioClip::zeros(1, 960, 8000), 128, 32, None).unwrap();
        assert!(matches!(istft(&spec, 5000), Err(DspError::OutputTooLong { .. })));
    }

    #[test]
    fn parseval_with_window_compensation() {
        for seed in 0..3 {
            let clip = noise_clip(1, 6000, seed, 44_100);
            let (window, hop) = (512, 110);
            let spec = stft(&clip, window, hop, None).unwrap();
            let win = hann(window);
            let x = clip.samples.row(0);
            let mut time_energy = 0.0;
            let mut spec_energy = 0.0;
            for k in 0..spec.valid_frames {
                let frame: Vec<f64> = (0..window)
                    .map(|n| x[reflect((k * hop + n) as isize - (window / 2) as isize, x.len())] as f64 * win[n])
                    .collect();
                time_energy += frame.iter().map(|v| v * v).sum::<f64>();
                // the dropped Nyquist bin, evaluated directly
                let nyq: f64 = frame.iter().enumerate().map(|(n, v)| if n % 2 == 0 { *v } else { -v }).sum();
                let row = spec.bins.index_axis(Axis(0), 0);
                let half: f64 = row
                    .row(k)
                    .iter()
                    .enumerate()
                    .map(|(f, z)| {
                        let e = (z.re as f64).powi(2) + (z.im as f64).powi(2);
                        if f == 0 {
                            e
                        } else {
                            2.0 * e
                        }
                    })
                    .sum();
                spec_energy += (half + nyq * nyq) / window as f64;
            }
            let rel = (spec_energy - time_energy).abs() / time_energy;
            assert!(rel <= 1e-5, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn stft_is_deterministic() {
        let clip = noise_clip(2, 5000, 11, 44_100);
        let a = stft(&clip, 512, 128, None).unwrap();
        let b = stft(&clip, 512, 128, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn median_filter_examples() {
        let x = array![[1.0f32, 9.0, 1.0, 9.0, 1.0]];
        let y = median_filter(x.view(), FilterAxis::Frequency, 3).unwrap();
        assert_eq!(y, array![[1.0f32, 1.0, 9.0, 1.0, 1.0]]);
        let yt = median_filter(x.t(), FilterAxis::Time, 3).unwrap();
        assert_eq!(yt.t(), y);
        assert_eq!(median_filter(x.view(), FilterAxis::Time, 1).unwrap(), x);
        let c = Array2::from_elem((6, 7), 2.5f32);
        assert_eq!(median_filter(c.view(), FilterAxis::Time, 5).unwrap(), c);
        assert_eq!(median_filter(x.view(), FilterAxis::Time, 4).unwrap_err(), DspError::EvenFilter(4));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn fft2_impulse_and_symmetry() {
        let mut x = Array2::zeros((4, 6));
        x[[0, 0]] = 1.0f32;
        let y = fft2(x.view());
        assert!(y.iter().all(|z| (z.re - 1.0).abs() < 1e-12 && z.im.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Array2::from_shape_fn((8, 10), |_| rng.gen_range(-1.0f32..1.0));
        let y = fft2(r.view());
        for i in 0..8 {
            for j in 0..10 {
                let mirror = y[[(8 - i) % 8, (10 - j) % 10]].conj();
                assert!((y[[i, j]] - mirror).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn fft2_round_trip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((32, 32), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array2::from_shape_fn((32, 32), |_| rng.gen_range(-1.0f32..1.0));
        let back = fft2_inv(&fft2(a.view()));
        let max_err = back
            .iter()
            .zip(a.iter())
            .map(|(z, &v)| (z - Complex64::new(v as f64, 0.0)).norm())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-10, "{max_err}");

        let (sa, sb) = (0.75, -2.0);
        let mut lhs = Array2::from_shape_fn((32, 32), |(i, j)| Complex64::new(sa * a[[i, j]] as f64 + sb * b[[i, j]] as f64, 0.0));
        fft2_complex(&mut lhs, false);
        let fa = fft2(a.view());
        let fb = fft2(b.view());
        for ((l, x), y) in lhs.iter().zip(fa.iter()).zip(fb.iter()) {
            let rhs = x * sa + y * sb;
            assert!((l - rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
        }
    }

    #[test]
    fn self_similarity_examples() {
        let same = array![[1.0f32, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert!(self_similarity(same.view()).iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let ortho = array![[1.0f32, 0.0], [0.0, 1.0]];
        assert_eq!(self_similarity(ortho.view()), array![[1.0f32, 0.0], [0.0, 1.0]]);

        let s = self_similarity(array![[1.0f32, 0.0], [1.0, 1.0]].view());
        assert!((s[[0, 1]] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);

        let z = self_similarity(array![[0.0f32, 0.0], [1.0, 1.0]].view());
        assert_eq!(z, array![[1.0f32, 0.0], [0.0, 1.0]]);
    }
}
