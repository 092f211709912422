//! Framewise energy-ratio SDR and masked-prediction accuracy.

use thiserror::Error;

use crate::audio::AudioClip;

/// Frames whose reference energy is below this are skipped.
pub const SILENCE_ENERGY: f64 = 1e-12;
pub const SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("reference is {ref_shape:?} but estimate is {est_shape:?}")]
    ShapeMismatch { ref_shape: (usize, usize), est_shape: (usize, usize) },
    #[error("frame length must be positive")]
    ZeroFrame,
    #[error("no reports to aggregate")]
    Empty,
    #[error("empty mask")]
    EmptyMask,
    #[error("{0} labels for {1} logit rows")]
    LabelCount(usize, usize),
}

/// Per-frame SDR of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSdr {
    pub name: String,
    /// dB for each non-silent frame, in time order.
    pub frames: Vec<f64>,
}

impl SourceSdr {
    /// `None` when every frame had a silent reference.
    pub fn median(&self) -> Option<f64> {
        median_f64(&self.frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdrReport {
    pub sources: Vec<SourceSdr>,
    pub frame_len: usize,
}

impl SdrReport {
    /// One line per source: `name median_db frame_count`.
    pub fn to_text(&self) -> String {
        self.sources
            .iter()
            .map(|s| match s.median() {
                Some(m) => format!("{} {:.3} {}\n", s.name, m, s.frames.len()),
                None => format!("{} no-voiced-frames 0\n", s.name),
            })
            .collect()
    }

    /// `source.<name>.median_db=…` / `source.<name>.frames=…` lines.
    pub fn to_kv(&self) -> String {
        let mut out = format!("frame_len={}\n", self.frame_len);
        for s in &self.sources {
            match s.median() {
                Some(m) => out.push_str(&format!("source.{}.median_db={m}\n", s.name)),
                None => out.push_str(&format!("source.{}.median_db=none\n", s.name)),
            }
            out.push_str(&format!("source.{}.frames={}\n", s.name, s.frames.len()));
        }
        out
    }
}

/// Median; even counts average the two central values.
pub fn median_f64(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// `10 log10(sum s^2 / sum (s - s_hat)^2)` over non-overlapping frames,
/// pooled across channels and capped at 100 dB. A trailing partial frame is
/// included.
pub fn framewise_sdr(reference: &AudioClip, estimate: &AudioClip, frame_len: usize) -> Result<Vec<f64>, EvalError> {
    if reference.samples.dim() != estimate.samples.dim() {
        return Err(EvalError::ShapeMismatch {
            ref_shape: reference.samples.dim(),
            est_shape: estimate.samples.dim(),
        });
    }
    if frame_len == 0 {
        return Err(EvalError::ZeroFrame);
    }
    let len = reference.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + frame_len).min(len);
        let mut sig = 0.0f64;
        let mut err = 0.0f64;
        for c in 0..reference.channels() {
            for i in start..end {
                let s = reference.samples[[c, i]] as f64;
                let e = s - estimate.samples[[c, i]] as f64;
                sig += s * s;
                err += e * e;
            }
        }
        if sig >= SILENCE_ENERGY {
            let sdr = if err == 0.0 { SDR_CAP_DB } else { (10.0 * (sig / err).log10()).min(SDR_CAP_DB) };
            out.push(sdr);
        }
        start = end;
    }
    Ok(out)
}

/// SDR report for named (reference, estimate) pairs.
pub fn sdr_report(pairs: &[(&str, &AudioClip, &AudioClip)], frame_len: usize) -> Result<SdrReport, EvalError> {
    let sources = pairs
        .iter()
        .map(|(name, r, e)| Ok(SourceSdr { name: name.to_string(), frames: framewise_sdr(r, e, frame_len)? }))
        .collect::<Result<_, EvalError>>()?;
    Ok(SdrReport { sources, frame_len })
}

/// Per-source median of per-track medians. Sources are matched by position;
/// tracks without any voiced frame for a source are skipped for it.
pub fn median_over_tracks(reports: &[SdrReport]) -> Result<Vec<(String, Option<f64>)>, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    Ok(first
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let medians: Vec<f64> = reports.iter().filter_map(|r| r.sources.get(i).and_then(|s| s.median())).collect();
            (s.name.clone(), median_f64(&medians))
        })
        .collect())
}

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of masked rows whose argmax logit equals the label.
pub fn masked_accuracy(logits: &[Vec<f32>], labels: &[usize], mask: &[usize]) -> Result<f64, EvalError> {
    if mask.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    if labels.len() != logits.len() {
        return Err(EvalError::LabelCount(labels.len(), logits.len()));
    }
    let hits = mask.iter().filter(|&&t| argmax(&logits[t]) == labels[t]).count();
    Ok(hits as f64 / mask.len() as f64)
}
