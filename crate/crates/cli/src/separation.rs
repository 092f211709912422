//! `separate` and `evaluate`.

use std::path::Path;

use pachubert_core::eval::sdr_report;
use pachubert_model::separate;

use crate::error::{CliError, Result};
use crate::io::{load_checkpoint, read_audio, source_names, write_text, write_wav_atomic};

pub fn run_separate(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (ck, cfg) = load_checkpoint(checkpoint)?;
    let mixture = read_audio(input)?;
    let stems = separate(&ck.params, &cfg, &mixture)?;
    for (stem, name) in stems.iter().zip(source_names(cfg.n_sources)) {
        if stem.samples.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!("separated {name} contains non-finite samples")));
        }
        write_wav_atomic(stem, &out.join(format!("{name}.wav")))?;
    }
    println!("sources={} samples={} out={}", stems.len(), mixture.len(), out.display());
    Ok(())
}

/// Scores `<estimates>/<source>.wav` against `<reference>/<source>.wav`, with
/// the reference mixture as a baseline estimate.
pub fn evaluate(reference: &Path, estimates: &Path, n_sources: Option<usize>, frame_len: Option<usize>, out: Option<&Path>) -> Result<()> {
    let names = match n_sources {
        Some(n) => source_names(n),
        None => {
            let four = source_names(4);
            if four.iter().all(|n| reference.join(format!("{n}.wav")).exists()) {
                four
            } else {
                source_names(2)
            }
        }
    };
    let mixture = read_audio(&reference.join("mixture.wav"))?;
    let frame = frame_len.unwrap_or(mixture.sample_rate as usize);
    let refs = names.iter().map(|n| read_audio(&reference.join(format!("{n}.wav")))).collect::<Result<Vec<_>>>()?;
    let ests = names.iter().map(|n| read_audio(&estimates.join(format!("{n}.wav")))).collect::<Result<Vec<_>>>()?;
    let est_pairs: Vec<_> = names.iter().zip(refs.iter().zip(&ests)).map(|(n, (r, e))| (n.as_str(), r, e)).collect();
    let base_pairs: Vec<_> = names.iter().zip(&refs).map(|(n, r)| (n.as_str(), r, &mixture)).collect();
    let est = sdr_report(&est_pairs, frame)?;
    let base = sdr_report(&base_pairs, frame)?;
    let mut text = est.to_kv();
    for (e, b) in est.sources.iter().zip(&base.sources) {
        let show = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        text.push_str(&format!("source.{}.baseline_db={}\n", e.name, show(b.median())));
        text.push_str(&format!("source.{}.gain_db={}\n", e.name, show(e.median().zip(b.median()).map(|(x, y)| x - y))));
    }
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    Ok(())
}
