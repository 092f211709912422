//! `extract-features`, `train-kmeans`, `make-labels` and `relabel`.

use std::path::Path;

use ndarray::{concatenate, Axis};
use pachubert_core::formats::{decode_kmeans, encode_kmeans, encode_labels, write_atomic, FeatureFile};
use pachubert_core::hash::fnv1a64;
use pachubert_core::labels::{kmeans_assign, kmeans_fit, subsample_rows, FitReport, KMeansOptions, PatchLabelSequence};
use pachubert_core::par;
use pachubert_model::separate::model_spectrogram;
use pachubert_train::{clip_features, run_relabel};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{clip_file, list_files, load_checkpoint, load_manifest, manifest_clips, read};

pub fn extract_features(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let clips = manifest_clips(&m, &cfg.model)?;
    let config_text = cfg.primitives.kv_text();
    let config_hash = fnv1a64(config_text.as_bytes());
    let feats = par::map_slice(&clips, |c| clip_features(&cfg.model, c, &cfg.primitives));
    std::fs::create_dir_all(out)?;
    for (i, f) in feats.into_iter().enumerate() {
        let file = FeatureFile {
            channels: cfg.model.channels as u32,
            frames: cfg.model.frames as u32,
            freq_bins: cfg.model.freq_bins as u32,
            patch_t: cfg.model.patch_t as u32,
            patch_f: cfg.model.patch_f as u32,
            config_hash,
            config_text: config_text.clone(),
            features: f?,
        };
        write_atomic(out.join(clip_file(i, "pacf")), &file.encode())?;
    }
    println!("clips={} config_hash={config_hash:016x} out={}", clips.len(), out.display());
    Ok(())
}

fn load_features(dir: &Path) -> Result<Vec<(String, FeatureFile)>> {
    let files = list_files(dir, "pacf")?;
    let mut out: Vec<(String, FeatureFile)> = Vec::with_capacity(files.len());
    for p in files {
        let f = FeatureFile::decode(&read(&p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        if let Some((_, first)) = out.first() {
            if f.config_hash != first.config_hash || f.features.ncols() != first.features.ncols() || f.grid() != first.grid() {
                return Err(CliError::Config(format!("{} was extracted with a different config", p.display())));
            }
        }
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((stem, f));
    }
    Ok(out)
}

fn report_line(k: usize, dim: usize, rows: usize, r: &FitReport) -> String {
    format!("k={k} dim={dim} rows={rows} iterations={} inertia={}", r.iterations, r.final_inertia)
}

pub fn train_kmeans(features: &Path, k: usize, seed: u64, max_rows: Option<usize>, out: &Path) -> Result<()> {
    let files = load_features(features)?;
    let views: Vec<_> = files.iter().map(|(_, f)| f.features.view()).collect();
    let all = concatenate(Axis(0), &views).map_err(|e| CliError::Input(e.to_string()))?;
    let rows = match max_rows {
        Some(m) if m < all.nrows() => subsample_rows(all.view(), m, seed),
        _ => all,
    };
    let (model, report) = kmeans_fit(rows.view(), &KMeansOptions::new(k, seed))?;
    write_atomic(out, &encode_kmeans(&model))?;
    println!("{}", report_line(model.k(), model.dim(), rows.nrows(), &report));
    Ok(())
}

pub fn make_labels(features: &Path, kmeans: &Path, out: &Path) -> Result<()> {
    let model = decode_kmeans(&read(kmeans)?).map_err(|e| CliError::Input(format!("{}: {e}", kmeans.display())))?;
    let files = load_features(features)?;
    std::fs::create_dir_all(out)?;
    for (stem, f) in &files {
        let labels = kmeans_assign(&model, f.features.view())?;
        let seq = PatchLabelSequence::from_flat(&labels, f.grid(), model.k());
        write_atomic(out.join(format!("{stem}.pacl")), &encode_labels(&seq))?;
    }
    println!("clips={} k={} out={}", files.len(), model.k(), out.display());
    Ok(())
}

pub struct RelabelArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub layer: usize,
    pub k: usize,
    pub seed: u64,
    pub max_rows: Option<usize>,
    pub out: &'a Path,
}

pub fn relabel(a: RelabelArgs) -> Result<()> {
    let (ck, model) = load_checkpoint(a.checkpoint)?;
    let m = load_manifest(a.manifest)?;
    let clips = manifest_clips(&m, &model)?;
    let specs = clips.iter().map(|c| model_spectrogram(&model, c)).collect::<std::result::Result<Vec<_>, _>>()?;
    let outcome = run_relabel(&ck.params, &model, &specs, a.layer, a.k, a.seed, a.max_rows)?;
    std::fs::create_dir_all(a.out)?;
    write_atomic(a.out.join("kmeans.pack"), &encode_kmeans(&outcome.model))?;
    for (i, l) in outcome.labels.iter().enumerate() {
        write_atomic(a.out.join(clip_file(i, "pacl")), &encode_labels(l))?;
    }
    println!("layer={} {}", a.layer, report_line(outcome.model.k(), outcome.model.dim(), outcome.report.assignments.len(), &outcome.report));
    Ok(())
}
