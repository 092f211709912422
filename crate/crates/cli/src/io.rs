//! Artifact naming, manifest loading and atomic writes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use pachubert_autodiff::Checkpoint;
use pachubert_core::audio::{read_wav, read_wav_as, write_wav, AudioClip, ClipManifest, Split, WavFormat};
use pachubert_core::formats::write_atomic;
use pachubert_core::synth::SOURCES;
use pachubert_model::ModelConfig;
use pachubert_train::FinetuneSong;

use crate::error::{CliError, Result};

/// File name of the artifact for manifest entry `i`.
pub fn clip_file(i: usize, ext: &str) -> String {
    format!("clip_{i:05}.{ext}")
}

/// Stem names: the four standard sources, or `source_<i>` otherwise.
pub fn source_names(n: usize) -> Vec<String> {
    if n == SOURCES.len() {
        SOURCES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("source_{i}")).collect()
    }
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    require(path)?;
    Ok(fs::read(path)?)
}

/// Relative paths in a list file are taken relative to that file.
fn resolve(list: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        list.parent().unwrap_or(Path::new(".")).join(entry)
    }
}

pub fn load_manifest(path: &Path) -> Result<ClipManifest> {
    require(path)?;
    let mut m = ClipManifest::load(path)?;
    for e in &mut m.entries {
        e.path = resolve(path, &e.path);
    }
    Ok(m)
}

/// Reads every manifest clip at the model's channel count and rate.
pub fn manifest_clips(m: &ClipManifest, cfg: &ModelConfig) -> Result<Vec<AudioClip>> {
    if let Some(len) = m.clip_len() {
        if len != cfg.clip_len {
            return Err(CliError::Config(format!("manifest clips are {len} samples, the model expects {}", cfg.clip_len)));
        }
    }
    let mut cache: HashMap<&Path, AudioClip> = HashMap::new();
    let mut out = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        if !cache.contains_key(e.path.as_path()) {
            require(&e.path)?;
            cache.insert(&e.path, read_wav_as(&e.path, cfg.channels, cfg.sample_rate)?);
        }
        let audio = &cache[e.path.as_path()];
        if e.start + e.len > audio.len() {
            return Err(CliError::Input(format!("{} holds {} samples; entry ends at {}", e.path.display(), audio.len(), e.start + e.len)));
        }
        out.push(audio.slice_padded(e.start, e.len));
    }
    Ok(out)
}

/// `song_dir<TAB>split` lines.
pub fn load_song_list(path: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |d: String| CliError::Input(format!("{} line {}: {d}", path.display(), i + 1));
            let (dir, split) = line.split_once('\t').ok_or_else(|| bad("expected song_dir<TAB>split".into()))?;
            Ok((resolve(path, Path::new(dir)), split.trim().parse().map_err(bad)?))
        })
        .collect()
}

/// Mixture and stems of one song directory.
pub fn load_song(dir: &Path, cfg: &ModelConfig) -> Result<FinetuneSong> {
    let read = |name: &str| -> Result<AudioClip> {
        let p = dir.join(format!("{name}.wav"));
        require(&p)?;
        Ok(read_wav_as(&p, cfg.channels, cfg.sample_rate)?)
    };
    let mixture = read("mixture")?;
    let stems = source_names(cfg.n_sources).iter().map(|n| read(n)).collect::<Result<Vec<_>>>()?;
    Ok(FinetuneSong::new(mixture, stems, cfg.channels)?)
}

pub fn read_audio(path: &Path) -> Result<AudioClip> {
    require(path)?;
    Ok(read_wav(path)?)
}

/// WAV written to a sibling temp file and renamed into place.
pub fn write_wav_atomic(clip: &AudioClip, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    write_wav(clip, &tmp, WavFormat::Float32)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// A checkpoint with the model config it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, ModelConfig)> {
    let ck = Checkpoint::decode(&read(path)?)?;
    let cfg = ModelConfig::from_toml(&ck.config_text)?;
    if cfg.hash() != ck.config_hash {
        return Err(CliError::Input(format!("corrupt artifact: {} config text does not match its hash", path.display())));
    }
    Ok((ck, cfg))
}

/// Sorted files with extension `ext` in `dir`.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    require(dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Input(format!("no .{ext} files in {}", dir.display())));
    }
    Ok(files)
}
