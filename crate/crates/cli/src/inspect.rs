//! Human-readable summaries of binary artifacts.

use std::path::Path;

use pachubert_autodiff::Checkpoint;
use pachubert_core::formats::{decode_kmeans, decode_labels, sniff_magic, FeatureFile, FormatError, CHECKPOINT_MAGIC, FEATURE_MAGIC, FEATURE_VERSION, KMEANS_MAGIC, LABEL_MAGIC};

use crate::error::{CliError, Result};
use crate::io::read;

fn stats(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    (lo, sum / n.max(1) as f64, hi)
}

pub fn describe(data: &[u8]) -> Result<String> {
    let magic = sniff_magic(data)?;
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    match &magic {
        m if m == FEATURE_MAGIC => {
            let f = FeatureFile::decode(data)?;
            let (lo, mean, hi) = stats(f.features.iter().map(|&v| v as f64));
            line("format=PACF".into());
            line(format!("version={FEATURE_VERSION}"));
            line(format!("spectrogram={}x{}x{}", f.channels, f.frames, f.freq_bins));
            line(format!("patch={}x{}", f.patch_t, f.patch_f));
            line(format!("grid={}x{}", f.grid().0, f.grid().1));
            line(format!("features={}x{}", f.features.nrows(), f.features.ncols()));
            line(format!("config_hash={:016x}", f.config_hash));
            line(format!("value_min={lo} value_mean={mean} value_max={hi}"));
        }
        m if m == LABEL_MAGIC => {
            let l = decode_labels(data)?;
            let mut hist = vec![0usize; l.k];
            for &c in l.labels.iter() {
                hist[c as usize] += 1;
            }
            let (gt, gf) = l.labels.dim();
            line("format=PACL".into());
            line(format!("k={}", l.k));
            line(format!("grid={gt}x{gf}"));
            line(format!("histogram={}", hist.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")));
            line(format!("histogram_total={}", hist.iter().sum::<usize>()));
            line(format!("classes_used={}", hist.iter().filter(|&&c| c > 0).count()));
        }
        m if m == KMEANS_MAGIC => {
            let k = decode_kmeans(data)?;
            let norms = k.centroids.rows().into_iter().map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt());
            let (lo, mean, hi) = stats(norms);
            line("format=PACK".into());
            line(format!("k={}", k.k()));
            line(format!("dim={}", k.dim()));
            line(format!("seed={}", k.seed));
            line(format!("centroid_norm_min={lo} centroid_norm_mean={mean} centroid_norm_max={hi}"));
        }
        m if m == CHECKPOINT_MAGIC => {
            let ck = Checkpoint::decode(data)?;
            line("format=PACC".into());
            line(format!("version={}", pachubert_autodiff::checkpoint::CHECKPOINT_VERSION));
            line(format!("config_hash={:016x}", ck.config_hash));
            line(format!("step={}", ck.step));
            line(format!("tensors={}", ck.params.params.len() + ck.params.buffers.len()));
            line(format!("parameters={}", ck.params.num_scalars()));
            line(format!("optimizer_state={}", ck.optimizer.is_some()));
        }
        _ => return Err(FormatError::UnknownMagic(magic).into()),
    }
    Ok(out)
}

pub fn inspect(path: &Path) -> Result<()> {
    let data = read(path)?;
    let text = describe(&data).map_err(|e| match e {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    })?;
    print!("{text}");
    Ok(())
}
