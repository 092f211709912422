//! `pachubert`: every pipeline stage as a subcommand.
//!
//! Errors print one line, `error code=<n> kind=<kind>: <message>`, and exit
//! with 2 for bad configuration, 3 for missing or corrupt input, 4 for
//! numerical failure and 1 otherwise.

mod config;
mod error;
mod inspect;
mod io;
mod labelling;
mod separation;
mod training;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pachubert_core::synth::write_corpus;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::training::StageFlags;

#[derive(Debug, Parser)]
#[command(name = "pachubert", version, about = "Self-supervised music source separation pipeline")]
struct Cli {
    /// Worker threads for data-parallel kernels; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Build training batches on the training thread instead of a prefetch worker.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML file overlaying the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile: toy or full.
    #[arg(long, global = true, default_value = "toy")]
    profile: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Output directory for checkpoints, the train log and config snapshots.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from `<out>/latest.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the deterministic synthetic corpus, its clip and song lists and
    /// the effective config.
    MakeSyntheticCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        songs: usize,
        /// Songs at the end of the list tagged `valid`.
        #[arg(long, default_value_t = 2)]
        valid: usize,
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
    },
    /// Primitive-cue patch features (one PACF per manifest clip).
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a K-means codebook (PACK) on extracted features.
    TrainKmeans {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        /// Fit on a seeded subsample of at most this many patches.
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign every feature file to its nearest centroids (one PACL each).
    MakeLabels {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        kmeans: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-unit pretraining on labelled manifest clips.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// New labels from the latents of a pretrained transformer layer.
    Relabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Transformer block, 1-based.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separation fine-tuning on song directories.
    Finetune {
        /// `song_dir<TAB>split` list.
        #[arg(long)]
        songs: PathBuf,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fraction of training songs used.
        #[arg(long)]
        data_ratio: Option<f64>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Separate a recording into one WAV per source.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Framewise SDR of separated stems against references.
    Evaluate {
        /// Directory with `mixture.wav` and one reference WAV per source.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        sources: Option<usize>,
        /// Samples per SDR frame; defaults to one second.
        #[arg(long)]
        frame_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a PACF, PACL, PACK or PACC artifact.
    Inspect { path: PathBuf },
}

fn set_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

impl TrainArgs {
    fn flags(self, deterministic: bool) -> StageFlags {
        StageFlags { out: self.out, seed: self.seed, steps: self.steps, batch_size: self.batch_size, resume: self.resume, deterministic }
    }
}

fn run(cli: Cli) -> Result<()> {
    set_threads(cli.threads)?;
    let cfg = || RunConfig::load(cli.config.as_deref(), &cli.profile);
    match cli.command {
        Command::MakeSyntheticCorpus { out, seed, songs, valid, seconds } => {
            let cfg = cfg()?;
            if songs == 0 || valid > songs || !(seconds > 0.0) {
                return Err(CliError::Config(format!("cannot make {songs} songs of {seconds} s with {valid} held out")));
            }
            let len = (seconds * cfg.model.sample_rate as f64).round() as usize;
            std::fs::create_dir_all(&out)?;
            let out = out.canonicalize()?;
            let layout = write_corpus(&out, songs, valid, len, cfg.model.clip_len, cfg.model.sample_rate, seed)?;
            io::write_text(&out.join("config.toml"), &cfg.to_toml())?;
            println!("songs={songs} clips={} songs_list={}", layout.clips.display(), layout.songs.display());
        }
        Command::ExtractFeatures { manifest, out } => labelling::extract_features(&cfg()?, &manifest, &out)?,
        Command::TrainKmeans { features, k, seed, max_rows, out } => labelling::train_kmeans(&features, k, seed, max_rows, &out)?,
        Command::MakeLabels { features, kmeans, out } => labelling::make_labels(&features, &kmeans, &out)?,
        Command::Pretrain { manifest, labels, train } => training::pretrain(&cfg()?, &manifest, &labels, &train.flags(cli.deterministic))?,
        Command::Relabel { checkpoint, manifest, layer, k, seed, max_rows, out } => {
            labelling::relabel(labelling::RelabelArgs { checkpoint: &checkpoint, manifest: &manifest, layer, k, seed, max_rows, out: &out })?
        }
        Command::Finetune { songs, init, data_ratio, train } => {
            training::finetune(&cfg()?, &songs, init.as_deref(), data_ratio, &train.flags(cli.deterministic))?
        }
        Command::Separate { checkpoint, input, out } => separation::run_separate(&checkpoint, &input, &out)?,
        Command::Evaluate { reference, estimates, sources, frame_len, out } => {
            separation::evaluate(&reference, &estimates, sources, frame_len, out.as_deref())?
        }
        Command::Inspect { path } => inspect::inspect(&path)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
