//! Seeded batch assembly, subsets, splits and crops.
//!
//! Every batch is a pure function of `(seed, step)`, so prefetching on a
//! worker thread and inline loading give identical runs.

use std::sync::mpsc::sync_channel;

use pachubert_core::audio::AudioClip;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::TrainError;

/// Mixes a run seed with stream identifiers (splitmix64 finaliser).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub(crate) mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const MASK: u64 = 2;
    pub const CROP: u64 = 3;
    pub const VALID_MASK: u64 = 4;
    pub const SUBSET: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const INIT: u64 = 7;
}

/// Epoch-wise shuffled batches that drop the incomplete tail.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self, TrainError> {
        if batch == 0 || batch > n {
            return Err(TrainError::Config(format!("batch size {batch} needs at least that many training items, have {n}")));
        }
        Ok(Self { n, batch, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    /// Item indices of the batch used at 0-based `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, k) = (step / per, (step % per) as usize);
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[stream::SHUFFLE, epoch])));
        order[k * self.batch..(k + 1) * self.batch].to_vec()
    }
}

/// `round(ratio * n)` indices, ascending. A seeded permutation is cut at the
/// requested size, so smaller ratios select subsets of larger ones.
pub fn select_subset(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>, TrainError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TrainError::Config(format!("data ratio {ratio} outside (0, 1]")));
    }
    let count = ((ratio * n as f64).round() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SUBSET])));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Exact sizes; they must add up to the input size.
    Counts { train: usize, valid: usize },
    /// Fraction of items held out, rounded.
    ValidFraction(f64),
}

/// Seeded disjoint split covering every item once. Each side keeps the
/// input order.
pub fn make_validation_split<T: Clone>(items: &[T], spec: SplitSpec, seed: u64) -> Result<(Vec<T>, Vec<T>), TrainError> {
    let n = items.len();
    let n_valid = match spec {
        SplitSpec::Counts { train, valid } => {
            if train + valid > n {
                return Err(TrainError::Config(format!("split {train} + {valid} exceeds {n} items")));
            }
            if train + valid < n {
                return Err(TrainError::Config(format!("split {train} + {valid} leaves {} of {n} items unassigned", n - train - valid)));
            }
            valid
        }
        SplitSpec::ValidFraction(f) if (0.0..=1.0).contains(&f) => (f * n as f64).round() as usize,
        SplitSpec::ValidFraction(f) => return Err(TrainError::Config(format!("validation fraction {f} outside [0, 1]"))),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SPLIT])));
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let pick = |want: bool| items.iter().zip(&is_valid).filter(|(_, &v)| v == want).map(|(t, _)| t.clone()).collect();
    Ok((pick(false), pick(true)))
}

/// A mixture with its stems, all the same shape.
#[derive(Debug, Clone)]
pub struct FinetuneSong {
    pub mixture: AudioClip,
    pub stems: Vec<AudioClip>,
}

impl FinetuneSong {
    /// Converts to `channels` and checks the stems against the mixture.
    pub fn new(mixture: AudioClip, stems: Vec<AudioClip>, channels: usize) -> Result<Self, TrainError> {
        let mixture = mixture.with_channels(channels)?;
        let stems = stems.into_iter().map(|s| s.with_channels(channels)).collect::<Result<Vec<_>, _>>()?;
        for (i, s) in stems.iter().enumerate() {
            if s.len() != mixture.len() || s.sample_rate != mixture.sample_rate {
                return Err(TrainError::StemMismatch(format!(
                    "stem {i} is {} samples at {} Hz, mixture is {} at {} Hz",
                    s.len(),
                    s.sample_rate,
                    mixture.len(),
                    mixture.sample_rate
                )));
            }
        }
        Ok(Self { mixture, stems })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Mixture and stems cut at `start`.
    pub fn crop(&self, start: usize, len: usize) -> (AudioClip, Vec<AudioClip>) {
        (self.mixture.slice_padded(start, len), self.stems.iter().map(|s| s.slice_padded(start, len)).collect())
    }
}

/// Random crop start for `item` at `step`.
pub fn crop_start(seed: u64, step: u64, item: usize, song_len: usize, clip_len: usize) -> usize {
    if song_len <= clip_len {
        return 0;
    }
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::CROP, step, item as u64])).gen_range(0..=song_len - clip_len)
}

/// Runs `consume` over `make(step)` for `steps`. With `prefetch`, batches
/// are built on a worker thread through a bounded queue.
pub fn drive<B: Send, E: Send>(
    steps: std::ops::Range<u64>,
    prefetch: bool,
    make: impl Fn(u64) -> Result<B, E> + Sync,
    mut consume: impl FnMut(u64, B) -> Result<bool, E>,
) -> Result<(), E> {
    if !prefetch {
        for s in steps {
            if !consume(s, make(s)?)? {
                break;
            }
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<(u64, Result<B, E>)>(4);
        let make = &make;
        let range = steps.clone();
        scope.spawn(move || {
            for s in range {
                if tx.send((s, make(s))).is_err() {
                    break;
                }
            }
        });
        for (s, batch) in rx {
            if !consume(s, batch?)? {
                break;
            }
        }
        Ok(())
    })
}
