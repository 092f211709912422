//! Patch aggregation of primitive cues and K-means pseudo-labelling.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::Spectrogram;
use crate::par;
use crate::primitives::{extract_all, PrimitiveConfig, PrimitiveError, PrimitiveFeatureMap, N_CUES};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("cue map [{t} x {f}] is not divisible into ({patch_t}, {patch_f}) patches with an even frequency size")]
    Indivisible { t: usize, f: usize, patch_t: usize, patch_f: usize },
    #[error("{n} points cannot form {k} clusters")]
    TooFewPoints { n: usize, k: usize },
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("features are degenerate: every row is identical")]
    Degenerate,
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("feature dimension {found} does not match the model's {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
}

/// Aggregated cue vector for one TF patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeature {
    /// `24 * C` values: per channel, the low-band then high-band 12-cue means.
    pub vec: Vec<f32>,
    /// (time patch index, frequency patch index)
    pub patch_coord: (usize, usize),
}

/// Splits the cue map into non-overlapping `(patch_t, patch_f)` patches,
/// emitted time-major (time patch outer, frequency patch inner).
pub fn patchify(cues: &PrimitiveFeatureMap, patch_t: usize, patch_f: usize) -> Result<Vec<PatchFeature>, LabelError> {
    let (c, t, f, n) = cues.cues.dim();
    debug_assert_eq!(n, N_CUES);
    if patch_t == 0 || patch_f == 0 || t % patch_t != 0 || f % patch_f != 0 || !patch_f.is_multiple_of(2) {
        return Err(LabelError::Indivisible { t, f, patch_t, patch_f });
    }
    let (gt, gf) = (t / patch_t, f / patch_f);
    let half = patch_f / 2;
    let count = (patch_t * half) as f64;
    Ok(par::map_range(gt * gf, |idx| {
        let (pt, pf) = (idx / gf, idx % gf);
        let mut vec = Vec::with_capacity(2 * N_CUES * c);
        for ch in 0..c {
            for band in 0..2 {
                let f0 = pf * patch_f + band * half;
                let block = cues.cues.slice(s![ch, pt * patch_t..(pt + 1) * patch_t, f0..f0 + half, ..]);
                for cue in 0..N_CUES {
                    let sum: f64 = block.index_axis(Axis(2), cue).iter().map(|&v| v as f64).sum();
                    vec.push((sum / count) as f32);
                }
            }
        }
        PatchFeature { vec, patch_coord: (pt, pf) }
    }))
}

/// Stacks patch features into an `[N, D]` matrix.
pub fn feature_matrix(features: &[PatchFeature]) -> Array2<f32> {
    let d = features.first().map_or(0, |p| p.vec.len());
    Array2::from_shape_fn((features.len(), d), |(i, j)| features[i].vec[j])
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (standardised units).
    pub tol: f64,
    /// Standardise each dimension to zero mean and unit variance first.
    pub standardize: bool,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, max_iters: 100, tol: 1e-6, standardize: true }
    }
}

/// Centroids live in standardised feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Array2<f32>,
    pub feature_mean: Vec<f32>,
    pub feature_std: Vec<f32>,
    pub seed: u64,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    fn standardized(&self, x: ArrayView2<f32>) -> Array2<f64> {
        standardize_with(x, &self.feature_mean, &self.feature_std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Inertia after each Lloyd assignment step.
    pub inertia_history: Vec<f64>,
    /// Inertia of the stored (f32) centroids under nearest assignment.
    pub final_inertia: f64,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// Standardised values are rounded to f32 so that centroids stored as f32
/// can coincide with points exactly.
fn standardize_with(x: ArrayView2<f32>, mean: &[f32], std: &[f32]) -> Array2<f64> {
    Array2::from_shape_fn(x.dim(), |(i, j)| ((x[[i, j]] as f64 - mean[j] as f64) / std[j] as f64) as f32 as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row (lowest index on ties) and total inertia.
fn assign_rows(x: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>, f64) {
    let xs = x.as_slice().expect("standard layout");
    let cs = centroids.as_slice().expect("standard layout");
    let d = x.ncols();
    let k = centroids.nrows();
    let pairs = par::map_range(x.nrows(), |i| {
        let row = &xs[i * d..(i + 1) * d];
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let dist = sq_dist(row, &cs[c * d..(c + 1) * d]);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best
    });
    let inertia = pairs.iter().map(|p| p.1).sum();
    let (labels, dists) = pairs.into_iter().unzip();
    (labels, dists, inertia)
}

fn kmeans_pp(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i).as_slice().unwrap(), x.row(chosen[0]).as_slice().unwrap())).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen centre
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("n >= k"),
        };
        chosen.push(next);
        let c = x.row(next).to_owned();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(i).as_slice().unwrap(), c.as_slice().unwrap()));
        }
    }
    let mut out = Array2::zeros((k, x.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_fit(features: ArrayView2<f32>, opts: &KMeansOptions) -> Result<(KMeansModel, FitReport), LabelError> {
    let (n, d) = features.dim();
    let k = opts.k;
    if k < 2 {
        return Err(LabelError::TooFewClusters(k));
    }
    if n < k {
        return Err(LabelError::TooFewPoints { n, k });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(LabelError::NonFinite);
    }
    if features.rows().into_iter().all(|r| r == features.row(0)) {
        return Err(LabelError::Degenerate);
    }

    let (mean, std): (Vec<f32>, Vec<f32>) = if opts.standardize {
        (0..d)
            .map(|j| {
                let col = features.column(j);
                let m = col.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = col.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
                let s = var.sqrt() as f32;
                (m as f32, if s > 0.0 && s.is_finite() { s } else { 1.0 })
            })
            .unzip()
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let x = standardize_with(features, &mean, &std);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = kmeans_pp(&x, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let (mut labels, dists, inertia) = assign_rows(&x, &centroids);
        history.push(inertia);

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // re-seed empty clusters from the points farthest from their centroid
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                taken[i] = true;
            }
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &x.row(i);
        }
        let mut movement = 0.0f64;
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let new = sums.row(c).mapv(|v| v / n as f64);
            movement = movement.max(sq_dist(new.as_slice().unwrap(), centroids.row(c).to_owned().as_slice().unwrap()).sqrt());
            centroids.row_mut(c).assign(&new);
        }
        if movement < opts.tol {
            break;
        }
    }

    let stored = centroids.mapv(|v| v as f32);
    let (assignments, _, final_inertia) = assign_rows(&x, &stored.mapv(|v| v as f64));
    let model = KMeansModel { centroids: stored, feature_mean: mean, feature_std: std, seed: opts.seed };
    Ok((model, FitReport { inertia_history: history, final_inertia, assignments, iterations }))
}

/// Nearest centroid in standardised space; ties go to the lowest index.
pub fn kmeans_assign(model: &KMeansModel, features: ArrayView2<f32>) -> Result<Vec<usize>, LabelError> {
    kmeans_assign_with_inertia(model, features).map(|(l, _)| l)
}

pub fn kmeans_assign_with_inertia(
    model: &KMeansModel,
    features: ArrayView2<f32>,
) -> Result<(Vec<usize>, f64), LabelError> {
    if features.ncols() != model.dim() {
        return Err(LabelError::Dimension { expected: model.dim(), found: features.ncols() });
    }
    let x = model.standardized(features);
    let (labels, _, inertia) = assign_rows(&x, &model.centroids.mapv(|v| v as f64));
    Ok((labels, inertia))
}

/// Uniform subsample of at most `max_rows` rows, in original order.
pub fn subsample_rows(features: ArrayView2<f32>, max_rows: usize, seed: u64) -> Array2<f32> {
    let n = features.nrows();
    if n <= max_rows {
        return features.to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, max_rows).into_vec();
    idx.sort_unstable();
    features.select(Axis(0), &idx)
}

/// Cluster index per encoder token, `[T / patch_t, F / patch_f]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabelSequence {
    pub labels: Array2<u16>,
    pub k: usize,
}

impl PatchLabelSequence {
    pub fn from_flat(flat: &[usize], grid: (usize, usize), k: usize) -> Self {
        Self { labels: Array2::from_shape_fn(grid, |(i, j)| flat[i * grid.1 + j] as u16), k }
    }

    /// Time-major flattening, matching the token order.
    pub fn flat(&self) -> Vec<usize> {
        self.labels.iter().map(|&v| v as usize).collect()
    }
}

/// Cue extraction, patch aggregation and cluster assignment for one clip.
pub fn label_clip(
    spec: &Spectrogram,
    model: &KMeansModel,
    cfg: &PrimitiveConfig,
    patch_t: usize,
    patch_f: usize,
) -> Result<PatchLabelSequence, LabelError> {
    let cues = extract_all(spec, cfg)?;
    let feats = patchify(&cues, patch_t, patch_f)?;
    let grid = (spec.frames() / patch_t, spec.freq_bins() / patch_f);
    let labels = kmeans_assign(model, feature_matrix(&feats).view())?;
    Ok(PatchLabelSequence::from_flat(&labels, grid, model.k()))
}

/// Fits a fresh codebook on intermediate transformer activations.
pub fn relabel_from_latents(latents: ArrayView2<f32>, k: usize, seed: u64) -> Result<(KMeansModel, FitReport), LabelError> {
    kmeans_fit(latents, &KMeansOptions::new(k, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    #[test]
    fn four_points_two_clusters_raw_space() {
        let x = array![[0.0f32, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let opts = KMeansOptions { standardize: false, ..KMeansOptions::new(2, 0) };
        let (m, r) = kmeans_fit(x.view(), &opts).unwrap();
        let mut cs: Vec<(f32, f32)> = m.centroids.rows().into_iter().map(|r| (r[0], r[1])).collect();
        cs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(cs, vec![(0.0, 0.5), (10.0, 0.5)]);
        assert_eq!(r.final_inertia, 1.0);
    }

    #[test]
    fn k_equals_n() {
        let x = array![[0.0f32, 1.0], [2.0, 0.5], [3.0, 3.0], [-1.0, 2.0]];
        let (_, r) = kmeans_fit(x.view(), &KMeansOptions::new(4, 7)).unwrap();
        assert_eq!(r.final_inertia, 0.0);
        let mut l = r.assignments.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fit_errors() {
        let x = array![[1.0f32, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert_eq!(kmeans_fit(x.view(), &KMeansOptions::new(2, 0)).unwrap_err(), LabelError::Degenerate);
        assert_eq!(
            kmeans_fit(x.view(), &KMeansOptions::new(5, 0)).unwrap_err(),
            LabelError::TooFewPoints { n: 3, k: 5 }
        );
        let y = array![[f32::NAN, 0.0], [1.0, 1.0]];
        assert_eq!(kmeans_fit(y.view(), &KMeansOptions::new(2, 0)).unwrap_err(), LabelError::NonFinite);
    }

    #[test]
    fn assign_exact_and_ties() {
        let model = KMeansModel {
            centroids: array![[9.0f32, 9.0], [8.0, 8.0], [0.0, 1.0], [5.0, 5.0], [7.0, 7.0], [0.0, -1.0]],
            feature_mean: vec![0.0, 0.0],
            feature_std: vec![1.0, 1.0],
            seed: 0,
        };
        assert_eq!(kmeans_assign(&model, array![[5.0f32, 5.0]].view()).unwrap(), vec![3]);
        // equidistant between centroid 2 and 5
        assert_eq!(kmeans_assign(&model, array![[0.0f32, 0.0]].view()).unwrap(), vec![2]);
        assert_eq!(
            kmeans_assign(&model, array![[0.0f32, 0.0, 1.0]].view()).unwrap_err(),
            LabelError::Dimension { expected: 2, found: 3 }
        );
    }

    #[test]
    fn patchify_geometry() {
        let cues = PrimitiveFeatureMap { cues: Array4::from_elem((2, 320, 1024, 12), 0.5f32) };
        let feats = patchify(&cues, 32, 64).unwrap();
        assert_eq!(feats.len(), 160);
        assert!(feats.iter().all(|p| p.vec.len() == 48 && p.vec.iter().all(|&v| v == 0.5)));
        assert_eq!(feats[17].patch_coord, (1, 1));

        let mono = PrimitiveFeatureMap { cues: Array4::from_elem((1, 64, 128, 12), 0.25f32) };
        assert!(patchify(&mono, 32, 64).unwrap().iter().all(|p| p.vec.len() == 24));
        assert!(patchify(&mono, 30, 64).is_err());
        assert!(patchify(&mono, 32, 63).is_err());
    }

    #[test]
    fn patchify_low_high_split() {
        let mut cues = Array4::<f32>::zeros((1, 2, 4, 12));
        // cue 0 is 1 in the upper half of the single patch
        for t in 0..2 {
            for f in 2..4 {
                cues[[0, t, f, 0]] = 1.0;
            }
        }
        let feats = patchify(&PrimitiveFeatureMap { cues }, 2, 4).unwrap();
        assert_eq!(feats[0].vec[0], 0.0);
        assert_eq!(feats[0].vec[12], 1.0);
    }

    #[test]
    fn subsample_keeps_order() {
        let x = Array2::from_shape_fn((100, 2), |(i, _)| i as f32);
        let s = subsample_rows(x.view(), 10, 3);
        assert_eq!(s.nrows(), 10);
        assert!(s.column(0).windows(2).into_iter().all(|w| w[0] < w[1]));
        assert_eq!(subsample_rows(x.view(), 200, 3), x);
    }
}
