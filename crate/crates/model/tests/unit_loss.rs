//! Masked-unit loss identities, in float64.

use pachubert_autodiff::{Graph, ParamStore, Tensor};
use pachubert_model::network::init_params;
use pachubert_model::{ModelConfig, ModelError, Net};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(classes: usize) -> ModelConfig {
    ModelConfig { classes, ..ModelConfig::toy() }
}

fn store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    init_params(cfg, seed).cast()
}

/// Loss over `[n_rows, h]` bottleneck outputs given directly.
fn loss_on(cfg: &ModelConfig, store: &ParamStore<f64>, out: &Tensor<f64>, labels: &[usize], mask: &[bool]) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut net = Net::new(&mut g, &vars, store, cfg, true);
    let o = net.g.constant(out.clone());
    let logits = net.unit_logits(o)?;
    let loss = net.unit_loss(logits, labels, mask)?;
    Ok(g.value(loss).data[0])
}

fn random_case(cfg: &ModelConfig, seed: u64) -> (Tensor<f64>, Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_tokens();
    let out = Tensor::uniform(&[1, n, cfg.hidden], 1.0, &mut rng);
    let labels = (0..n).map(|_| rng.gen_range(0..cfg.classes)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    mask[0] = true;
    (out, labels, mask)
}

#[test]
fn identical_class_embeddings_give_ln_k() {
    let cfg = config(960);
    let mut s = store(&cfg, 1);
    let row: Vec<f64> = s.get("head.classes").unwrap().data[..cfg.proj_dim].to_vec();
    let classes = s.params.get_mut("head.classes").unwrap();
    for chunk in classes.data.chunks_mut(cfg.proj_dim) {
        chunk.copy_from_slice(&row);
    }
    let (out, labels, mask) = random_case(&cfg, 2);
    let loss = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    assert!((loss - 960f64.ln()).abs() <= 1e-12);
    assert!((loss - 6.86693).abs() <= 1e-5, "{loss}");
}

#[test]
fn vanishing_tau_gives_ln_k() {
    let cfg = ModelConfig { tau: 1e-9, ..config(960) };
    let s = store(&cfg, 3);
    let (out, labels, mask) = random_case(&cfg, 4);
    let loss = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    assert!((loss - 960f64.ln()).abs() <= 1e-6, "{loss}");
}

/// One masked token whose projection equals its class embedding, all other
/// embeddings orthogonal to it: logits are `tau` once and 0 elsewhere.
#[test]
fn single_token_closed_form() {
    let cfg = config(960);
    let mut s = store(&cfg, 5);
    let e = cfg.proj_dim;
    let w = s.params.get_mut("head.proj.w").unwrap();
    w.data.iter_mut().for_each(|v| *v = 0.0);
    let b = s.params.get_mut("head.proj.b").unwrap();
    b.data.iter_mut().for_each(|v| *v = 0.0);
    b.data[0] = 1.0;
    let label = 17;
    let classes = s.params.get_mut("head.classes").unwrap();
    for (c, row) in classes.data.chunks_mut(e).enumerate() {
        if c == label {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 3.0;
        } else {
            row[0] = 0.0;
        }
    }
    let (out, mut labels, _) = random_case(&cfg, 6);
    let mut mask = vec![false; cfg.n_tokens()];
    mask[11] = true;
    labels[11] = label;
    let loss = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    let tau: f64 = 10.0;
    let closed = -(tau.exp() / (tau.exp() + 959.0)).ln();
    assert!((loss - closed).abs() <= 1e-4, "{loss} vs {closed}");
    assert!((closed - 0.042617).abs() < 1e-6);
}

#[test]
fn unmasked_labels_do_not_matter() {
    let cfg = config(8);
    let s = store(&cfg, 7);
    let (out, labels, mask) = random_case(&cfg, 8);
    let base = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    let mut other = labels.clone();
    for (l, &m) in other.iter_mut().zip(&mask) {
        if !m {
            *l = (*l + 3) % cfg.classes;
        }
    }
    assert_eq!(base.to_bits(), loss_on(&cfg, &s, &out, &other, &mask).unwrap().to_bits());
}

#[test]
fn rescaling_a_class_embedding_is_invisible() {
    let cfg = config(8);
    let mut s = store(&cfg, 9);
    let (out, labels, mask) = random_case(&cfg, 10);
    let base = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    let e = cfg.proj_dim;
    let classes = s.params.get_mut("head.classes").unwrap();
    classes.data[3 * e..4 * e].iter_mut().for_each(|v| *v *= 2.0);
    let scaled = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    assert!((base - scaled).abs() <= 1e-6);
}

#[test]
fn joint_permutation_of_tokens_and_labels_is_invisible() {
    let cfg = config(8);
    let s = store(&cfg, 11);
    let (out, labels, mask) = random_case(&cfg, 12);
    let base = loss_on(&cfg, &s, &out, &labels, &mask).unwrap();
    let n = cfg.n_tokens();
    let h = cfg.hidden;
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let mut pout = out.clone();
    for (dst, &src) in perm.iter().enumerate() {
        pout.data[dst * h..(dst + 1) * h].copy_from_slice(&out.data[src * h..(src + 1) * h]);
    }
    let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let pmask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
    let permuted = loss_on(&cfg, &s, &pout, &plabels, &pmask).unwrap();
    assert!((base - permuted).abs() <= 1e-12);
}

#[test]
fn full_mask_loss_ignores_the_spectrogram() {
    let cfg = config(8);
    let s = store(&cfg, 13);
    let n = cfg.n_tokens();
    let flags = vec![true; 2 * n];
    let labels: Vec<usize> = (0..2 * n).map(|i| i % cfg.classes).collect();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[2, cfg.channels, cfg.frames, cfg.freq_bins], 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = s.bind(&mut g);
        let mut net = Net::new(&mut g, &vars, &s, &cfg, true);
        let x = net.g.constant(x);
        let (tokens, _) = net.encode(x).unwrap();
        let out = net.bottleneck(tokens, Some(&flags)).unwrap();
        let logits = net.unit_logits(out.out).unwrap();
        let loss = net.unit_loss(logits, &labels, &flags).unwrap();
        g.value(loss).data[0]
    };
    assert_eq!(run(1).to_bits(), run(2).to_bits());
}

#[test]
fn error_paths() {
    let cfg = config(8);
    let s = store(&cfg, 14);
    let (out, mut labels, mask) = random_case(&cfg, 15);
    assert!(matches!(loss_on(&cfg, &s, &out, &labels, &vec![false; mask.len()]), Err(ModelError::EmptyMask)));
    labels[0] = 8;
    assert!(matches!(loss_on(&cfg, &s, &out, &labels, &mask), Err(ModelError::LabelRange { label: 8, classes: 8 })));
    assert!(matches!(loss_on(&cfg, &s, &out, &labels[1..], &mask), Err(ModelError::Shape(_))));
}
