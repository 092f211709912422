use pachubert_autodiff::{Graph, ParamStore, Tensor};
use pachubert_model::network::{init_params, BN_MOMENTUM};
use pachubert_model::{update_running_stats, ModelConfig, Net};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A wide grid with small widths so interior positions are far from the
/// zero-padding boundary.
fn wide_config() -> ModelConfig {
    ModelConfig {
        window: 256,
        hop: 32,
        clip_len: 4096,
        frames: 128,
        freq_bins: 128,
        c_b: 8,
        hidden: 8,
        patch_t: 4,
        patch_f: 4,
        enc_widths: vec![4, 4, 8, 8, 8, 8],
        strides_t: vec![2, 2, 1, 1, 1, 1],
        strides_f: vec![2, 2, 1, 1, 1, 1],
        ..ModelConfig::toy()
    }
}

fn random_input(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, cfg.channels, cfg.frames, cfg.freq_bins], 1.0, &mut rng).map(|v: f32| v.abs())
}

/// Shifts running statistics away from (0, 1) so eval-mode batch norm is
/// not the identity.
fn perturb_buffers(store: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, buf) in store.buffers.iter_mut() {
        let noise = Tensor::<f32>::uniform(&buf.shape, 0.3, &mut rng);
        let off = if name.ends_with(".var") { 1.0 } else { 0.0 };
        for (b, n) in buf.data.iter_mut().zip(&noise.data) {
            *b = off + n;
        }
    }
}

#[test]
fn full_geometry_round_trips_through_the_network() {
    let cfg = ModelConfig::full();
    cfg.validate().unwrap();
    assert_eq!(cfg.n_tokens(), 160);
    let store = init_params(&cfg, 0);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut net = Net::new(&mut g, &vars, &store, &cfg, false);
    let x = net.g.constant(random_input(&cfg, 1, 1));
    let (tokens, skips) = net.encode(x).unwrap();
    assert_eq!(net.g.shape(tokens), &[1, 160, 384]);
    let out = net.bottleneck(tokens, None).unwrap();
    assert_eq!(net.g.shape(out.out), &[1, 160, 384]);
    assert_eq!(out.layers.len(), 12);
    let masks = net.decode(out.out, &skips).unwrap();
    assert_eq!(net.g.shape(masks), &[1, 4, 2, 320, 1024]);
    let m = &net.g.value(masks).data;
    let (lo, hi) = m.iter().fold((1.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo > 0.0 && hi < 1.0, "mask range [{lo}, {hi}]");
}

#[test]
fn zero_input_gives_constant_interior_tokens() {
    let cfg = wide_config();
    cfg.validate().unwrap();
    let mut store = init_params(&cfg, 3);
    perturb_buffers(&mut store, 4);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut net = Net::new(&mut g, &vars, &store, &cfg, false);
    let x = net.g.constant(Tensor::zeros(&[1, cfg.channels, cfg.frames, cfg.freq_bins]));
    let (tokens, _) = net.encode(x).unwrap();
    let t = net.g.value(tokens);
    let (gt, gf) = cfg.grid();
    let c = cfg.c_b;
    assert!(t.all_finite());
    // boundary influence: 2 px at full and half resolution, then 2 tokens per block
    let margin = 10;
    let at = |i: usize, j: usize| &t.data[(i * gf + j) * c..(i * gf + j + 1) * c];
    let reference = at(gt / 2, gf / 2).to_vec();
    assert!(reference.iter().any(|&v| v.abs() > 1e-3), "constant should carry the biases");
    for i in margin..gt - margin {
        for j in margin..gf - margin {
            for (a, b) in at(i, j).iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-6, "token ({i}, {j}) differs: {a} vs {b}");
            }
        }
    }
}

#[test]
fn eval_mode_batch_duplication_is_exact() {
    let cfg = ModelConfig::toy();
    let mut store = init_params(&cfg, 5);
    perturb_buffers(&mut store, 6);
    let run = |x: Tensor<f32>| {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let mut net = Net::new(&mut g, &vars, &store, &cfg, false);
        let x = net.g.constant(x);
        let (tokens, skips) = net.encode(x).unwrap();
        let out = net.bottleneck(tokens, None).unwrap();
        let m = net.decode(out.out, &skips).unwrap();
        g.value(m).clone()
    };
    let one = random_input(&cfg, 1, 7);
    let mut two = one.clone();
    two.shape[0] = 2;
    two.data.extend_from_slice(&one.data);
    let a = run(one);
    let b = run(two);
    let half = a.data.len();
    assert_eq!(&b.data[..half], &a.data[..]);
    assert_eq!(&b.data[half..], &a.data[..]);
}

#[test]
fn empty_stack_adds_positional_embeddings_only() {
    let cfg = ModelConfig { n_blocks: 0, ..ModelConfig::toy() };
    cfg.validate().unwrap();
    let store = init_params(&cfg, 8);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut net = Net::new(&mut g, &vars, &store, &cfg, true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = Tensor::<f32>::uniform(&[2, cfg.n_tokens(), cfg.hidden], 1.0, &mut rng);
    let x = net.g.constant(input.clone());
    let out = net.bottleneck(x, None).unwrap();
    let pos = store.get("tf.pos").unwrap();
    let y = g.value(out.out);
    for (k, (&v, &i)) in y.data.iter().zip(&input.data).enumerate() {
        assert_eq!(v, i + pos.data[k % pos.len()]);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::toy();
    let store = init_params(&cfg, 10);
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut net = Net::new(&mut g, &vars, &store, &cfg, true);
    let x = net.g.constant(random_input(&cfg, 2, 11));
    let (tokens, _) = net.encode(x).unwrap();
    let out = net.bottleneck(tokens, None).unwrap();
    let n = cfg.n_tokens();
    for &a in &out.attention {
        let att = g.value(a);
        assert_eq!(att.shape, vec![2 * cfg.heads, n, n]);
        for row in att.data.chunks(n) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        }
    }
}

#[test]
fn full_mask_hides_the_input() {
    let cfg = ModelConfig::toy();
    let store = init_params(&cfg, 12);
    let flags = vec![true; 2 * cfg.n_tokens()];
    let run = |seed| {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let mut net = Net::new(&mut g, &vars, &store, &cfg, true);
        let x = net.g.constant(random_input(&cfg, 2, seed));
        let (tokens, _) = net.encode(x).unwrap();
        let out = net.bottleneck(tokens, Some(&flags)).unwrap();
        g.value(out.out).clone()
    };
    assert_eq!(run(13).data, run(14).data);
}

#[test]
fn running_statistics_follow_momentum() {
    let cfg = ModelConfig::toy();
    let mut store = init_params(&cfg, 15);
    let stats = {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let mut net = Net::new(&mut g, &vars, &store, &cfg, true);
        let x = net.g.constant(random_input(&cfg, 2, 16));
        net.encode(x).unwrap();
        net.stats
    };
    assert!(!stats.is_empty());
    let (name, st) = &stats[0];
    let before_mean = store.buffer(&format!("{name}.mean")).unwrap().data.clone();
    let before_var = store.buffer(&format!("{name}.var")).unwrap().data.clone();
    update_running_stats(&mut store, &stats, BN_MOMENTUM);
    let after_mean = &store.buffer(&format!("{name}.mean")).unwrap().data;
    let after_var = &store.buffer(&format!("{name}.var")).unwrap().data;
    for c in 0..st.mean.len() {
        let want_m = 0.9 * before_mean[c] as f64 + 0.1 * st.mean[c];
        let want_v = 0.9 * before_var[c] as f64 + 0.1 * st.var[c];
        assert!((after_mean[c] as f64 - want_m).abs() < 1e-6);
        assert!((after_var[c] as f64 - want_v).abs() < 1e-6);
    }
}

#[test]
fn parameter_groups_partition_the_store() {
    let cfg = ModelConfig::toy();
    let store = init_params(&cfg, 0);
    for name in store.params.keys() {
        let groups = ["enc.", "tf.", "head.", "dec."].iter().filter(|p| name.starts_with(*p)).count();
        assert_eq!(groups, 1, "{name}");
    }
    assert_eq!(init_params(&cfg, 0).params, store.params);
}

