//! Encoder, transformer bottleneck, masked-unit head and mask decoder.
//!
//! Parameter names are stable strings (`enc.3.conv1.w`, `tf.0.q.b`, ...);
//! they are the keys of the checkpoint table.

use pachubert_autodiff::graph::Result as GResult;
use pachubert_autodiff::{BatchStats, Binding, BnMode, Float, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::ModelError;

pub const BN_MOMENTUM: f64 = 0.1;

/// Parameter groups by name prefix.
pub const ENCODER: &str = "enc.";
pub const BOTTLENECK: &str = "tf.";
pub const HEAD: &str = "head.";
pub const DECODER: &str = "dec.";

/// He-uniform; for convs feeding batch norm and gelu.
fn conv_w(store: &mut ParamStore<f32>, name: &str, co: usize, ci: usize, k: (usize, usize), rng: &mut ChaCha8Rng) {
    let fan_in = (ci * k.0 * k.1) as f64;
    store.insert(name, Tensor::uniform(&[co, ci, k.0, k.1], (6.0 / fan_in).sqrt(), rng));
}

/// Variance-preserving uniform init scaled by `gain`; for the linear
/// projections on the residual and skip paths.
fn linear_conv_w(store: &mut ParamStore<f32>, name: &str, co: usize, ci: usize, k: (usize, usize), gain: f64, rng: &mut ChaCha8Rng) {
    let fan_in = (ci * k.0 * k.1) as f64;
    store.insert(name, Tensor::uniform(&[co, ci, k.0, k.1], gain * (3.0 / fan_in).sqrt(), rng));
}

fn linear(store: &mut ParamStore<f32>, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.w"), Tensor::uniform(&[out, inp], (6.0 / (inp + out) as f64).sqrt(), rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn norm(store: &mut ParamStore<f32>, name: &str, c: usize, running: bool) {
    store.insert(format!("{name}.g"), Tensor::full(&[c], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    if running {
        store.insert_buffer(format!("{name}.mean"), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{name}.var"), Tensor::full(&[c], 1.0));
    }
}

fn res_block_params(store: &mut ParamStore<f32>, p: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    conv_w(store, &format!("{p}.conv1.w"), cout, cin, (3, 3), rng);
    norm(store, &format!("{p}.bn1"), cout, true);
    conv_w(store, &format!("{p}.conv2.w"), cout, cout, (3, 3), rng);
    norm(store, &format!("{p}.bn2"), cout, true);
    if cin != cout {
        linear_conv_w(store, &format!("{p}.proj.w"), cout, cin, (1, 1), 1.0, rng);
    }
}

/// Fresh parameters for every group, seeded.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let w = &cfg.enc_widths;
    for i in 0..w.len() {
        let cin = if i == 0 { cfg.channels } else { w[i - 1] };
        res_block_params(&mut s, &format!("enc.{i}"), cin, w[i], &mut rng);
        if (cfg.strides_t[i], cfg.strides_f[i]) != (1, 1) {
            linear_conv_w(&mut s, &format!("enc.{i}.down.w"), w[i], w[i], (cfg.strides_t[i], cfg.strides_f[i]), 1.0, &mut rng);
            s.insert(format!("enc.{i}.down.b"), Tensor::zeros(&[w[i]]));
        }
    }
    let h = cfg.hidden;
    s.insert("tf.pos", Tensor::normal(&[cfg.n_tokens(), h], 0.02, &mut rng));
    s.insert("tf.mask_emb", Tensor::normal(&[h], 0.5, &mut rng));
    for l in 0..cfg.n_blocks {
        norm(&mut s, &format!("tf.{l}.ln1"), h, false);
        for m in ["q", "k", "v", "o"] {
            linear(&mut s, &format!("tf.{l}.{m}"), h, h, &mut rng);
        }
        norm(&mut s, &format!("tf.{l}.ln2"), h, false);
        linear(&mut s, &format!("tf.{l}.ff1"), cfg.ffn_mult * h, h, &mut rng);
        linear(&mut s, &format!("tf.{l}.ff2"), h, cfg.ffn_mult * h, &mut rng);
    }
    linear(&mut s, "head.proj", cfg.proj_dim, h, &mut rng);
    s.insert("head.classes", Tensor::normal(&[cfg.classes, cfg.proj_dim], 1.0, &mut rng));
    for i in (0..w.len()).rev() {
        let st = (cfg.strides_t[i], cfg.strides_f[i]);
        if st != (1, 1) {
            // transposed conv weights are [C_in, C_out, kh, kw]; with kernel
            // equal to stride each output sees one input pixel per channel
            s.insert(format!("dec.{i}.up.w"), Tensor::uniform(&[w[i], w[i], st.0, st.1], (3.0 / w[i] as f64).sqrt(), &mut rng));
            s.insert(format!("dec.{i}.up.b"), Tensor::zeros(&[w[i]]));
        }
        linear_conv_w(&mut s, &format!("dec.{i}.skip.w"), w[i], w[i], (1, 1), 1.0, &mut rng);
        let cout = if i > 0 { w[i - 1] } else { w[0] };
        res_block_params(&mut s, &format!("dec.{i}"), w[i], cout, &mut rng);
    }
    // small output weights keep the sigmoid near 0.5 at init
    linear_conv_w(&mut s, "dec.out.w", cfg.n_sources * cfg.channels, w[0], (1, 1), 0.1, &mut rng);
    s.insert("dec.out.b", Tensor::zeros(&[cfg.n_sources * cfg.channels]));
    s
}

/// Blends training-mode batch statistics into the running buffers.
pub fn update_running_stats<T: Float>(store: &mut ParamStore<T>, stats: &[(String, BatchStats)], momentum: f64) {
    for (name, st) in stats {
        for (suffix, batch) in [("mean", &st.mean), ("var", &st.var)] {
            if let Some(buf) = store.buffers.get_mut(&format!("{name}.{suffix}")) {
                for (r, &b) in buf.data.iter_mut().zip(batch) {
                    *r = T::of((1.0 - momentum) * r.as_f64() + momentum * b);
                }
            }
        }
    }
}

/// Bottleneck outputs.
#[derive(Debug, Clone)]
pub struct BottleneckOut {
    /// `[N, n_tokens, h]`.
    pub out: Var,
    /// Output of each transformer block, same shape.
    pub layers: Vec<Var>,
    /// Attention weights per block, `[N * heads, n, n]`.
    pub attention: Vec<Var>,
}

/// One forward pass over bound parameters.
pub struct Net<'a, T: Float> {
    pub g: &'a mut Graph<T>,
    pub vars: &'a Binding,
    pub store: &'a ParamStore<T>,
    pub cfg: &'a ModelConfig,
    /// Batch statistics in batch norm (training) or running statistics.
    pub train: bool,
    /// Batch statistics gathered in training mode, by layer name.
    pub stats: Vec<(String, BatchStats)>,
}

impl<'a, T: Float> Net<'a, T> {
    pub fn new(g: &'a mut Graph<T>, vars: &'a Binding, store: &'a ParamStore<T>, cfg: &'a ModelConfig, train: bool) -> Self {
        Self { g, vars, store, cfg, train, stats: Vec::new() }
    }

    fn p(&self, name: &str) -> Var {
        self.vars.var(name)
    }

    fn conv(&mut self, name: &str, x: Var, stride: (usize, usize), pad: (usize, usize)) -> GResult<Var> {
        let w = self.p(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = self.vars.contains(&bname).then(|| self.p(&bname));
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, name: &str, x: Var) -> GResult<Var> {
        let (gm, bt) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        if self.train {
            let (y, st) = self.g.batch_norm(x, gm, bt, BnMode::Train)?;
            self.stats.push((name.to_string(), st.expect("training mode returns statistics")));
            Ok(y)
        } else {
            let mean = &self.store.buffers[&format!("{name}.mean")].data;
            let var = &self.store.buffers[&format!("{name}.var")].data;
            Ok(self.g.batch_norm(x, gm, bt, BnMode::Eval { mean, var })?.0)
        }
    }

    fn res_block(&mut self, p: &str, x: Var) -> GResult<Var> {
        let h = self.conv(&format!("{p}.conv1"), x, (1, 1), (1, 1))?;
        let h = self.bn(&format!("{p}.bn1"), h)?;
        let h = self.g.gelu(h)?;
        let h = self.conv(&format!("{p}.conv2"), h, (1, 1), (1, 1))?;
        let h = self.bn(&format!("{p}.bn2"), h)?;
        let proj = format!("{p}.proj");
        let skip = if self.vars.contains(&format!("{proj}.w")) { self.conv(&proj, x, (1, 1), (0, 0))? } else { x };
        let y = self.g.add(h, skip)?;
        self.g.gelu(y)
    }

    /// `[N, C, T, F]` input features to `[N, n_tokens, C_b]` tokens (time
    /// major) plus each block's pre-downsampling activation.
    pub fn encode(&mut self, x: Var) -> GResult<(Var, Vec<Var>)> {
        let cfg = self.cfg;
        let mut skips = Vec::with_capacity(cfg.enc_widths.len());
        let mut h = x;
        for i in 0..cfg.enc_widths.len() {
            h = self.res_block(&format!("enc.{i}"), h)?;
            skips.push(h);
            let st = (cfg.strides_t[i], cfg.strides_f[i]);
            if st != (1, 1) {
                h = self.conv(&format!("enc.{i}.down"), h, st, (0, 0))?;
            }
        }
        let s = self.g.shape(h).to_vec();
        let t = self.g.permute(h, &[0, 2, 3, 1])?;
        let tokens = self.g.reshape(t, &[s[0], s[2] * s[3], s[1]])?;
        Ok((tokens, skips))
    }

    /// Mask-embedding substitution, positional embeddings and the pre-norm
    /// transformer stack. `mask` flags tokens over the flattened batch.
    pub fn bottleneck(&mut self, tokens: Var, mask: Option<&[bool]>) -> GResult<BottleneckOut> {
        let mut x = tokens;
        if let Some(m) = mask {
            let emb = self.p("tf.mask_emb");
            x = self.g.replace_rows(x, emb, m)?;
        }
        let pos = self.p("tf.pos");
        x = self.g.add_bcast(x, pos)?;
        let mut layers = Vec::new();
        let mut attention = Vec::new();
        for l in 0..self.cfg.n_blocks {
            let lin = |net: &mut Self, name: &str, v: Var| -> GResult<Var> {
                let (w, b) = (net.p(&format!("tf.{l}.{name}.w")), net.p(&format!("tf.{l}.{name}.b")));
                net.g.linear(v, w, Some(b))
            };
            let (g1, b1) = (self.p(&format!("tf.{l}.ln1.g")), self.p(&format!("tf.{l}.ln1.b")));
            let a = self.g.layer_norm(x, g1, b1)?;
            let (q, k, v) = (lin(self, "q", a)?, lin(self, "k", a)?, lin(self, "v", a)?);
            let (o, att) = self.g.attention(q, k, v, self.cfg.heads)?;
            let o = lin(self, "o", o)?;
            x = self.g.add(x, o)?;
            let (g2, b2) = (self.p(&format!("tf.{l}.ln2.g")), self.p(&format!("tf.{l}.ln2.b")));
            let f = self.g.layer_norm(x, g2, b2)?;
            let f = lin(self, "ff1", f)?;
            let f = self.g.gelu(f)?;
            let f = lin(self, "ff2", f)?;
            x = self.g.add(x, f)?;
            layers.push(x);
            attention.push(att);
        }
        Ok(BottleneckOut { out: x, layers, attention })
    }

    /// Cosine logits `tau * cos(proj(o_t), e_c)`, `[N * n_tokens, K]`.
    pub fn unit_logits(&mut self, out: Var) -> GResult<Var> {
        let (w, b) = (self.p("head.proj.w"), self.p("head.proj.b"));
        let z = self.g.linear(out, w, Some(b))?;
        let s = self.g.shape(z).to_vec();
        let z = self.g.reshape(z, &[s[0] * s[1], s[2]])?;
        let z = self.g.l2_normalize(z)?;
        let e = self.p("head.classes");
        let e = self.g.l2_normalize(e)?;
        let cos = self.g.linear(z, e, None)?;
        self.g.scale(cos, T::of(self.cfg.tau))
    }

    /// Mean `-log softmax` of the label over masked tokens only.
    pub fn unit_loss(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var, ModelError> {
        let rows = self.g.shape(logits)[0];
        if labels.len() != rows || mask.len() != rows {
            return Err(ModelError::Shape(format!("{} labels / {} mask flags for {rows} tokens", labels.len(), mask.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.cfg.classes) {
            return Err(ModelError::LabelRange { label: bad, classes: self.cfg.classes });
        }
        let targets: Vec<(usize, usize)> = mask.iter().zip(labels).enumerate().filter(|(_, (&m, _))| m).map(|(i, (_, &l))| (i, l)).collect();
        if targets.is_empty() {
            return Err(ModelError::EmptyMask);
        }
        Ok(self.g.cross_entropy(logits, &targets)?)
    }

    /// Tokens `[N, n_tokens, C_b]` and encoder skips to sigmoid masks
    /// `[N, S, C, T, F]`.
    pub fn decode(&mut self, tokens: Var, skips: &[Var]) -> GResult<Var> {
        let cfg = self.cfg;
        let n = self.g.shape(tokens)[0];
        let (gt, gf) = cfg.grid();
        let x = self.g.reshape(tokens, &[n, gt, gf, cfg.c_b])?;
        let mut h = self.g.permute(x, &[0, 3, 1, 2])?;
        for i in (0..cfg.enc_widths.len()).rev() {
            let st = (cfg.strides_t[i], cfg.strides_f[i]);
            if st != (1, 1) {
                let (w, b) = (self.p(&format!("dec.{i}.up.w")), self.p(&format!("dec.{i}.up.b")));
                h = self.g.conv_transpose2d(h, w, Some(b), st, (0, 0))?;
            }
            let s = self.conv(&format!("dec.{i}.skip"), skips[i], (1, 1), (0, 0))?;
            h = self.g.add(h, s)?;
            h = self.res_block(&format!("dec.{i}"), h)?;
        }
        let y = self.conv("dec.out", h, (1, 1), (0, 0))?;
        let y = self.g.sigmoid(y)?;
        self.g.reshape(y, &[n, cfg.n_sources, cfg.channels, cfg.frames, cfg.freq_bins])
    }
}

/// Input features: `log(1 + |X|)`, `[C, T, F]`.
pub fn input_features<T: Float>(spec: &pachubert_core::dsp::Spectrogram) -> Tensor<T> {
    let (c, t, f) = spec.bins.dim();
    Tensor::new(vec![c, t, f], spec.bins.iter().map(|z| T::of((z.norm() as f64).ln_1p())).collect())
}

/// Stacks `[C, T, F]` feature tensors into `[N, C, T, F]`.
pub fn stack<T: Float>(items: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&items[0].shape);
    Tensor::new(shape, items.iter().flat_map(|t| t.data.iter().copied()).collect())
}
