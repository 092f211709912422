//! Operator forward passes and their adjoints.

use crate::graph::{mismatch, Graph, GraphError, Op, Result, Var};
use crate::kernels::{self, ConvGeom};
use crate::par;
use crate::tensor::{invert_perm, numel, Float, Tensor};

pub const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Batch-norm statistics mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalise with the batch's own statistics.
    Train,
    /// Frozen running statistics: a pure per-channel affine map.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running-statistic updates.
    pub var: Vec<f64>,
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let d = shape.last().copied().unwrap_or(1);
    (numel(shape) / d.max(1), d)
}

fn gelu<T: Float>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    T::of(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<T: Float>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

fn sigmoid<T: Float>(x: T) -> T {
    let x = x.as_f64();
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    T::of(s)
}

fn softmax_rows<T: Float>(x: &[T], d: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, d, |r, o| {
        let row = &x[r * d..(r + 1) * d];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).as_f64().exp()).sum();
        let lz = z.ln();
        for (o, &v) in o.iter_mut().zip(row) {
            let s = (v - m).as_f64();
            *o = T::of(if log { s - lz } else { (s - lz).exp() });
        }
    });
    out
}

/// Sum of `data` viewed as `[reps, inner]` over the leading axis.
fn reduce_leading<T: Float>(data: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for chunk in data.chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn conv_geom(x: &[usize], kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> ConvGeom {
    ConvGeom { channels: x[1], height: x[2], width: x[3], kernel, stride, pad }
}

impl<T: Float> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(usize, usize) -> Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let v = self.value(a).zip(self.value(b), f);
        Ok(self.push_op(v, mk(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn bcast(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(mismatch(op, format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let bv = &self.value(b).data;
        let inner = bv.len().max(1);
        let av = self.value(a);
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * bv[i % inner] } else { x + bv[i % inner] })
            .collect();
        let v = Tensor::new(av.shape.clone(), data);
        Ok(self.push_op(v, if mul { Op::MulBcast(a.0, b.0) } else { Op::AddBcast(a.0, b.0) }))
    }

    /// `a + b` with `b` tiled over leading axes (`b`'s shape is a suffix of `a`'s).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast("add_bcast", a, b, false)
    }

    /// `a ⊙ b` with `b` tiled over leading axes.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast("mul_bcast", a, b, true)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * s);
        Ok(self.push_op(v, Op::Scale(a.0, s)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.abs());
        Ok(self.push_op(v, Op::Abs(a.0)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(gelu);
        Ok(self.push_op(v, Op::Gelu(a.0)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(sigmoid);
        Ok(self.push_op(v, Op::Sigmoid(a.0)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (_, d) = last_dim(self.shape(a));
        let v = Tensor::new(self.shape(a).to_vec(), softmax_rows(&self.value(a).data, d, false));
        Ok(self.push_op(v, Op::Softmax(a.0)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (_, d) = last_dim(self.shape(a));
        let v = Tensor::new(self.shape(a).to_vec(), softmax_rows(&self.value(a).data, d, true));
        Ok(self.push_op(v, Op::LogSoftmax(a.0)))
    }

    /// `y = x Wᵀ + b` over the last axis; `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (rows, din) = last_dim(&xs);
        if ws.len() != 2 || ws[1] != din || xs.is_empty() {
            return Err(mismatch("linear", format!("x {xs:?} w {ws:?}")));
        }
        let dout = ws[0];
        let mut y = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [dout] {
                return Err(mismatch("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
            let bv = &self.value(b).data;
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm_nt(&self.value(x).data, &self.value(w).data, &mut y, rows, din, dout, true);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push_op(Tensor::new(shape, y), Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0) }))
    }

    /// Batched matrix product `[B, m, k] · [B, k, n]`, or `· [B, n, k]ᵀ`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(mismatch("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![T::zero(); bn * m * n];
        par::for_each_chunk_mut(&mut out, m * n, |i, c| {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            if trans_b {
                kernels::gemm_nt(ai, bi, c, m, k, n, false);
            } else {
                kernels::gemm(ai, bi, c, m, k, n, false);
            }
        });
        Ok(self.push_op(Tensor::new(vec![bn, m, n], out), Op::Bmm { a: a.0, b: b.0, trans_b }))
    }

    /// 2-D convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, kh, kw]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(mismatch("conv2d", format!("x {xs:?} w {ws:?}")));
        }
        if xs[2] + 2 * pad.0 < ws[2] || xs[3] + 2 * pad.1 < ws[3] {
            return Err(mismatch("conv2d", format!("kernel {:?} larger than padded input {:?}", &ws[2..], &xs[2..])));
        }
        let g = conv_geom(&xs, (ws[2], ws[3]), stride, pad);
        let (ho, wo) = g.out_hw();
        let (n, co, ck, p) = (xs[0], ws[0], g.col_rows(), ho * wo);
        let bias = self.bias(b, co, "conv2d")?;
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let plane = xs[1] * xs[2] * xs[3];
        let mut out = vec![T::zero(); n * co * p];
        for (i, o) in out.chunks_mut(co * p).enumerate() {
            let cols = kernels::im2col(&xv[i * plane..(i + 1) * plane], &g);
            if let Some(bv) = &bias {
                for (c, row) in o.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[c]);
                }
            }
            kernels::gemm(wv, &cols, o, co, ck, p, true);
        }
        let v = Tensor::new(vec![n, co, ho, wo], out);
        Ok(self.push_op(v, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad }))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] in `x`.
    /// `x: [N, Ci, H, W]`, `w: [Ci, Co, kh, kw]`; output size
    /// `(H - 1)·s - 2p + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || stride.0 == 0 || stride.1 == 0 || xs[2] == 0 || xs[3] == 0 {
            return Err(mismatch("conv_transpose2d", format!("x {xs:?} w {ws:?}")));
        }
        let full = ((xs[2] - 1) * stride.0 + ws[2], (xs[3] - 1) * stride.1 + ws[3]);
        if full.0 < 2 * pad.0 + 1 || full.1 < 2 * pad.1 + 1 {
            return Err(mismatch("conv_transpose2d", "padding removes the whole output"));
        }
        let (ho, wo) = (full.0 - 2 * pad.0, full.1 - 2 * pad.1);
        let (n, ci, co) = (xs[0], xs[1], ws[1]);
        let g = ConvGeom { channels: co, height: ho, width: wo, kernel: (ws[2], ws[3]), stride, pad };
        let (p, ck) = (xs[2] * xs[3], g.col_rows());
        let bias = self.bias(b, co, "conv_transpose2d")?;
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let mut out = vec![T::zero(); n * co * ho * wo];
        for (i, o) in out.chunks_mut(co * ho * wo).enumerate() {
            let mut cols = vec![T::zero(); ck * p];
            kernels::gemm_tn(wv, &xv[i * ci * p..(i + 1) * ci * p], &mut cols, ck, ci, p, false);
            kernels::col2im(&cols, &g, o);
            if let Some(bv) = &bias {
                for (c, row) in o.chunks_mut(ho * wo).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let v = Tensor::new(vec![n, co, ho, wo], out);
        Ok(self.push_op(v, Op::ConvT2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad }))
    }

    fn bias(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<Option<Vec<T>>> {
        let Some(b) = b else { return Ok(None) };
        self.check(b)?;
        if self.shape(b) != [channels] {
            return Err(mismatch(op, format!("bias {:?} for {channels} channels", self.shape(b))));
        }
        Ok(Some(self.value(b).data.clone()))
    }

    /// Per-channel batch norm over `[N, C, H, W]` (any rank ≥ 2, channel
    /// axis 1). Training mode also returns the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<(Var, Option<BatchStats>)> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(mismatch("batch_norm", format!("input {xs:?} has no channel axis")));
        }
        let c = xs[1];
        for v in [gamma, beta] {
            self.check(v)?;
            if self.shape(v) != [c] {
                return Err(mismatch("batch_norm", format!("affine {:?} for {c} channels", self.shape(v))));
            }
        }
        let (n, inner) = (xs[0], numel(&xs[2..]));
        let count = n * inner;
        if count == 0 {
            return Err(GraphError::Empty("batch_norm"));
        }
        let xv = &self.value(x).data;
        let at = |b: usize, ch: usize| &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = (0..n).flat_map(|b| at(b, ch)).map(|v| v.as_f64()).sum();
                    let m = s / count as f64;
                    let ss: f64 = (0..n).flat_map(|b| at(b, ch)).map(|v| (v.as_f64() - m).powi(2)).sum();
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var.iter().map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v }).collect();
                (mean.clone(), var, Some(BatchStats { mean, var: unbiased }))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", "running statistics length"));
                }
                (mean.iter().map(|v| v.as_f64()).collect(), var.iter().map(|v| v.as_f64()).collect(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + NORM_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for (idx, ((xh, yo), &xi)) in xhat.iter_mut().zip(y.iter_mut()).zip(xv).enumerate() {
            let ch = (idx / inner) % c;
            *xh = (xi - mean_t[ch]) * inv_std[ch];
            *yo = gv[ch] * *xh + bv[ch];
        }
        let train = matches!(mode, BnMode::Train);
        let v = self.push_op(Tensor::new(xs, y), Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train });
        Ok((v, stats))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` of that size.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        let (rows, d) = last_dim(&xs);
        for v in [gamma, beta] {
            self.check(v)?;
            if self.shape(v) != [d] || xs.is_empty() {
                return Err(mismatch("layer_norm", format!("affine {:?} for last axis {d}", self.shape(v))));
            }
        }
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = T::of(is);
            for j in 0..d {
                let h = T::of((row[j].as_f64() - m) * is);
                xhat[r * d + j] = h;
                y[r * d + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.push_op(Tensor::new(xs, y), Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if numel(shape) != self.value(a).len() {
            return Err(mismatch("reshape", format!("{:?} to {shape:?}", self.shape(a))));
        }
        let v = self.value(a).clone().reshaped(shape);
        Ok(self.push_op(v, Op::Reshape(a.0)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", format!("{perm:?} for rank {nd}")));
        }
        let v = self.value(a).permuted(perm);
        Ok(self.push_op(v, Op::Permute(a.0, perm.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.value(a).data.iter().map(|v| v.as_f64()).sum();
        Ok(self.push_op(Tensor::scalar(T::of(s)), Op::SumAll(a.0)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(GraphError::Empty("mean_all"));
        }
        let s: f64 = self.value(a).data.iter().map(|v| v.as_f64()).sum();
        Ok(self.push_op(Tensor::scalar(T::of(s / n as f64)), Op::MeanAll(a.0)))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean_all(d)
    }

    /// Rows of `table: [R, D]` selected by `idx`, giving `[idx.len(), D]`.
    /// Serves as the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.check(table)?;
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || idx.iter().any(|&i| i >= ts[0]) {
            return Err(mismatch("gather_rows", format!("table {ts:?}, max index {:?}", idx.iter().max())));
        }
        let d = ts[1];
        let tv = &self.value(table).data;
        let data = idx.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let v = Tensor::new(vec![idx.len(), d], data);
        Ok(self.push_op(v, Op::GatherRows { table: table.0, idx: idx.to_vec() }))
    }

    /// Rows of `x` (last axis = `D`) flagged in `mask` are replaced by
    /// `emb: [D]`.
    pub fn replace_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        self.check(x)?;
        self.check(emb)?;
        let xs = self.shape(x).to_vec();
        let (rows, d) = last_dim(&xs);
        if self.shape(emb) != [d] || mask.len() != rows {
            return Err(mismatch("replace_rows", format!("x {xs:?}, emb {:?}, mask {}", self.shape(emb), mask.len())));
        }
        let ev = self.value(emb).data.clone();
        let mut data = self.value(x).data.clone();
        for (row, &m) in data.chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(&ev);
            }
        }
        Ok(self.push_op(Tensor::new(xs, data), Op::ReplaceRows { x: x.0, emb: emb.0, mask: mask.to_vec() }))
    }

    /// Rows scaled to unit L2 norm over the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (_, d) = last_dim(self.shape(a));
        let mut v = self.value(a).clone();
        for row in v.data.chunks_mut(d) {
            let n = (row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() + L2_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = T::of(x.as_f64() / n));
        }
        Ok(self.push_op(v, Op::L2Normalize(a.0)))
    }

    /// Mean negative log-likelihood of `(row, class)` targets under a
    /// softmax over the last axis of `logits: [R, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        self.check(logits)?;
        let ls = self.shape(logits).to_vec();
        if targets.is_empty() {
            return Err(GraphError::Empty("cross_entropy"));
        }
        if ls.len() != 2 || targets.iter().any(|&(r, k)| r >= ls[0] || k >= ls[1]) {
            return Err(mismatch("cross_entropy", format!("logits {ls:?}")));
        }
        let k = ls[1];
        let lv = &self.value(logits).data;
        let mut total = 0.0;
        for &(r, c) in targets {
            let ls = softmax_rows(&lv[r * k..(r + 1) * k], k, true);
            total -= ls[c].as_f64();
        }
        let v = Tensor::scalar(T::of(total / targets.len() as f64));
        Ok(self.push_op(v, Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() }))
    }

    /// Multi-head scaled dot-product attention on `[B, n, h]` inputs.
    /// Returns the output `[B, n, h]` and the attention weights
    /// `[B·heads, n, n]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(mismatch("attention", format!("{s:?} with {heads} heads")));
        }
        let (b, n, h) = (s[0], s[1], s[2]);
        let hd = h / heads;
        let split = |g: &mut Self, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, n, heads, hd])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * heads, n, hd])
        };
        let (qh, kh, vh) = (split(self, q)?, split(self, k)?, split(self, v)?);
        let scores = self.bmm(qh, kh, true)?;
        let scores = self.scale(scores, T::of(1.0 / (hd as f64).sqrt()))?;
        let att = self.softmax(scores)?;
        let o = self.bmm(att, vh, false)?;
        let o = self.reshape(o, &[b, heads, n, hd])?;
        let o = self.permute(o, &[0, 2, 1, 3])?;
        let o = self.reshape(o, &[b, n, h])?;
        Ok((o, att))
    }
}

/// Gradient contributions of node `i` to its inputs.
pub(crate) fn backward_op<T: Float>(g: &Graph<T>, i: usize, dy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |j: usize| &g.nodes[j].value;
    let wants = |j: usize| g.nodes[j].requires_grad;
    let y = &g.nodes[i].value;
    let like = |j: usize, data: Vec<T>| Tensor::new(val(j).shape.clone(), data);
    let mut out = Vec::new();
    match &g.nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((*a, dy.clone()));
            out.push((*b, dy.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, dy.clone()));
            out.push((*b, dy.map(|v| -v)));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                out.push((*a, dy.zip(val(*b), |d, y| d * y)));
            }
            if wants(*b) {
                out.push((*b, dy.zip(val(*a), |d, x| d * x)));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if wants(*a) {
                out.push((*a, dy.zip(bv, |d, q| d / q)));
            }
            if wants(*b) {
                let data = dy.data.iter().zip(&val(*a).data).zip(&bv.data).map(|((&d, &x), &q)| -d * x / (q * q)).collect();
                out.push((*b, like(*b, data)));
            }
        }
        Op::AddBcast(a, b) => {
            out.push((*a, dy.clone()));
            if wants(*b) {
                let inner = val(*b).len().max(1);
                out.push((*b, like(*b, reduce_leading(&dy.data, inner))));
            }
        }
        Op::MulBcast(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let inner = bv.len().max(1);
            if wants(*a) {
                let data = dy.data.iter().enumerate().map(|(k, &d)| d * bv.data[k % inner]).collect();
                out.push((*a, like(*a, data)));
            }
            if wants(*b) {
                let prod: Vec<T> = dy.data.iter().zip(&av.data).map(|(&d, &x)| d * x).collect();
                out.push((*b, like(*b, reduce_leading(&prod, inner))));
            }
        }
        Op::Scale(a, s) => out.push((*a, dy.map(|d| d * *s))),
        Op::Abs(a) => {
            let data = dy.data.iter().zip(&val(*a).data).map(|(&d, &x)| if x > T::zero() { d } else if x < T::zero() { -d } else { T::zero() }).collect();
            out.push((*a, like(*a, data)));
        }
        Op::Gelu(a) => out.push((*a, dy.zip(val(*a), |d, x| d * gelu_grad(x)))),
        Op::Sigmoid(a) => out.push((*a, dy.zip(y, |d, s| d * s * (T::one() - s)))),
        Op::Softmax(a) => {
            let (_, d) = last_dim(&y.shape);
            let mut dx = vec![T::zero(); y.len()];
            for ((o, yr), gr) in dx.chunks_mut(d).zip(y.data.chunks(d)).zip(dy.data.chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            out.push((*a, like(*a, dx)));
        }
        Op::LogSoftmax(a) => {
            let (_, d) = last_dim(&y.shape);
            let mut dx = vec![T::zero(); y.len()];
            for ((o, yr), gr) in dx.chunks_mut(d).zip(y.data.chunks(d)).zip(dy.data.chunks(d)) {
                let s: T = gr.iter().copied().sum();
                for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * s;
                }
            }
            out.push((*a, like(*a, dx)));
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, din) = last_dim(&xv.shape);
            let dout = wv.shape[0];
            if wants(*x) {
                let mut dx = vec![T::zero(); rows * din];
                kernels::gemm(&dy.data, &wv.data, &mut dx, rows, dout, din, false);
                out.push((*x, like(*x, dx)));
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); dout * din];
                kernels::gemm_tn(&dy.data, &xv.data, &mut dw, dout, rows, din, false);
                out.push((*w, like(*w, dw)));
            }
            if let Some(b) = b {
                if wants(*b) {
                    out.push((*b, like(*b, reduce_leading(&dy.data, dout))));
                }
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bn, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
            let n = y.shape[2];
            if wants(*a) {
                let mut da = vec![T::zero(); bn * m * k];
                par::for_each_chunk_mut(&mut da, m * k, |j, c| {
                    let gj = &dy.data[j * m * n..(j + 1) * m * n];
                    let bj = &bv.data[j * k * n..(j + 1) * k * n];
                    if *trans_b {
                        kernels::gemm(gj, bj, c, m, n, k, false);
                    } else {
                        kernels::gemm_nt(gj, bj, c, m, n, k, false);
                    }
                });
                out.push((*a, like(*a, da)));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); bn * k * n];
                par::for_each_chunk_mut(&mut db, k * n, |j, c| {
                    let gj = &dy.data[j * m * n..(j + 1) * m * n];
                    let aj = &av.data[j * m * k..(j + 1) * m * k];
                    if *trans_b {
                        kernels::gemm_tn(gj, aj, c, n, m, k, false);
                    } else {
                        kernels::gemm_tn(aj, gj, c, k, m, n, false);
                    }
                });
                out.push((*b, like(*b, db)));
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let ws = &wv.shape;
            let geom = conv_geom(&xv.shape, (ws[2], ws[3]), *stride, *pad);
            let (n, co, ck) = (xv.shape[0], ws[0], geom.col_rows());
            let p = y.shape[2] * y.shape[3];
            let plane = xv.shape[1] * xv.shape[2] * xv.shape[3];
            let mut dx = vec![T::zero(); if wants(*x) { xv.len() } else { 0 }];
            let mut dw = vec![T::zero(); if wants(*w) { wv.len() } else { 0 }];
            for s in 0..n {
                let gs = &dy.data[s * co * p..(s + 1) * co * p];
                if wants(*w) {
                    let cols = kernels::im2col(&xv.data[s * plane..(s + 1) * plane], &geom);
                    kernels::gemm_nt(gs, &cols, &mut dw, co, p, ck, true);
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); ck * p];
                    kernels::gemm_tn(&wv.data, gs, &mut dcols, ck, co, p, false);
                    kernels::col2im(&dcols, &geom, &mut dx[s * plane..(s + 1) * plane]);
                }
            }
            if wants(*x) {
                out.push((*x, like(*x, dx)));
            }
            if wants(*w) {
                out.push((*w, like(*w, dw)));
            }
            if let Some(b) = b {
                if wants(*b) {
                    out.push((*b, like(*b, channel_sums(&dy.data, n, co, p))));
                }
            }
        }
        Op::ConvT2d { x, w, b, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let ws = &wv.shape;
            let (n, ci, co) = (xv.shape[0], xv.shape[1], ws[1]);
            let (ho, wo) = (y.shape[2], y.shape[3]);
            let geom = ConvGeom { channels: co, height: ho, width: wo, kernel: (ws[2], ws[3]), stride: *stride, pad: *pad };
            let (p, ck) = (xv.shape[2] * xv.shape[3], geom.col_rows());
            let mut dx = vec![T::zero(); if wants(*x) { xv.len() } else { 0 }];
            let mut dw = vec![T::zero(); if wants(*w) { wv.len() } else { 0 }];
            for s in 0..n {
                let cols = kernels::im2col(&dy.data[s * co * ho * wo..(s + 1) * co * ho * wo], &geom);
                if wants(*x) {
                    kernels::gemm(&wv.data, &cols, &mut dx[s * ci * p..(s + 1) * ci * p], ci, ck, p, false);
                }
                if wants(*w) {
                    kernels::gemm_nt(&xv.data[s * ci * p..(s + 1) * ci * p], &cols, &mut dw, ci, p, ck, true);
                }
            }
            if wants(*x) {
                out.push((*x, like(*x, dx)));
            }
            if wants(*w) {
                out.push((*w, like(*w, dw)));
            }
            if let Some(b) = b {
                if wants(*b) {
                    out.push((*b, like(*b, channel_sums(&dy.data, n, co, ho * wo))));
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let xs = &val(*x).shape;
            let (n, c, inner) = (xs[0], xs[1], numel(&xs[2..]));
            let gv = &val(*gamma).data;
            let mut sum_dy = vec![0.0; c];
            let mut sum_dyx = vec![0.0; c];
            for (idx, (&d, &h)) in dy.data.iter().zip(xhat).enumerate() {
                let ch = (idx / inner) % c;
                sum_dy[ch] += d.as_f64();
                sum_dyx[ch] += (d * h).as_f64();
            }
            if wants(*x) {
                let m = (n * inner) as f64;
                let dx = dy
                    .data
                    .iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(idx, (&d, &h))| {
                        let ch = (idx / inner) % c;
                        let scale = (gv[ch] * inv_std[ch]).as_f64();
                        if *train {
                            T::of(scale * (d.as_f64() - sum_dy[ch] / m - h.as_f64() * sum_dyx[ch] / m))
                        } else {
                            T::of(scale * d.as_f64())
                        }
                    })
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            if wants(*gamma) {
                out.push((*gamma, like(*gamma, sum_dyx.iter().map(|&v| T::of(v)).collect())));
            }
            if wants(*beta) {
                out.push((*beta, like(*beta, sum_dy.iter().map(|&v| T::of(v)).collect())));
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (_, d) = last_dim(&y.shape);
            let gv = &val(*gamma).data;
            if wants(*x) {
                let mut dx = vec![T::zero(); y.len()];
                for (r, o) in dx.chunks_mut(d).enumerate() {
                    let gr = &dy.data[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<f64> = gr.iter().zip(gv).map(|(&a, &b)| (a * b).as_f64()).collect();
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, h)| a * h.as_f64()).sum();
                    let is = inv_std[r].as_f64();
                    for j in 0..d {
                        o[j] = T::of(is / d as f64 * (d as f64 * dh[j] - s1 - hr[j].as_f64() * s2));
                    }
                }
                out.push((*x, like(*x, dx)));
            }
            if wants(*gamma) {
                let prod: Vec<T> = dy.data.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                out.push((*gamma, like(*gamma, reduce_leading(&prod, d))));
            }
            if wants(*beta) {
                out.push((*beta, like(*beta, reduce_leading(&dy.data, d))));
            }
        }
        Op::Reshape(a) => out.push((*a, like(*a, dy.data.clone()))),
        Op::Permute(a, perm) => out.push((*a, dy.permuted(&invert_perm(perm)))),
        Op::SumAll(a) => out.push((*a, Tensor::full(&val(*a).shape, dy.data[0]))),
        Op::MeanAll(a) => {
            let n = T::of(val(*a).len() as f64);
            out.push((*a, Tensor::full(&val(*a).shape, dy.data[0] / n)));
        }
        Op::GatherRows { table, idx } => {
            let d = val(*table).shape[1];
            let mut dt = Tensor::zeros(&val(*table).shape);
            for (r, &t) in idx.iter().enumerate() {
                for j in 0..d {
                    dt.data[t * d + j] += dy.data[r * d + j];
                }
            }
            out.push((*table, dt));
        }
        Op::ReplaceRows { x, emb, mask } => {
            let d = val(*emb).len();
            let mut dx = dy.data.clone();
            let mut de = vec![T::zero(); d];
            for (row, &m) in dx.chunks_mut(d).zip(mask) {
                if m {
                    for (e, v) in de.iter_mut().zip(row.iter_mut()) {
                        *e += *v;
                        *v = T::zero();
                    }
                }
            }
            out.push((*x, like(*x, dx)));
            if wants(*emb) {
                out.push((*emb, like(*emb, de)));
            }
        }
        Op::L2Normalize(a) => {
            let (_, d) = last_dim(&y.shape);
            let xv = val(*a);
            let mut dx = vec![T::zero(); y.len()];
            for (r, o) in dx.chunks_mut(d).enumerate() {
                let xr = &xv.data[r * d..(r + 1) * d];
                let yr = &y.data[r * d..(r + 1) * d];
                let gr = &dy.data[r * d..(r + 1) * d];
                let n = (xr.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() + L2_EPS).sqrt();
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for j in 0..d {
                    o[j] = T::of((gr[j].as_f64() - yr[j].as_f64() * dot) / n);
                }
            }
            out.push((*a, like(*a, dx)));
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let k = lv.shape[1];
            let scale = dy.data[0].as_f64() / targets.len() as f64;
            let mut dl = vec![T::zero(); lv.len()];
            for &(r, c) in targets {
                let p = softmax_rows(&lv.data[r * k..(r + 1) * k], k, false);
                for j in 0..k {
                    let onehot = if j == c { 1.0 } else { 0.0 };
                    dl[r * k + j] += T::of(scale * (p[j].as_f64() - onehot));
                }
            }
            out.push((*logits, like(*logits, dl)));
        }
        Op::Custom { op, inputs } => {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|&j| val(j)).collect();
            for (j, gj) in inputs.iter().zip(op.backward(&refs, y, dy)) {
                if let Some(gj) = gj {
                    assert_eq!(gj.shape, val(*j).shape, "custom op {} returned a misshapen gradient", op.name());
                    out.push((*j, gj));
                }
            }
        }
    }
    out
}

fn channel_sums<T: Float>(dy: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += dy[(b * c + ch) * p..(b * c + ch + 1) * p].iter().copied().sum();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_matches_size_formula() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 32, 64]));
        let w = g.param(Tensor::zeros(&[5, 2, 3, 3]));
        let y = g.conv2d(x, w, None, (2, 2), (1, 1)).unwrap();
        assert_eq!(g.shape(y), [1, 5, 16, 32]);
        let wt = g.param(Tensor::zeros(&[5, 2, 4, 4]));
        let z = g.conv_transpose2d(y, wt, None, (2, 2), (1, 1)).unwrap();
        assert_eq!(g.shape(z), [1, 2, 32, 64]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 960], 3.25));
        let s = g.softmax(x).unwrap();
        assert!(g.value(s).data.iter().all(|&p| (p - 1.0 / 960.0).abs() < 1e-15));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(GraphError::ShapeMismatch { .. })));
        assert!(matches!(g.backward(a), Err(GraphError::NotScalar(_))));
        assert!(matches!(g.cross_entropy(a, &[]), Err(GraphError::Empty(_))));
    }

    #[test]
    fn eval_batch_norm_is_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let gamma = g.param(Tensor::new(vec![2], vec![2.0, 0.5]));
        let beta = g.param(Tensor::new(vec![2], vec![1.0, -1.0]));
        let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Eval { mean: &[1.0, 0.0], var: &[4.0, 1.0] }).unwrap();
        assert!(stats.is_none());
        let want = |v: f64, ch: usize| if ch == 0 { 2.0 * (v - 1.0) / (4.0 + NORM_EPS).sqrt() + 1.0 } else { 0.5 * v / (1.0 + NORM_EPS).sqrt() - 1.0 };
        let yv = &g.value(y).data;
        for (i, (&got, &v)) in yv.iter().zip(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).enumerate() {
            assert!((got - want(v, (i / 2) % 2)).abs() < 1e-12);
        }
    }
}
