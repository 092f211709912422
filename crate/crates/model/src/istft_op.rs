//! Differentiable masked inverse STFT: magnitude masks times the mixture
//! spectrogram (mixture phase), resynthesised per source and channel.

use std::sync::Arc;

use num_complex::Complex64;
use pachubert_autodiff::graph::{GraphError, Result as GResult};
use pachubert_autodiff::{CustomOp, Float, Tensor};
use pachubert_core::dsp::{IstftPlan, Spectrogram};
use pachubert_core::par;

/// Masks `[N, S, C, T, F]` to waveforms `[N, S, C, L]`. Only the valid
/// frames of each mixture are synthesised; padded frames get no gradient.
pub struct MaskedIstft {
    plan: Arc<IstftPlan>,
    /// Per `(item, channel)`, valid frames x bins.
    mix: Vec<Vec<Complex64>>,
    channels: usize,
    out_len: usize,
}

impl MaskedIstft {
    pub fn new(plan: Arc<IstftPlan>, mixtures: &[&Spectrogram], out_len: usize) -> Self {
        let channels = mixtures.first().map_or(0, |s| s.channels());
        let mut mix = Vec::with_capacity(mixtures.len() * channels);
        for spec in mixtures {
            assert_eq!(spec.valid_frames, plan.frames, "mixture frames do not match the synthesis plan");
            for c in 0..spec.channels() {
                let ch = spec.bins.index_axis(ndarray::Axis(0), c);
                mix.push(
                    ch.rows()
                        .into_iter()
                        .take(spec.valid_frames)
                        .flat_map(|r| r.iter().map(|z| Complex64::new(z.re as f64, z.im as f64)).collect::<Vec<_>>())
                        .collect(),
                );
            }
        }
        Self { plan, mix, channels, out_len }
    }

    fn dims(&self, shape: &[usize]) -> GResult<(usize, usize, usize, usize, usize)> {
        let half = self.plan.window / 2;
        match *shape {
            [n, s, c, t, f] if c == self.channels && n * c == self.mix.len() && f == half && t >= self.plan.frames => Ok((n, s, c, t, f)),
            _ => Err(GraphError::Custom { name: "masked_istft".into(), detail: format!("mask shape {shape:?}") }),
        }
    }
}

impl<T: Float> CustomOp<T> for MaskedIstft {
    fn name(&self) -> &str {
        "masked_istft"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> GResult<Tensor<T>> {
        let m = inputs[0];
        let (n, s, c, t, f) = self.dims(&m.shape)?;
        let valid = self.plan.frames;
        let rows = par::map_range(n * s * c, |idx| {
            let (b, ch) = (idx / (s * c), idx % c);
            let x = &self.mix[b * c + ch];
            let mk = &m.data[idx * t * f..idx * t * f + valid * f];
            let y: Vec<Complex64> = x.iter().zip(mk).map(|(z, &a)| z * a.as_f64()).collect();
            self.plan.synthesize(&y, self.out_len)
        });
        Ok(Tensor::new(vec![n, s, c, self.out_len], rows.into_iter().flatten().map(T::of).collect()))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let m = inputs[0];
        let (n, s, c, t, f) = self.dims(&m.shape).expect("validated in forward");
        let (valid, w, l) = (self.plan.frames, self.plan.window as f64, self.out_len);
        let rows = par::map_range(n * s * c, |idx| {
            let b = idx / (s * c);
            let ch = idx % c;
            let g: Vec<f64> = grad_out.data[idx * l..(idx + 1) * l].iter().map(|v| v.as_f64()).collect();
            let adj = self.plan.synthesize_adjoint(&g);
            let x = &self.mix[b * c + ch];
            let mut dm = vec![T::zero(); t * f];
            for (i, (z, a)) in x.iter().zip(&adj).enumerate().take(valid * f) {
                let weight = if i % f == 0 { 1.0 } else { 2.0 };
                dm[i] = T::of(weight / w * (z * a.conj()).re);
            }
            dm
        });
        vec![Some(Tensor::new(m.shape.clone(), rows.into_iter().flatten().collect()))]
    }
}
