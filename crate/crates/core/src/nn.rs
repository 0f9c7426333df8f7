//! Small layer helpers shared by the frozen encoders, the side towers and
//! the sequence encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Gaussian tensor with the given standard deviation.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Tensor<f32>,
        trainable: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), weight, trainable)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), trainable)?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<'a, T: Real>(&self, tape: &mut Tape<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), trainable)?;
        let offset = store.add(format!("{name}.offset"), Tensor::zeros(&[dim]), trainable)?;
        Ok(Self { gain, offset })
    }

    pub fn forward<'a, T: Real>(&self, tape: &mut Tape<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.offset);
        tape.layernorm(x, g, b)
    }
}

/// Query/key/value/output projections with an even head split. Keys
/// carry no bias: a key bias only shifts each softmax row by a constant.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: ParamId,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        std: f64,
        trainable: bool,
    ) -> Result<Self> {
        let proj = |store: &mut ParamStore<f32>, suffix: &str, rng: &mut ChaCha8Rng| {
            Linear::new(store, &format!("{name}.{suffix}"), dim, dim, normal(rng, &[dim, dim], std), trainable)
        };
        let q = proj(store, "q", rng)?;
        let k = store.add(format!("{name}.k.weight"), normal(rng, &[dim, dim], std), trainable)?;
        Ok(Self {
            q,
            k,
            v: proj(store, "v", rng)?,
            o: proj(store, "o", rng)?,
            heads,
        })
    }

    /// `x` is `[tokens, dim]`; returns `[tokens, dim]`.
    pub fn forward<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let kw = tape.param(store, self.k);
        let k = tape.matmul(x, kw)?;
        let v = self.v.forward(tape, store, x)?;
        let dim = self.q.fan_out;
        let hd = dim / self.heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores, causal)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, store, cat)
    }
}
