use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Attention, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SeqConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            blocks: 2,
            max_len: 10,
            dropout: 0.1,
        }
    }
}

impl SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_seq {} is not divisible into {} heads", self.d, self.heads)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct SeqBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm causal transformer over item embeddings with learned
/// position embeddings and a final layer norm.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub config: SeqConfig,
    pos: ParamId,
    blocks: Vec<SeqBlock>,
    ln_out: LayerNorm,
}

impl SeqEncoder {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, config: SeqConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let std = 1.0 / (d as f64).sqrt();
        let pos = store.add("seq.pos_embed", normal(rng, &[config.max_len, d], std), true)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 1..=config.blocks {
            let name = format!("seq.block{b}");
            let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d, true)?;
            let attn = Attention::new(store, rng, &format!("{name}.attn"), d, config.heads, std, true)?;
            let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d, true)?;
            let w = normal(rng, &[d, 4 * d], std);
            let ff_in = Linear::new(store, &format!("{name}.ff_in"), d, 4 * d, w, true)?;
            let w = normal(rng, &[4 * d, d], 0.5 * std);
            let ff_out = Linear::new(store, &format!("{name}.ff_out"), 4 * d, d, w, true)?;
            blocks.push(SeqBlock {
                ln1,
                attn,
                ln2,
                ff_in,
                ff_out,
            });
        }
        let ln_out = LayerNorm::new(store, "seq.ln_out", d, true)?;
        Ok(Self {
            config,
            pos,
            blocks,
            ln_out,
        })
    }

    /// The most recent `max_len` entries.
    pub fn truncate<'s, X>(&self, seq: &'s [X]) -> &'s [X] {
        &seq[seq.len().saturating_sub(self.config.max_len)..]
    }

    /// `items` is `[t, d]` in chronological order; returns `[t, d]` where
    /// row `i` only sees rows `0..=i`. Dropout masks are drawn from
    /// `dropout` when given (training mode).
    pub fn encode<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        items: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shape = tape.value(items).shape().to_vec();
        let t = *shape.first().unwrap_or(&0);
        if shape.len() != 2 || t == 0 {
            return Err(Error::Input(format!("sequence encoder needs a non-empty [t, d] input, got {shape:?}")));
        }
        if t > self.config.max_len || shape[1] != self.config.d {
            return Err(Error::dim("seq_encode", &shape, &[self.config.max_len, self.config.d]));
        }
        let p = self.config.dropout;
        let table = tape.param(store, self.pos);
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(table, &positions)?;
        let x = tape.add(items, pos)?;
        let mut x = apply_dropout(tape, x, p, dropout.as_deref_mut());
        for b in &self.blocks {
            let a = b.ln1.forward(tape, store, x)?;
            let a = b.attn.forward(tape, store, a, true)?;
            let a = apply_dropout(tape, a, p, dropout.as_deref_mut());
            x = tape.add(x, a)?;
            let f = b.ln2.forward(tape, store, x)?;
            let f = b.ff_in.forward(tape, store, f)?;
            let f = tape.gelu(f);
            let f = b.ff_out.forward(tape, store, f)?;
            let f = apply_dropout(tape, f, p, dropout.as_deref_mut());
            x = tape.add(x, f)?;
        }
        self.ln_out.forward(tape, store, x)
    }

    /// Final-position output, `[1, d]`.
    pub fn user_state<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        items: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.encode(tape, store, items, dropout)?;
        let t = tape.value(h).shape()[0];
        tape.row(h, t - 1)
    }
}

/// Inverted dropout with a mask drawn from `rng`; identity without one.
fn apply_dropout<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else {
        return x;
    };
    if p == 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask).expect("mask matches input"));
    tape.mul(x, m).expect("equal shapes")
}

/// `ŷ = state · item`, accumulated in `f64`.
pub fn score<T: Real>(state: &[T], item: &[T]) -> Result<f64> {
    if state.len() != item.len() {
        return Err(Error::dim("score", &[state.len()], &[item.len()]));
    }
    Ok(state.iter().zip(item).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
}
