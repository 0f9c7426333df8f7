use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ProbeResult, Regime};
use crate::backbone::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::nn::{normal, Linear};
use crate::recsys::{sequence_loss, Batch, SeqConfig, SeqEncoder};
use crate::sanet::SanBlock;
use crate::tensor::{ParamStore, Scope, Tape, Var};

/// Adapter baseline: one bottleneck adapter after every backbone block,
/// then a fusion layer over the two last-layer pooled vectors.
#[derive(Clone, Debug)]
pub struct EpeftModel {
    pub text_adapters: Vec<SanBlock>,
    pub image_adapters: Vec<SanBlock>,
    pub fusion: Linear,
    pub seq: SeqEncoder,
}

#[derive(Clone, Debug)]
pub struct EpeftRecommender {
    pub model: EpeftModel,
    pub store: ParamStore<f32>,
}

fn adapters(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, cfg: &EncoderConfig, tag: &str, d: usize) -> Result<Vec<SanBlock>> {
    (1..=cfg.layers)
        .map(|l| SanBlock::new(store, rng, &format!("epeft.{tag}.block{l}"), cfg.hidden_dim, d))
        .collect()
}

impl EpeftRecommender {
    pub fn new(text: &EncoderConfig, image: &EncoderConfig, bottleneck: usize, seq: SeqConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_adapters = adapters(&mut store, &mut rng, text, "text", bottleneck)?;
        let image_adapters = adapters(&mut store, &mut rng, image, "image", bottleneck)?;
        let fin = text.hidden_dim + image.hidden_dim;
        let w = normal(&mut rng, &[fin, seq.d], 1.0 / (fin as f64).sqrt());
        let fusion = Linear::new(&mut store, "epeft.fusion", fin, seq.d, w, true)?;
        let seq = SeqEncoder::new(&mut store, &mut rng, seq)?;
        Ok(Self {
            model: EpeftModel {
                text_adapters,
                image_adapters,
                fusion,
                seq,
            },
            store,
        })
    }

    fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a, f32>,
        enc: &'a FrozenEncoder,
        adapters: &'a [SanBlock],
        items: &[u64],
    ) -> Result<Var> {
        if adapters.len() != enc.config().layers {
            return Err(Error::Config(format!(
                "{} adapters for a {}-layer encoder",
                adapters.len(),
                enc.config().layers
            )));
        }
        let store = &self.store;
        let mut rows = Vec::with_capacity(items.len());
        for &i in items {
            let pooled = enc.forward_with(enc.params(), tape, &enc.config().item_tokens(i), &mut |tape, l, x| {
                adapters[l - 1].forward(tape, store, x)
            })?;
            rows.push(*pooled.last().expect("at least the embedding output"));
        }
        let prev = tape.set_scope(Scope::Backbone);
        let out = tape.concat_rows(&rows);
        tape.set_scope(prev);
        out
    }

    /// `[items, d_seq]` embeddings from adapted last-layer states.
    pub fn item_embed<'a>(
        &'a self,
        tape: &mut Tape<'a, f32>,
        text: &'a FrozenEncoder,
        image: &'a FrozenEncoder,
        items: &[u64],
    ) -> Result<Var> {
        let t = self.encode(tape, text, &self.model.text_adapters, items)?;
        let i = self.encode(tape, image, &self.model.image_adapters, items)?;
        let cat = tape.concat_cols(&[t, i])?;
        self.model.fusion.forward(tape, &self.store, cat)
    }
}

/// One adapter-baseline training step with frozen backbones.
pub fn epeft_probe(rec: &EpeftRecommender, text: &FrozenEncoder, image: &FrozenEncoder, batch: &Batch) -> Result<ProbeResult> {
    let mut tape = Tape::new();
    let emb = rec.item_embed(&mut tape, text, image, &batch.items)?;
    let loss = sequence_loss(&mut tape, &rec.model.seq, &rec.store, emb, batch, None)?;
    let grads = tape.backward(loss)?;
    Ok(ProbeResult {
        regime: Regime::EpeftAdapter,
        with_grad: grads.reached().clone(),
        backbone_retained: tape.retained_in_scope(Scope::Backbone),
        loss_bits: (tape.value(loss).item() as f64).to_bits(),
    })
}
