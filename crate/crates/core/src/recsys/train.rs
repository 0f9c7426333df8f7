use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::{EvalTarget, Popularity, Split, UserSplit};
use super::loss::{debiased_ce_on_tape, LossTerm};
use super::metrics::{pessimistic_rank, MetricReport};
use super::seq::{score, SeqConfig, SeqEncoder};
use crate::backbone::{FrozenEncoder, HiddenStateStack};
use crate::cache::CacheReader;
use crate::error::{Error, Result};
use crate::sanet::{read_checkpoint, write_checkpoint, IisanConfig, IisanModel};
use crate::tensor::{Adam, AdamConfig, GradMap, ParamStore, Real, Scope, Tape, Tensor, Var};

/// Side network plus sequence encoder; parameter handles only.
#[derive(Clone, Debug)]
pub struct RecModel {
    pub san: IisanModel,
    pub seq: SeqEncoder,
}

/// A trainable recommender: model structure plus its parameters.
#[derive(Clone, Debug)]
pub struct Recommender {
    pub model: RecModel,
    pub store: ParamStore<f32>,
}

impl Recommender {
    pub fn new(san: IisanConfig, seq: SeqConfig, seed: u64) -> Result<Self> {
        if san.d_seq != seq.d {
            return Err(Error::Config(format!("fusion width {} differs from d_seq {}", san.d_seq, seq.d)));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let san = IisanModel::new(&mut store, &mut rng, san)?;
        let seq = SeqEncoder::new(&mut store, &mut rng, seq)?;
        Ok(Self {
            model: RecModel { san, seq },
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let c = &self.model.san.config;
        write_checkpoint(path, c.variant, &c.text_plan, &c.image_plan, &self.store)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let c = &self.model.san.config;
        read_checkpoint(path, c.variant, &c.text_plan, &c.image_plan, &mut self.store)
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }
}

/// Where per-layer item states come from.
#[derive(Debug)]
pub enum ItemSource {
    /// Pre-pruned hidden-state caches.
    Cached { text: CacheReader, image: CacheReader },
    /// Backbones run on every step. With `fine_tune` the backbone weights
    /// are trainable and updated alongside the side network.
    Live {
        text: FrozenEncoder,
        image: FrozenEncoder,
        fine_tune: bool,
    },
}

fn open_cache(path: &Path, encoder_fp: u64, layers: &[u16], hidden: usize, what: &str) -> Result<CacheReader> {
    if !path.exists() {
        return Err(Error::Staleness(format!(
            "{what} cache {} is missing; run `cache` first",
            path.display()
        )));
    }
    let reader = CacheReader::open(path)?;
    reader.expect_fingerprint(encoder_fp)?;
    let h = reader.header();
    if h.kept_layers != layers {
        return Err(Error::Staleness(format!(
            "{what} cache holds layers {:?} but the plan needs {layers:?}; rebuild the cache",
            h.kept_layers
        )));
    }
    if h.hidden_dim as usize != hidden {
        return Err(Error::Staleness(format!(
            "{what} cache width {} differs from configured {hidden}; rebuild the cache",
            h.hidden_dim
        )));
    }
    Ok(reader)
}

impl ItemSource {
    /// Opens both caches and checks them against the encoders and plans
    /// of `config`.
    pub fn cached(
        text_path: &Path,
        image_path: &Path,
        text_fp: u64,
        image_fp: u64,
        config: &IisanConfig,
    ) -> Result<Self> {
        Ok(ItemSource::Cached {
            text: open_cache(text_path, text_fp, &config.text_plan.cache_layers(), config.text_hidden, "text")?,
            image: open_cache(image_path, image_fp, &config.image_plan.cache_layers(), config.image_hidden, "image")?,
        })
    }

    pub fn live(text: FrozenEncoder, image: FrozenEncoder, fine_tune: bool) -> Self {
        let mut s = ItemSource::Live { text, image, fine_tune };
        s.set_fine_tune(fine_tune);
        s
    }

    pub fn set_fine_tune(&mut self, on: bool) {
        if let ItemSource::Live { text, image, fine_tune } = self {
            *fine_tune = on;
            text.params_mut().set_trainable(on);
            image.params_mut().set_trainable(on);
        }
    }

    pub fn is_cached(&self) -> bool {
        matches!(self, ItemSource::Cached { .. })
    }

    pub fn backbones(&self) -> Option<(&FrozenEncoder, &FrozenEncoder)> {
        match self {
            ItemSource::Live { text, image, .. } => Some((text, image)),
            ItemSource::Cached { .. } => None,
        }
    }

    /// Pruned stacks for one item, ordered as the plan's cache layers.
    fn stacks(&self, item: u64, config: &IisanConfig) -> Result<(HiddenStateStack, HiddenStateStack)> {
        match self {
            ItemSource::Cached { text, image } => Ok((text.read_item(item)?, image.read_item(item)?)),
            ItemSource::Live { text, image, .. } => Ok((
                text.encode_catalog_item(item)?.prune(&config.text_plan.cache_layers())?,
                image.encode_catalog_item(item)?.prune(&config.image_plan.cache_layers())?,
            )),
        }
    }

    /// `m + 1` matrices per modality with one row per item.
    pub fn state_tensors(&self, items: &[u64], config: &IisanConfig) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let stacks = items
            .par_iter()
            .map(|&i| self.stacks(i, config))
            .collect::<Result<Vec<_>>>()?;
        let entries = config.m() + 1;
        let gather = |pick: &dyn Fn(&(HiddenStateStack, HiddenStateStack)) -> &HiddenStateStack| {
            (0..entries)
                .map(|e| Tensor::from_rows(&stacks.iter().map(|s| pick(s).states[e].clone()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()
        };
        Ok((gather(&|s| &s.0)?, gather(&|s| &s.1)?))
    }

    /// Item states recorded on `tape`. Live backbones run on the tape, so
    /// their activations are part of the graph (and of the gradient path
    /// when fine-tuned).
    pub fn states_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, f32>,
        items: &[u64],
        config: &IisanConfig,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        match self {
            ItemSource::Cached { .. } => {
                let (t, i) = self.state_tensors(items, config)?;
                Ok((
                    t.into_iter().map(|x| tape.constant(x)).collect(),
                    i.into_iter().map(|x| tape.constant(x)).collect(),
                ))
            }
            ItemSource::Live { text, image, .. } => Ok((
                live_states(tape, text, items, &config.text_plan.cache_layers())?,
                live_states(tape, image, items, &config.image_plan.cache_layers())?,
            )),
        }
    }
}

fn live_states<'a>(tape: &mut Tape<'a, f32>, enc: &'a FrozenEncoder, items: &[u64], layers: &[u16]) -> Result<Vec<Var>> {
    let mut per_item = Vec::with_capacity(items.len());
    for &i in items {
        let pooled = enc.forward(enc.params(), tape, &enc.config().item_tokens(i))?;
        per_item.push(layers.iter().map(|&l| pooled[l as usize]).collect::<Vec<_>>());
    }
    let prev = tape.set_scope(Scope::Backbone);
    let out = (0..layers.len())
        .map(|e| {
            let rows: Vec<Var> = per_item.iter().map(|v| v[e]).collect();
            tape.concat_rows(&rows)
        })
        .collect();
    tape.set_scope(prev);
    out
}

/// One training batch over a sorted set of distinct in-batch items.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<u64>,
    pub popularity: Vec<f64>,
    /// Per user: input columns in order; the loss terms hold the targets.
    pub inputs: Vec<Vec<usize>>,
    pub terms: Vec<LossTerm>,
}

impl Batch {
    /// Next-item prediction over each user's truncated training prefix.
    /// Returns `None` when no user has a transition.
    pub fn build(users: &[&UserSplit], popularity: &Popularity, max_len: usize) -> Result<Option<Self>> {
        let windows: Vec<(&UserSplit, &[u64])> = users
            .iter()
            .filter(|u| u.train.len() >= 2)
            .map(|u| (*u, &u.train[u.train.len().saturating_sub(max_len + 1)..]))
            .collect();
        if windows.is_empty() {
            return Ok(None);
        }
        let items: Vec<u64> = windows
            .iter()
            .flat_map(|(_, w)| w.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let col: BTreeMap<u64, usize> = items.iter().enumerate().map(|(c, &i)| (i, c)).collect();
        let popularity = items
            .iter()
            .map(|&i| popularity.get(i).ok_or_else(|| Error::Input(format!("item {i} is not in the catalog"))))
            .collect::<Result<Vec<_>>>()?;
        let mut inputs = Vec::with_capacity(windows.len());
        let mut terms = Vec::new();
        let mut row = 0;
        for (u, w) in windows {
            let owned: BTreeSet<u64> = u.train.iter().copied().collect();
            let excluded: Vec<bool> = items.iter().map(|i| owned.contains(i)).collect();
            inputs.push(w[..w.len() - 1].iter().map(|i| col[i]).collect());
            for target in &w[1..] {
                terms.push(LossTerm {
                    row,
                    positive: col[target],
                    excluded: excluded.clone(),
                });
                row += 1;
            }
        }
        Ok(Some(Self {
            items,
            popularity,
            inputs,
            terms,
        }))
    }
}

/// Mean debiased loss of `batch` given per-layer item states on `tape`.
pub fn batch_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    model: &RecModel,
    store: &'a ParamStore<T>,
    batch: &Batch,
    text: &[Var],
    image: &[Var],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let emb = model.san.item_embed(tape, store, text, image)?;
    sequence_loss(tape, &model.seq, store, emb, batch, dropout)
}

/// Loss given `[batch items, d_seq]` item embeddings `emb`.
pub fn sequence_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    seq: &SeqEncoder,
    store: &'a ParamStore<T>,
    emb: Var,
    batch: &Batch,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut states = Vec::with_capacity(batch.inputs.len());
    for cols in &batch.inputs {
        let x = tape.gather_rows(emb, cols)?;
        states.push(seq.encode(tape, store, x, dropout.as_deref_mut())?);
    }
    let h = tape.concat_rows(&states)?;
    let et = tape.transpose(emb)?;
    let logits = tape.matmul(h, et)?;
    debiased_ce_on_tape(tape, logits, &batch.items, &batch.popularity, &batch.terms)
}

#[derive(Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: GradMap<f32>,
    /// Backbone nodes on the tape that sit on a gradient path.
    pub backbone_retained: usize,
}

/// Forward and backward for one batch; parameters are not touched.
pub fn train_step(rec: &Recommender, source: &ItemSource, batch: &Batch, dropout: Option<&mut ChaCha8Rng>) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let (text, image) = source.states_on_tape(&mut tape, &batch.items, &rec.model.san.config)?;
    let loss = batch_loss(&mut tape, &rec.model, &rec.store, batch, &text, &image, dropout)?;
    let grads = tape.backward(loss)?;
    Ok(StepOutcome {
        loss: tape.value(loss).item() as f64,
        grads,
        backbone_retained: tape.retained_in_scope(Scope::Backbone),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{e}\t{l:.9}\n"));
        }
        s
    }
}

pub fn train(
    rec: &mut Recommender,
    source: &mut ItemSource,
    split: &Split,
    popularity: &Popularity,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(rec, source, split, popularity, cfg, |_, _| {})
}

/// Training loop; `on_epoch(epoch, mean_loss)` is called after each epoch.
pub fn train_with(
    rec: &mut Recommender,
    source: &mut ItemSource,
    split: &Split,
    popularity: &Popularity,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if split.users.is_empty() {
        return Err(Error::Input("no users to train on".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d409);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let max_len = rec.model.seq.config.max_len;
    let mut order: Vec<usize> = (0..split.users.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let users: Vec<&UserSplit> = chunk.iter().map(|&i| &split.users[i]).collect();
            let Some(batch) = Batch::build(&users, popularity, max_len)? else {
                continue;
            };
            let out = train_step(rec, source, &batch, Some(&mut dropout_rng))?;
            if !out.loss.is_finite() {
                return Err(Error::Contract(format!("non-finite loss {} at epoch {epoch}", out.loss)));
            }
            match source {
                ItemSource::Live {
                    text,
                    image,
                    fine_tune: true,
                } => adam.step_all(&mut [&mut rec.store, text.params_mut(), image.params_mut()], &out.grads),
                _ => adam.step(&mut rec.store, &out.grads),
            }
            sum += out.loss;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Input("no user has a training transition".into()));
        }
        let mean = sum / n as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: adam.steps(),
    })
}

const EMBED_CHUNK: usize = 64;

/// `[items, d_seq]` embeddings in the order of `items`.
pub fn item_embeddings(rec: &Recommender, source: &ItemSource, items: &[u64]) -> Result<Tensor<f32>> {
    let cfg = &rec.model.san.config;
    let mut rows = Vec::with_capacity(items.len());
    for chunk in items.chunks(EMBED_CHUNK) {
        let (text, image) = source.state_tensors(chunk, cfg)?;
        let mut tape = Tape::new();
        let t: Vec<Var> = text.into_iter().map(|x| tape.constant(x)).collect();
        let i: Vec<Var> = image.into_iter().map(|x| tape.constant(x)).collect();
        let e = rec.model.san.item_embed(&mut tape, &rec.store, &t, &i)?;
        let v = tape.value(e);
        rows.extend((0..chunk.len()).map(|r| v.row_slice(r).to_vec()));
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, cfg.d_seq]));
    }
    Tensor::from_rows(&rows)
}

/// Full-catalog ranking of each user's `target` item.
pub fn evaluate(
    rec: &Recommender,
    source: &ItemSource,
    split: &Split,
    catalog: &BTreeSet<u64>,
    target: EvalTarget,
) -> Result<MetricReport> {
    if catalog.is_empty() {
        return Err(Error::Input("empty catalog".into()));
    }
    let items: Vec<u64> = catalog.iter().copied().collect();
    let col: BTreeMap<u64, usize> = items.iter().enumerate().map(|(c, &i)| (i, c)).collect();
    let lookup = |u: &UserSplit, i: u64| {
        col.get(&i)
            .copied()
            .ok_or_else(|| Error::Input(format!("item {i} of user {} is not in the catalog", u.user)))
    };
    for u in &split.users {
        lookup(u, u.target(target))?;
    }
    let emb = item_embeddings(rec, source, &items)?;
    let ranks = split
        .users
        .par_iter()
        .map(|u| {
            let history = u.history(target);
            let history = rec.model.seq.truncate(&history);
            let cols = history.iter().map(|&i| lookup(u, i)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let e = tape.constant_ref(&emb);
            let x = tape.gather_rows(e, &cols)?;
            let s = rec.model.seq.user_state(&mut tape, &rec.store, x, None)?;
            let state = tape.value(s).data();
            let scores = (0..items.len())
                .map(|c| score(state, emb.row_slice(c)))
                .collect::<Result<Vec<_>>>()?;
            Ok(pessimistic_rank(&scores, lookup(u, u.target(target))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_ranks(&ranks))
}
