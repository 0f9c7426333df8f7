//! Frozen synthetic transformer encoders that stand in for pretrained text
//! and image backbones and emit one pooled hidden vector per layer.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::cache::CacheReader;
use crate::error::{Error, Result};
use crate::nn::{normal, uniform_index, Attention, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Real, Scope, Tape, Var};

pub const TEXT_TOKENS_PER_ITEM: usize = 8;
pub const IMAGE_TOKENS_PER_ITEM: usize = 16;
const ENCODER_HEADS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    /// Length of the synthetic token (or patch) sequence for one item.
    pub fn tokens_per_item(self) -> usize {
        match self {
            Modality::Text => TEXT_TOKENS_PER_ITEM,
            Modality::Image => IMAGE_TOKENS_PER_ITEM,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub layers: usize,
    pub hidden_dim: usize,
    /// Vocabulary size for text, patch codebook size for images.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(modality: Modality, layers: usize, hidden_dim: usize, seed: u64) -> Self {
        Self {
            modality,
            layers,
            hidden_dim,
            vocab_size: 1000,
            max_positions: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.hidden_dim < 2 || !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden_dim must be even and >= 2, got {}",
                self.hidden_dim
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("vocab_size and max_positions must be positive".into()));
        }
        if self.max_positions < self.modality.tokens_per_item() {
            return Err(Error::Config(format!(
                "max_positions {} is below the {} tokens each {} item carries",
                self.max_positions,
                self.modality.tokens_per_item(),
                self.modality
            )));
        }
        Ok(())
    }

    /// Stable 64-bit identity of the weights this config generates.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"iisan-encoder-v1");
        h.update(self.modality.as_str().as_bytes());
        for v in [
            self.layers as u64,
            self.hidden_dim as u64,
            self.vocab_size as u64,
            self.max_positions as u64,
            self.seed,
        ] {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Deterministic synthetic content for an item.
    pub fn item_tokens(&self, item_id: u64) -> Vec<u32> {
        let tag = match self.modality {
            Modality::Text => 0x7465_7874u64,
            Modality::Image => 0x696d_6167u64,
        };
        let seed = self.seed ^ item_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.modality.tokens_per_item())
            .map(|_| uniform_index(&mut rng, self.vocab_size) as u32)
            .collect()
    }
}

/// Per-item, per-layer pooled hidden vectors; `layers[i]` names the encoder
/// layer held in `states[i]` (0 is the embedding output).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateStack {
    pub item_id: u64,
    pub encoder_fingerprint: u64,
    pub layers: Vec<u16>,
    pub states: Vec<Vec<f32>>,
}

impl HiddenStateStack {
    pub fn hidden_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Keeps only the listed layers, in the listed order.
    pub fn prune(&self, keep: &[u16]) -> Result<HiddenStateStack> {
        let mut states = Vec::with_capacity(keep.len());
        for &layer in keep {
            let pos = self
                .layers
                .iter()
                .position(|&l| l == layer)
                .ok_or_else(|| Error::Config(format!("layer {layer} not present in stack")))?;
            states.push(self.states[pos].clone());
        }
        Ok(HiddenStateStack {
            item_id: self.item_id,
            encoder_fingerprint: self.encoder_fingerprint,
            layers: keep.to_vec(),
            states,
        })
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// Pre-norm transformer encoder with bidirectional attention. Weights are
/// generated from the config seed and marked non-trainable.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    prefix: String,
    store: ParamStore<f32>,
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
}

pub fn build_encoder(config: EncoderConfig) -> Result<FrozenEncoder> {
    let prefix = format!("backbone.{}", config.modality);
    FrozenEncoder::build(config, &prefix)
}

impl FrozenEncoder {
    /// Builds the encoder with parameter names under `prefix`.
    pub fn build(config: EncoderConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let std = 1.0 / (h as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let token_embed = store.add(
            format!("{prefix}.token_embed"),
            normal(&mut rng, &[config.vocab_size, h], std),
            false,
        )?;
        let pos_embed = store.add(
            format!("{prefix}.pos_embed"),
            normal(&mut rng, &[config.max_positions, h], std),
            false,
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let name = format!("{prefix}.block{l}");
            let ln1 = LayerNorm::new(&mut store, &format!("{name}.ln1"), h, false)?;
            let attn = Attention::new(&mut store, &mut rng, &format!("{name}.attn"), h, ENCODER_HEADS, std, false)?;
            let ln2 = LayerNorm::new(&mut store, &format!("{name}.ln2"), h, false)?;
            let w_in = normal(&mut rng, &[h, 4 * h], std);
            let mlp_in = Linear::new(&mut store, &format!("{name}.mlp_in"), h, 4 * h, w_in, false)?;
            let w_out = normal(&mut rng, &[4 * h, h], std);
            let mlp_out = Linear::new(&mut store, &format!("{name}.mlp_out"), 4 * h, h, w_out, false)?;
            blocks.push(EncoderBlock {
                ln1,
                attn,
                ln2,
                mlp_in,
                mlp_out,
            });
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            store,
            token_embed,
            pos_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Mutable access, used only when the backbone itself is fine-tuned.
    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "{} tokens exceed max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `tape` and returns the `[1, H]` first-token row
    /// of every layer output (index 0 is the embedding output).
    ///
    /// `after_block(tape, layer, hidden)` may rewrite each block's full
    /// `[tokens, H]` output; it is how embedded adapters are inserted.
    pub fn forward_with<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        tape: &mut Tape<'a, T>,
        tokens: &[u32],
        after_block: &mut dyn FnMut(&mut Tape<'a, T>, usize, Var) -> Result<Var>,
    ) -> Result<Vec<Var>> {
        self.check_tokens(tokens)?;
        let prev = tape.set_scope(Scope::Backbone);
        let result = self.forward_inner(store, tape, tokens, after_block);
        tape.set_scope(prev);
        result
    }

    pub fn forward<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        tape: &mut Tape<'a, T>,
        tokens: &[u32],
    ) -> Result<Vec<Var>> {
        self.forward_with(store, tape, tokens, &mut |_, _, x| Ok(x))
    }

    fn forward_inner<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        tape: &mut Tape<'a, T>,
        tokens: &[u32],
        after_block: &mut dyn FnMut(&mut Tape<'a, T>, usize, Var) -> Result<Var>,
    ) -> Result<Vec<Var>> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let table = tape.param(store, self.token_embed);
        let pos_table = tape.param(store, self.pos_embed);
        let tok = tape.gather_rows(table, &idx)?;
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut pooled = Vec::with_capacity(self.blocks.len() + 1);
        pooled.push(tape.row(x, 0)?);
        for (l, block) in self.blocks.iter().enumerate() {
            let a = block.ln1.forward(tape, store, x)?;
            let a = block.attn.forward(tape, store, a, false)?;
            x = tape.add(x, a)?;
            let f = block.ln2.forward(tape, store, x)?;
            let f = block.mlp_in.forward(tape, store, f)?;
            let f = tape.gelu(f);
            let f = block.mlp_out.forward(tape, store, f)?;
            x = tape.add(x, f)?;
            let prev = tape.set_scope(Scope::Side);
            x = after_block(tape, l + 1, x)?;
            tape.set_scope(prev);
            pooled.push(tape.row(x, 0)?);
        }
        Ok(pooled)
    }

    /// Encodes one item's tokens into its full `L + 1` stack.
    pub fn encode_item(&self, item_id: u64, tokens: &[u32]) -> Result<HiddenStateStack> {
        let mut tape = Tape::<f32>::new();
        let pooled = self.forward(&self.store, &mut tape, tokens)?;
        let states = pooled.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        Ok(HiddenStateStack {
            item_id,
            encoder_fingerprint: self.fingerprint(),
            layers: (0..=self.config.layers as u16).collect(),
            states,
        })
    }

    /// Encodes an item from its synthetic content.
    pub fn encode_catalog_item(&self, item_id: u64) -> Result<HiddenStateStack> {
        self.encode_item(item_id, &self.config.item_tokens(item_id))
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }
}

/// Reads every stack of a cache file in file order.
pub fn import_hidden_states(path: &Path) -> Result<Vec<HiddenStateStack>> {
    let reader = CacheReader::open(path)?;
    reader.iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, h: usize, seed: u64) -> EncoderConfig {
        EncoderConfig::new(Modality::Text, layers, h, seed)
    }

    #[test]
    fn odd_or_zero_hidden_dim_is_rejected() {
        assert!(matches!(build_encoder(cfg(1, 5, 0)), Err(Error::Config(_))));
        assert!(matches!(build_encoder(cfg(1, 0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_tracks_seed() {
        assert_eq!(cfg(2, 8, 3).fingerprint(), cfg(2, 8, 3).fingerprint());
        assert_ne!(cfg(2, 8, 3).fingerprint(), cfg(2, 8, 4).fingerprint());
    }

    #[test]
    fn stack_has_l_plus_one_states() {
        let enc = build_encoder(cfg(12, 64, 1)).unwrap();
        let s = enc.encode_catalog_item(7).unwrap();
        assert_eq!(s.len(), 13);
        assert!(s.states.iter().all(|v| v.len() == 64 && v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn single_token_single_layer() {
        let enc = build_encoder(cfg(1, 4, 1)).unwrap();
        let s = enc.encode_item(0, &[3]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.hidden_dim(), 4);
    }

    #[test]
    fn bad_tokens() {
        let enc = build_encoder(cfg(1, 4, 1)).unwrap();
        assert!(matches!(enc.encode_item(0, &[]), Err(Error::Input(_))));
        assert!(matches!(enc.encode_item(0, &[1000]), Err(Error::Input(_))));
    }

    #[test]
    fn encoding_is_deterministic_and_order_sensitive() {
        let enc = build_encoder(cfg(2, 8, 9)).unwrap();
        let a = enc.encode_item(0, &[1, 2, 3]).unwrap();
        assert_eq!(a, enc.encode_item(0, &[1, 2, 3]).unwrap());
        let b = enc.encode_item(0, &[1, 3, 2]).unwrap();
        assert_eq!(a.states[0], b.states[0]);
        assert_ne!(a.states[2], b.states[2]);
    }

    #[test]
    fn weights_are_frozen() {
        let enc = build_encoder(cfg(1, 4, 1)).unwrap();
        assert!(enc.params().iter().all(|p| !p.trainable));
    }
}
