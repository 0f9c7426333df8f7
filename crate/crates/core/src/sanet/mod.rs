//! Side-adapted networks: gated intra-modal towers, the inter-modal tower
//! with optional dimension transform, and the linear fusion layer that
//! produces item embeddings from pruned hidden-state stacks.

mod checkpoint;
mod plan;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use plan::{group_size_feasible, select_layers, DropMode, LayerDropPlan};

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Linear};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Symmetric: equal text and image encoders, no dimension transform.
    Vs,
    /// Asymmetric: a larger text encoder aligned through the DTL.
    Va,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vs => "VS",
            Variant::Va => "VA",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VS" => Ok(Variant::Vs),
            "VA" => Ok(Variant::Va),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Bottleneck adapter: `y = x + up(gelu(down(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct SanBlock {
    pub down: Linear,
    pub up: Linear,
}

impl SanBlock {
    /// Down-projection is seeded random, up-projection starts at zero so a
    /// fresh block is the identity.
    pub fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, hidden: usize, bottleneck: usize) -> Result<Self> {
        let std = 1.0 / (hidden as f64).sqrt();
        let down = Linear::new(
            store,
            &format!("{name}.down"),
            hidden,
            bottleneck,
            normal(rng, &[hidden, bottleneck], std),
            true,
        )?;
        let up = Linear::new(
            store,
            &format!("{name}.up"),
            bottleneck,
            hidden,
            Tensor::zeros(&[bottleneck, hidden]),
            true,
        )?;
        Ok(Self { down, up })
    }

    pub fn hidden(&self) -> usize {
        self.down.fan_in
    }

    pub fn forward<'a, T: Real>(&self, tape: &mut Tape<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let h = tape.value(x).dims2().1;
        if h != self.hidden() {
            return Err(Error::dim("sanb", &[self.hidden()], tape.value(x).shape()));
        }
        let z = self.down.forward(tape, store, x)?;
        let z = tape.gelu(z);
        let z = self.up.forward(tape, store, z)?;
        tape.add(x, z)
    }

    pub fn param_count(&self) -> usize {
        self.down.param_count() + self.up.param_count()
    }
}

/// Scalar gate, valued `sigmoid(raw)`.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub raw: ParamId,
}

impl Gate {
    pub fn new(store: &mut ParamStore<f32>, name: &str) -> Result<Self> {
        Ok(Self {
            raw: store.add(format!("{name}.gate"), Tensor::scalar(0.0), true)?,
        })
    }

    pub fn value<T: Real>(&self, store: &ParamStore<T>) -> T {
        crate::tensor::sigmoid(store.tensor(self.raw).item())
    }

    /// `g·a + (1 − g)·b`
    pub fn mix<'a, T: Real>(&self, tape: &mut Tape<'a, T>, store: &'a ParamStore<T>, a: Var, b: Var) -> Result<Var> {
        let raw = tape.param(store, self.raw);
        let g = tape.sigmoid(raw);
        let rest = tape.one_minus(g);
        let ga = tape.mul(g, a)?;
        let rb = tape.mul(rest, b)?;
        tape.add(ga, rb)
    }
}

/// Intra-modal tower: `m` blocks and `m − 1` gates (the first block only
/// sees the embedding output).
#[derive(Clone, Debug)]
pub struct IntraTower {
    pub blocks: Vec<SanBlock>,
    pub gates: Vec<Gate>,
}

impl IntraTower {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, m: usize, hidden: usize, bottleneck: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(m);
        let mut gates = Vec::with_capacity(m.saturating_sub(1));
        for i in 1..=m {
            blocks.push(SanBlock::new(store, rng, &format!("{name}.block{i}"), hidden, bottleneck)?);
            if i > 1 {
                gates.push(Gate::new(store, &format!("{name}.block{i}"))?);
            }
        }
        Ok(Self { blocks, gates })
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    /// `states` holds `m + 1` matrices `[items, H]`: the embedding output
    /// followed by the kept layers.
    ///
    /// `b₁ = SANB₁(s₀)`, `bᵢ = SANBᵢ(μᵢ·bᵢ₋₁ + (1 − μᵢ)·sᵢ)` for `i = 2..m`.
    pub fn forward<'a, T: Real>(&self, tape: &mut Tape<'a, T>, store: &'a ParamStore<T>, states: &[Var]) -> Result<Var> {
        if states.len() != self.m() + 1 {
            return Err(Error::Contract(format!(
                "intra tower with {} blocks needs {} states, got {}",
                self.m(),
                self.m() + 1,
                states.len()
            )));
        }
        let mut b = self.blocks[0].forward(tape, store, states[0])?;
        for i in 1..self.m() {
            let input = self.gates[i - 1].mix(tape, store, b, states[i + 1])?;
            b = self.blocks[i].forward(tape, store, input)?;
        }
        Ok(b)
    }
}

/// Inter-modal tower: `m` blocks, each with its own image/text gate.
#[derive(Clone, Debug)]
pub struct InterTower {
    pub blocks: Vec<SanBlock>,
    pub gates: Vec<Gate>,
}

impl InterTower {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, m: usize, hidden: usize, bottleneck: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(m);
        let mut gates = Vec::with_capacity(m);
        for i in 1..=m {
            blocks.push(SanBlock::new(store, rng, &format!("{name}.block{i}"), hidden, bottleneck)?);
            gates.push(Gate::new(store, &format!("{name}.block{i}"))?);
        }
        Ok(Self { blocks, gates })
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    /// `image` and `text` hold `m + 1` matrices of equal width (text already
    /// passed through the DTL when present).
    ///
    /// `b₁ = SANB₁(β₁·v₀ + (1 − β₁)·x₀)`,
    /// `bᵢ = SANBᵢ(βᵢ·vᵢ + (1 − βᵢ)·xᵢ + bᵢ₋₁)` for `i = 2..m`.
    pub fn forward<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        image: &[Var],
        text: &[Var],
    ) -> Result<Var> {
        let need = self.m() + 1;
        if image.len() != need || text.len() != need {
            return Err(Error::Contract(format!(
                "inter tower with {} blocks needs {need} states per modality, got {} image / {} text",
                self.m(),
                image.len(),
                text.len()
            )));
        }
        let first = self.gates[0].mix(tape, store, image[0], text[0])?;
        let mut b = self.blocks[0].forward(tape, store, first)?;
        for i in 1..self.m() {
            let fused = self.gates[i].mix(tape, store, image[i + 1], text[i + 1])?;
            let input = tape.add(fused, b)?;
            b = self.blocks[i].forward(tape, store, input)?;
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IisanConfig {
    pub variant: Variant,
    pub text_hidden: usize,
    pub image_hidden: usize,
    pub text_plan: LayerDropPlan,
    pub image_plan: LayerDropPlan,
    pub bottleneck: usize,
    pub d_seq: usize,
}

impl IisanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_plan.m() != self.image_plan.m() || self.text_plan.m() == 0 {
            return Err(Error::Config(format!(
                "text plan keeps {} blocks but image plan keeps {}; all towers must share m",
                self.text_plan.m(),
                self.image_plan.m()
            )));
        }
        if self.variant == Variant::Vs && self.text_hidden != self.image_hidden {
            return Err(Error::Config(format!(
                "VS needs equal hidden widths, got text {} and image {}",
                self.text_hidden, self.image_hidden
            )));
        }
        if self.bottleneck == 0 || self.d_seq == 0 {
            return Err(Error::Config("bottleneck and d_seq must be positive".into()));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.text_plan.m()
    }

    /// Width of `[e_image : e_inter : e_text]`.
    pub fn fusion_input(&self) -> usize {
        2 * self.image_hidden + self.text_hidden
    }
}

/// Three side towers plus dimension transform and fusion layer.
#[derive(Clone, Debug)]
pub struct IisanModel {
    pub config: IisanConfig,
    pub intra_text: IntraTower,
    pub intra_image: IntraTower,
    pub inter: InterTower,
    pub dtl: Option<Linear>,
    pub fusion: Linear,
}

impl IisanModel {
    /// Registers all parameters under `san.` in `store`.
    pub fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, config: IisanConfig) -> Result<Self> {
        config.validate()?;
        let m = config.m();
        let d = config.bottleneck;
        let intra_text = IntraTower::new(store, rng, "san.intra_text", m, config.text_hidden, d)?;
        let intra_image = IntraTower::new(store, rng, "san.intra_image", m, config.image_hidden, d)?;
        let inter = InterTower::new(store, rng, "san.inter", m, config.image_hidden, d)?;
        let dtl = match config.variant {
            Variant::Vs => None,
            Variant::Va => {
                let w = normal(rng, &[config.text_hidden, config.image_hidden], 1.0 / (config.text_hidden as f64).sqrt());
                Some(Linear::new(store, "san.dtl", config.text_hidden, config.image_hidden, w, true)?)
            }
        };
        let fin = config.fusion_input();
        let w = normal(rng, &[fin, config.d_seq], 1.0 / (fin as f64).sqrt());
        let fusion = Linear::new(store, "san.fusion", fin, config.d_seq, w, true)?;
        Ok(Self {
            config,
            intra_text,
            intra_image,
            inter,
            dtl,
            fusion,
        })
    }

    /// Text states as seen by the inter tower.
    pub fn inter_text<'a, T: Real>(&self, tape: &mut Tape<'a, T>, store: &'a ParamStore<T>, text: &[Var]) -> Result<Vec<Var>> {
        match &self.dtl {
            None => Ok(text.to_vec()),
            Some(dtl) => text.iter().map(|&x| dtl.forward(tape, store, x)).collect(),
        }
    }

    pub fn inter_forward<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        text: &[Var],
        image: &[Var],
    ) -> Result<Var> {
        let x = self.inter_text(tape, store, text)?;
        self.inter.forward(tape, store, image, &x)
    }

    /// `FL([e_image : e_inter : e_text])` for a batch of items; each state
    /// list holds `m + 1` matrices with one row per item.
    pub fn item_embed<'a, T: Real>(
        &self,
        tape: &mut Tape<'a, T>,
        store: &'a ParamStore<T>,
        text: &[Var],
        image: &[Var],
    ) -> Result<Var> {
        let e_text = self.intra_text.forward(tape, store, text)?;
        let e_image = self.intra_image.forward(tape, store, image)?;
        let e_inter = self.inter_forward(tape, store, text, image)?;
        let cat = tape.concat_cols(&[e_image, e_inter, e_text])?;
        self.fusion.forward(tape, store, cat)
    }

    /// Trainable scalars in the side network.
    pub fn param_count(&self) -> usize {
        let towers: usize = [&self.intra_text.blocks, &self.intra_image.blocks, &self.inter.blocks]
            .iter()
            .flat_map(|b| b.iter())
            .map(SanBlock::param_count)
            .sum();
        let gates = self.intra_text.gates.len() + self.intra_image.gates.len() + self.inter.gates.len();
        towers + gates + self.dtl.map_or(0, |l| l.param_count()) + self.fusion.param_count()
    }

    /// Current value of every gate, by parameter name.
    pub fn gate_values(&self, store: &ParamStore<f32>) -> Vec<(String, f32)> {
        self.intra_text
            .gates
            .iter()
            .chain(&self.intra_image.gates)
            .chain(&self.inter.gates)
            .map(|g| (store.get(g.raw).name.clone(), g.value(store)))
            .collect()
    }
}
