//! Per-step FLOP and activation-memory accounting for four training
//! regimes, plus a probe that reads gradient flow off a real training step.
//!
//! Counting rules, per item and per modality encoder with `L` blocks,
//! width `H` and `s` tokens:
//!
//! * backbone block forward: `8·s·H² + 4·s²·H`
//! * SANB forward on one pooled vector: `4·H·d`; an embedded adapter on
//!   every token of every block: `4·s·H·d` per block
//! * DTL: `2·H_text·H_image` per kept entry; fusion: `2·fan_in·d_seq`
//! * backward: `2×` forward for segments whose weights are trained
//!   (activation plus weight gradients) and `1×` for frozen segments the
//!   backward pass has to traverse (activation gradients only)
//! * stored activations, in floats: `14·H` per token per trainable
//!   backbone block, `6·H` per token per frozen but traversed block,
//!   `2d + H` per token per embedded adapter, `2d + 2H` per SANB, the
//!   input width of the DTL and fusion layers; backbone activations are
//!   counted only when a gradient path runs through them
//!
//! The sequence encoder is identical in every regime and is left out.

mod epeft;

use std::collections::BTreeSet;
use std::fmt;

pub use epeft::{epeft_probe, EpeftModel, EpeftRecommender};

use crate::backbone::{EncoderConfig, IMAGE_TOKENS_PER_ITEM, TEXT_TOKENS_PER_ITEM};
use crate::cache::cache_file_size;
use crate::error::{Error, Result};
use crate::recsys::{train_step, Batch, ItemSource, Recommender};
use crate::sanet::{IisanConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    Fft,
    EpeftAdapter,
    DpeftUncached,
    DpeftCached,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Fft, Regime::EpeftAdapter, Regime::DpeftUncached, Regime::DpeftCached];

    /// Expected order from cheapest to most expensive.
    pub const CHEAPEST_FIRST: [Regime; 4] =
        [Regime::DpeftCached, Regime::DpeftUncached, Regime::EpeftAdapter, Regime::Fft];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Fft => "FFT",
            Regime::EpeftAdapter => "EPEFT_ADAPTER",
            Regime::DpeftUncached => "DPEFT_UNCACHED",
            Regime::DpeftCached => "DPEFT_CACHED",
        }
    }

    fn rank(self) -> usize {
        Self::CHEAPEST_FIRST.iter().position(|&r| r == self).expect("listed")
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

/// What one training step processes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workload {
    /// Items encoded per step.
    pub batch: usize,
    pub text_tokens: usize,
    pub image_tokens: usize,
    /// Catalog size, for the cache footprint.
    pub items: usize,
}

impl Workload {
    pub fn new(batch: usize, items: usize) -> Self {
        Self {
            batch,
            text_tokens: TEXT_TOKENS_PER_ITEM,
            image_tokens: IMAGE_TOKENS_PER_ITEM,
            items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub regime: Regime,
    pub workload: Workload,
    pub fwd_backbone_flops: u64,
    pub fwd_peft_flops: u64,
    pub bwd_flops: u64,
    pub activation_bytes: u64,
    pub trainable_params: u64,
    pub cache_bytes: u64,
    /// Segments whose weights receive gradients.
    pub weight_grad_segments: BTreeSet<String>,
    /// Frozen segments the backward pass runs through.
    pub traversed_segments: BTreeSet<String>,
    model_key: String,
}

impl CostReport {
    /// `COST regime=<r> fwdB=<n> fwdP=<n> bwd=<n> act=<n> params=<n> cache=<n>`
    pub fn machine_line(&self) -> String {
        format!(
            "COST regime={} fwdB={} fwdP={} bwd={} act={} params={} cache={}",
            self.regime,
            self.fwd_backbone_flops,
            self.fwd_peft_flops,
            self.bwd_flops,
            self.activation_bytes,
            self.trainable_params,
            self.cache_bytes
        )
    }

    pub fn column(&self, c: Column) -> u64 {
        match c {
            Column::FwdBackbone => self.fwd_backbone_flops,
            Column::FwdPeft => self.fwd_peft_flops,
            Column::Bwd => self.bwd_flops,
            Column::Activations => self.activation_bytes,
            Column::Params => self.trainable_params,
            Column::Cache => self.cache_bytes,
        }
    }
}

/// Parameter-name prefix used to group parameters into costed segments.
/// The sequence encoder (`seq.`) is not costed.
pub fn segment_of(name: &str) -> Option<String> {
    if name.starts_with("seq.") {
        return None;
    }
    let mut it = name.splitn(3, '.');
    match (it.next(), it.next()) {
        (Some(a), Some(b)) => Some(format!("{a}.{b}")),
        _ => Some(name.to_string()),
    }
}

pub fn block_flops(tokens: usize, hidden: usize) -> u64 {
    let (s, h) = (tokens as u64, hidden as u64);
    8 * s * h * h + 4 * s * s * h
}

pub fn backbone_params(cfg: &EncoderConfig) -> u64 {
    let h = cfg.hidden_dim as u64;
    (cfg.vocab_size + cfg.max_positions) as u64 * h + cfg.layers as u64 * (12 * h * h + 12 * h)
}

fn sanb_params(h: u64, d: u64) -> u64 {
    2 * h * d + d + h
}

struct Seg {
    name: String,
    fwd: u64,
    act: u64,
    params: u64,
}

fn seg(name: impl Into<String>, fwd: u64, act: u64, params: u64) -> Seg {
    Seg {
        name: name.into(),
        fwd,
        act,
        params,
    }
}

/// Side-network segments (per item).
fn san_segments(san: &IisanConfig) -> Vec<Seg> {
    let m = san.m() as u64;
    let d = san.bottleneck as u64;
    let (ht, hi) = (san.text_hidden as u64, san.image_hidden as u64);
    let mut out = vec![
        seg("san.intra_text", m * 4 * ht * d, m * (2 * d + 2 * ht), m * sanb_params(ht, d) + m - 1),
        seg("san.intra_image", m * 4 * hi * d, m * (2 * d + 2 * hi), m * sanb_params(hi, d) + m - 1),
        seg("san.inter", m * 4 * hi * d, m * (2 * d + 2 * hi), m * sanb_params(hi, d) + m),
    ];
    if san.variant == Variant::Va {
        out.push(seg("san.dtl", (m + 1) * 2 * ht * hi, (m + 1) * ht, ht * hi + hi));
    }
    let fin = san.fusion_input() as u64;
    let ds = san.d_seq as u64;
    out.push(seg("san.fusion", 2 * fin * ds, fin, fin * ds + ds));
    out
}

fn check_configs(text: &EncoderConfig, image: &EncoderConfig, san: &IisanConfig) -> Result<()> {
    san.validate()?;
    if text.hidden_dim != san.text_hidden || image.hidden_dim != san.image_hidden {
        return Err(Error::Config(format!(
            "encoder widths {}/{} differ from side-network widths {}/{}",
            text.hidden_dim, image.hidden_dim, san.text_hidden, san.image_hidden
        )));
    }
    if text.layers != san.text_plan.source_layers || image.layers != san.image_plan.source_layers {
        return Err(Error::Config("layer-drop plans were made for different encoder depths".into()));
    }
    Ok(())
}

pub fn estimate(
    text: &EncoderConfig,
    image: &EncoderConfig,
    san: &IisanConfig,
    regime: Regime,
    workload: &Workload,
) -> Result<CostReport> {
    check_configs(text, image, san)?;
    let b = workload.batch as u64;
    let encoders = [
        (text, "text", workload.text_tokens as u64),
        (image, "image", workload.image_tokens as u64),
    ];
    let mut backbone = Vec::new();
    for (cfg, tag, s) in encoders {
        let (l, h) = (cfg.layers as u64, cfg.hidden_dim as u64);
        let act_per_token = match regime {
            Regime::Fft => 14 * h,
            Regime::EpeftAdapter => 6 * h,
            _ => 0,
        };
        backbone.push(seg(
            format!("backbone.{tag}"),
            l * block_flops(s as usize, h as usize),
            l * s * act_per_token,
            backbone_params(cfg),
        ));
    }
    let peft = match regime {
        Regime::EpeftAdapter => {
            let d = san.bottleneck as u64;
            let mut v: Vec<Seg> = encoders
                .iter()
                .map(|(cfg, tag, s)| {
                    let (l, h) = (cfg.layers as u64, cfg.hidden_dim as u64);
                    seg(format!("epeft.{tag}"), l * s * 4 * h * d, l * s * (2 * d + h), l * sanb_params(h, d))
                })
                .collect();
            let fin = (text.hidden_dim + image.hidden_dim) as u64;
            let ds = san.d_seq as u64;
            v.push(seg("epeft.fusion", 2 * fin * ds, fin, fin * ds + ds));
            v
        }
        _ => san_segments(san),
    };

    let sum = |segs: &[Seg], f: fn(&Seg) -> u64| segs.iter().map(f).sum::<u64>();
    let fwd_b = sum(&backbone, |s| s.fwd);
    let fwd_p = sum(&peft, |s| s.fwd);
    let peft_names: BTreeSet<String> = peft.iter().map(|s| s.name.clone()).collect();
    let backbone_names: BTreeSet<String> = backbone.iter().map(|s| s.name.clone()).collect();
    let (bwd, params, weight_grad_segments, traversed_segments) = match regime {
        Regime::Fft => (
            2 * (fwd_b + fwd_p),
            sum(&backbone, |s| s.params) + sum(&peft, |s| s.params),
            &backbone_names | &peft_names,
            BTreeSet::new(),
        ),
        Regime::EpeftAdapter => (fwd_b + 2 * fwd_p, sum(&peft, |s| s.params), peft_names, backbone_names),
        Regime::DpeftUncached | Regime::DpeftCached => (2 * fwd_p, sum(&peft, |s| s.params), peft_names, BTreeSet::new()),
    };
    let act_floats = sum(&backbone, |s| s.act) + sum(&peft, |s| s.act);
    let cache_bytes = match regime {
        Regime::DpeftCached => {
            let entries = san.m() + 1;
            cache_file_size(workload.items, entries, san.text_hidden)
                + cache_file_size(workload.items, entries, san.image_hidden)
        }
        _ => 0,
    };
    Ok(CostReport {
        regime,
        workload: *workload,
        fwd_backbone_flops: if regime == Regime::DpeftCached { 0 } else { b * fwd_b },
        fwd_peft_flops: b * fwd_p,
        bwd_flops: b * bwd,
        activation_bytes: 4 * b * act_floats,
        trainable_params: params,
        cache_bytes,
        weight_grad_segments,
        traversed_segments,
        model_key: format!("{text:?}|{image:?}|{san:?}"),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    FwdBackbone,
    FwdPeft,
    Bwd,
    Activations,
    Params,
    Cache,
}

impl Column {
    pub const ALL: [Column; 6] = [
        Column::FwdBackbone,
        Column::FwdPeft,
        Column::Bwd,
        Column::Activations,
        Column::Params,
        Column::Cache,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Column::FwdBackbone => "fwd_backbone_flops",
            Column::FwdPeft => "fwd_peft_flops",
            Column::Bwd => "bwd_flops",
            Column::Activations => "activation_bytes",
            Column::Params => "trainable_params",
            Column::Cache => "cache_bytes",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderCheck {
    pub column: Column,
    pub cheaper: Regime,
    pub dearer: Regime,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Comparison {
    pub reports: Vec<CostReport>,
    /// Per column, regimes from smallest to largest value.
    pub orderings: Vec<(Column, Vec<Regime>)>,
    pub checks: Vec<OrderCheck>,
}

impl Comparison {
    /// `None` when fewer than two regimes were compared.
    pub fn verdict(&self) -> Option<bool> {
        (!self.checks.is_empty()).then(|| self.checks.iter().all(|c| c.holds))
    }
}

/// Tabulates reports over one workload and checks the expected ordering
/// on activation bytes and backward FLOPs.
pub fn compare(reports: &[CostReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("compare needs at least one report".into()))?;
    if let Some(r) = reports
        .iter()
        .find(|r| r.workload != first.workload || r.model_key != first.model_key)
    {
        return Err(Error::Contract(format!(
            "report for {} was computed on a different workload or model than {}",
            r.regime, first.regime
        )));
    }
    let orderings = Column::ALL
        .iter()
        .map(|&c| {
            let mut v: Vec<&CostReport> = reports.iter().collect();
            v.sort_by_key(|r| (r.column(c), r.regime.rank()));
            (c, v.iter().map(|r| r.regime).collect())
        })
        .collect();
    let mut present: Vec<&CostReport> = reports.iter().collect();
    present.sort_by_key(|r| r.regime.rank());
    present.dedup_by_key(|r| r.regime);
    let mut checks = Vec::new();
    for column in [Column::Activations, Column::Bwd] {
        for w in present.windows(2) {
            checks.push(OrderCheck {
                column,
                cheaper: w[0].regime,
                dearer: w[1].regime,
                holds: w[0].column(column) <= w[1].column(column),
            });
        }
    }
    Ok(Comparison {
        reports: reports.to_vec(),
        orderings,
        checks,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<15} {:>14} {:>12} {:>14} {:>14} {:>12} {:>12}",
            "regime", "fwd_backbone", "fwd_peft", "bwd", "act_bytes", "params", "cache"
        )?;
        for r in &self.reports {
            writeln!(
                f,
                "{:<15} {:>14} {:>12} {:>14} {:>14} {:>12} {:>12}",
                r.regime.as_str(),
                r.fwd_backbone_flops,
                r.fwd_peft_flops,
                r.bwd_flops,
                r.activation_bytes,
                r.trainable_params,
                r.cache_bytes
            )?;
        }
        for (c, order) in &self.orderings {
            let names: Vec<&str> = order.iter().map(|r| r.as_str()).collect();
            writeln!(f, "ascending {:<18} {}", c.as_str(), names.join(" <= "))?;
        }
        for c in &self.checks {
            writeln!(
                f,
                "{} {} {} <= {}",
                if c.holds { "PASS" } else { "FAIL" },
                c.column.as_str(),
                c.cheaper,
                c.dearer
            )?;
        }
        match self.verdict() {
            Some(true) => write!(f, "ORDERING PASS"),
            Some(false) => write!(f, "ORDERING FAIL"),
            None => write!(f, "ORDERING n/a (single regime)"),
        }
    }
}

/// Parameters that received gradients in one executed training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeResult {
    pub regime: Regime,
    pub with_grad: BTreeSet<String>,
    /// Backbone intermediates kept for the backward pass.
    pub backbone_retained: usize,
    pub loss_bits: u64,
}

impl ProbeResult {
    pub fn backbone_activations_retained(&self) -> bool {
        self.backbone_retained > 0
    }

    pub fn backbone_params_with_grad(&self) -> impl Iterator<Item = &str> {
        self.with_grad
            .iter()
            .map(String::as_str)
            .filter(|n| n.starts_with("backbone."))
    }

    /// Costed segments among the parameters with gradients.
    pub fn segments(&self) -> BTreeSet<String> {
        self.with_grad.iter().filter_map(|n| segment_of(n)).collect()
    }
}

/// Runs one IISAN training step (nothing is updated) and reports which
/// parameters a gradient reached. The regime follows from `source`.
pub fn gradient_flow_probe(rec: &Recommender, source: &ItemSource, batch: &Batch) -> Result<ProbeResult> {
    let regime = match source {
        ItemSource::Cached { .. } => Regime::DpeftCached,
        ItemSource::Live { fine_tune: false, .. } => Regime::DpeftUncached,
        ItemSource::Live { fine_tune: true, .. } => Regime::Fft,
    };
    let out = train_step(rec, source, batch, None)?;
    Ok(ProbeResult {
        regime,
        with_grad: out.grads.reached().clone(),
        backbone_retained: out.backbone_retained,
        loss_bits: out.loss.to_bits(),
    })
}
