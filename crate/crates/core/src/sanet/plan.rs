use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropMode {
    /// Every second block: `{2, 4, …, L}`.
    SymmetricEven,
    /// `m = L_image / 2` blocks spread evenly over the whole source encoder.
    AsymEvenAll,
    /// `m = L_image / 2` blocks spaced by the largest group size `k` with
    /// `L_src − k·m ≥ 1`, anchored at the top layer.
    AsymEq5Grouped,
}

impl DropMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DropMode::SymmetricEven => "symmetric_even",
            DropMode::AsymEvenAll => "asym_even_all",
            DropMode::AsymEq5Grouped => "asym_eq5_grouped",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            DropMode::SymmetricEven => 0,
            DropMode::AsymEvenAll => 1,
            DropMode::AsymEq5Grouped => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DropMode::SymmetricEven),
            1 => Some(DropMode::AsymEvenAll),
            2 => Some(DropMode::AsymEq5Grouped),
            _ => None,
        }
    }
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric_even" => Ok(DropMode::SymmetricEven),
            "asym_even_all" => Ok(DropMode::AsymEvenAll),
            "asym_eq5_grouped" => Ok(DropMode::AsymEq5Grouped),
            other => Err(Error::Config(format!("unknown layer-drop mode {other:?}"))),
        }
    }
}

/// Which backbone blocks feed a tower (1-based; the embedding output is
/// always fed in addition and is not listed).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDropPlan {
    pub mode: DropMode,
    pub source_layers: usize,
    pub kept: Vec<u16>,
    pub group_size: Option<usize>,
}

/// Whether `k` satisfies the group-size inequality `L_src − k·m ≥ 1`.
pub fn group_size_feasible(source_layers: usize, k: usize, m: usize) -> bool {
    source_layers as i64 - (k * m) as i64 >= 1
}

impl LayerDropPlan {
    pub fn m(&self) -> usize {
        self.kept.len()
    }

    /// Layers to cache: the embedding output followed by the kept blocks.
    pub fn cache_layers(&self) -> Vec<u16> {
        std::iter::once(0).chain(self.kept.iter().copied()).collect()
    }

    /// A plan that keeps every block.
    pub fn all_layers(source_layers: usize) -> Self {
        Self {
            mode: DropMode::SymmetricEven,
            source_layers,
            kept: (1..=source_layers as u16).collect(),
            group_size: None,
        }
    }
}

impl fmt::Display for LayerDropPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(L={}", self.mode, self.source_layers)?;
        if let Some(k) = self.group_size {
            write!(f, ",k={k}")?;
        }
        write!(f, ") {:?}", self.kept)
    }
}

pub fn select_layers(mode: DropMode, source_layers: usize, image_layers: usize) -> Result<LayerDropPlan> {
    if source_layers < 2 {
        return Err(Error::Config(format!("layer drop needs at least 2 source layers, got {source_layers}")));
    }
    let (kept, group_size) = match mode {
        DropMode::SymmetricEven => {
            let m = source_layers / 2;
            ((1..=m).map(|j| (2 * j) as u16).collect::<Vec<_>>(), None)
        }
        DropMode::AsymEvenAll => {
            let m = asym_blocks(source_layers, image_layers)?;
            let mut kept: Vec<u16> = Vec::with_capacity(m);
            for j in 1..=m {
                let mut idx = ((j * source_layers) as f64 / m as f64).round() as u16;
                if let Some(&last) = kept.last() {
                    idx = idx.max(last + 1);
                }
                kept.push(idx);
            }
            if kept.last().is_some_and(|&l| l as usize > source_layers) {
                return Err(Error::Config(format!("cannot spread {m} blocks over {source_layers} layers")));
            }
            (kept, None)
        }
        DropMode::AsymEq5Grouped => {
            let m = asym_blocks(source_layers, image_layers)?;
            let k = (source_layers - 1) / m;
            if k == 0 || !group_size_feasible(source_layers, k, m) {
                return Err(Error::Config(format!(
                    "no group size k >= 1 satisfies {source_layers} - k*{m} >= 1"
                )));
            }
            let kept = (1..=m).map(|j| (source_layers - (m - j) * k) as u16).collect();
            (kept, Some(k))
        }
    };
    Ok(LayerDropPlan {
        mode,
        source_layers,
        kept,
        group_size,
    })
}

fn asym_blocks(source_layers: usize, image_layers: usize) -> Result<usize> {
    let m = image_layers / 2;
    if m == 0 {
        return Err(Error::Config(format!("image encoder with {image_layers} layers leaves no blocks")));
    }
    if source_layers < m {
        return Err(Error::Config(format!(
            "source encoder has {source_layers} layers, fewer than the {m} blocks required"
        )));
    }
    Ok(m)
}
