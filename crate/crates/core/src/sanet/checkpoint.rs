//! Binary checkpoints:
//!
//! ```text
//! "IISM" | version u16 | variant u8
//! | 2 × plan (mode u8 | source_layers u16 | group_size u16 (0 = none) | m u16 | m × u16)
//! | trainable parameters in declaration order, f32 little-endian
//! ```
//!
//! Shapes are not stored; the reader rebuilds the model from its config
//! and checks the plans and the exact payload length.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{DropMode, LayerDropPlan, Variant};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IISM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::Vs => 0,
        Variant::Va => 1,
    }
}

fn write_plan(buf: &mut Vec<u8>, plan: &LayerDropPlan) {
    buf.push(plan.mode.tag());
    buf.write_u16::<LittleEndian>(plan.source_layers as u16).expect("vec write");
    buf.write_u16::<LittleEndian>(plan.group_size.unwrap_or(0) as u16).expect("vec write");
    buf.write_u16::<LittleEndian>(plan.kept.len() as u16).expect("vec write");
    for &k in &plan.kept {
        buf.write_u16::<LittleEndian>(k).expect("vec write");
    }
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.bytes.len() as u64, format!("truncated checkpoint: need {n} more bytes at {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }
}

fn read_plan(c: &mut Cursor<'_>) -> Result<LayerDropPlan> {
    let at = c.pos as u64;
    let mode = DropMode::from_tag(c.u8()?).ok_or_else(|| Error::format(at, "unknown layer-drop mode"))?;
    let source_layers = c.u16()? as usize;
    let k = c.u16()? as usize;
    let m = c.u16()? as usize;
    let kept = (0..m).map(|_| c.u16()).collect::<Result<Vec<_>>>()?;
    Ok(LayerDropPlan {
        mode,
        source_layers,
        kept,
        group_size: (k > 0).then_some(k),
    })
}

pub fn write_checkpoint(
    path: &Path,
    variant: Variant,
    text_plan: &LayerDropPlan,
    image_plan: &LayerDropPlan,
    store: &ParamStore<f32>,
) -> Result<u64> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u16::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
    buf.push(variant_tag(variant));
    write_plan(&mut buf, text_plan);
    write_plan(&mut buf, image_plan);
    for p in store.iter().filter(|p| p.trainable) {
        for &v in p.tensor.data() {
            buf.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    fs::write(path, &buf).map_err(|e| Error::path(path, e))?;
    Ok(buf.len() as u64)
}

/// Loads parameters into `store`, which must have been built from the same
/// configuration that produced the checkpoint.
pub fn read_checkpoint(
    path: &Path,
    variant: Variant,
    text_plan: &LayerDropPlan,
    image_plan: &LayerDropPlan,
    store: &mut ParamStore<f32>,
) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("checkpoint {} (run `train` first)", path.display())))
        }
        Err(e) => return Err(Error::path(path, e)),
    };
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let tag = c.u8()?;
    if tag != variant_tag(variant) {
        return Err(Error::Staleness(format!("checkpoint variant tag {tag} does not match {variant}")));
    }
    let tp = read_plan(&mut c)?;
    let ip = read_plan(&mut c)?;
    if &tp != text_plan || &ip != image_plan {
        return Err(Error::Staleness(format!(
            "checkpoint plans {tp} / {ip} differ from configured {text_plan} / {image_plan}"
        )));
    }
    let floats: usize = store.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum();
    let remaining = bytes.len() - c.pos;
    if remaining != floats * 4 {
        return Err(Error::format(
            c.pos as u64,
            format!("payload holds {remaining} bytes, model needs {}", floats * 4),
        ));
    }
    for p in store.iter_mut().filter(|p| p.trainable) {
        let n = p.tensor.numel();
        LittleEndian::read_f32_into(c.take(4 * n)?, p.tensor.data_mut());
    }
    Ok(())
}
