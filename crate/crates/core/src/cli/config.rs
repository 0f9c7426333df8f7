use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::synthetic::SyntheticSpec;
use crate::backbone::{EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::recsys::{SeqConfig, TrainConfig};
use crate::sanet::{select_layers, DropMode, IisanConfig, Variant};

/// Everything a run needs. Parsed from `key = value` lines; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub text_layers: usize,
    pub text_hidden: usize,
    pub text_seed: u64,
    pub text_drop: DropMode,
    pub image_layers: usize,
    pub image_hidden: usize,
    pub image_seed: u64,
    pub image_drop: DropMode,
    pub bottleneck: usize,
    pub d_seq: usize,
    pub seq_heads: usize,
    pub seq_blocks: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// `cached` or `live`.
    pub train_source: String,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_strength: f64,
    pub out: PathBuf,
    pub data: PathBuf,
    pub cache_text: PathBuf,
    pub cache_image: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vs,
            text_layers: 12,
            text_hidden: 64,
            text_seed: 1001,
            text_drop: DropMode::SymmetricEven,
            image_layers: 12,
            image_hidden: 64,
            image_seed: 2002,
            image_drop: DropMode::SymmetricEven,
            bottleneck: 16,
            d_seq: 64,
            seq_heads: 2,
            seq_blocks: 2,
            max_seq_len: 10,
            dropout: 0.1,
            batch_size: 32,
            lr: 1e-4,
            epochs: 50,
            seed: 42,
            train_source: "cached".into(),
            synth_users: 200,
            synth_items: 50,
            synth_min_len: 5,
            synth_max_len: 15,
            synth_strength: 0.9,
            out: PathBuf::from("out"),
            data: PathBuf::from("data.tsv"),
            cache_text: PathBuf::from("cache_text.iisc"),
            cache_image: PathBuf::from("cache_image.iisc"),
            checkpoint: PathBuf::from("model.iism"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse()?,
            "text_layers" => self.text_layers = parse(key, v)?,
            "text_hidden" => self.text_hidden = parse(key, v)?,
            "text_seed" => self.text_seed = parse(key, v)?,
            "text_drop" => self.text_drop = v.parse()?,
            "image_layers" => self.image_layers = parse(key, v)?,
            "image_hidden" => self.image_hidden = parse(key, v)?,
            "image_seed" => self.image_seed = parse(key, v)?,
            "image_drop" => self.image_drop = v.parse()?,
            "bottleneck" => self.bottleneck = parse(key, v)?,
            "d_seq" => self.d_seq = parse(key, v)?,
            "seq_heads" => self.seq_heads = parse(key, v)?,
            "seq_blocks" => self.seq_blocks = parse(key, v)?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_source" => {
                if v != "cached" && v != "live" {
                    return Err(Error::Config(format!("train_source must be cached or live, got {v:?}")));
                }
                self.train_source = v.to_string();
            }
            "synth_users" => self.synth_users = parse(key, v)?,
            "synth_items" => self.synth_items = parse(key, v)?,
            "synth_min_len" => self.synth_min_len = parse(key, v)?,
            "synth_max_len" => self.synth_max_len = parse(key, v)?,
            "synth_strength" => self.synth_strength = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = PathBuf::from(v),
            "cache_text" => self.cache_text = PathBuf::from(v),
            "cache_image" => self.cache_image = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Canonical `key = value` text; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("variant", self.variant.to_string());
        kv("text_layers", self.text_layers.to_string());
        kv("text_hidden", self.text_hidden.to_string());
        kv("text_seed", self.text_seed.to_string());
        kv("text_drop", self.text_drop.to_string());
        kv("image_layers", self.image_layers.to_string());
        kv("image_hidden", self.image_hidden.to_string());
        kv("image_seed", self.image_seed.to_string());
        kv("image_drop", self.image_drop.to_string());
        kv("bottleneck", self.bottleneck.to_string());
        kv("d_seq", self.d_seq.to_string());
        kv("seq_heads", self.seq_heads.to_string());
        kv("seq_blocks", self.seq_blocks.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("train_source", self.train_source.clone());
        kv("synth_users", self.synth_users.to_string());
        kv("synth_items", self.synth_items.to_string());
        kv("synth_min_len", self.synth_min_len.to_string());
        kv("synth_max_len", self.synth_max_len.to_string());
        kv("synth_strength", format!("{:?}", self.synth_strength));
        kv("out", self.out.display().to_string());
        kv("data", self.data.display().to_string());
        kv("cache_text", self.cache_text.display().to_string());
        kv("cache_image", self.cache_image.display().to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        s
    }

    /// First 16 hex digits of SHA-256 over the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `p` resolved against the output directory unless absolute.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn text_encoder(&self) -> EncoderConfig {
        EncoderConfig::new(Modality::Text, self.text_layers, self.text_hidden, self.text_seed)
    }

    pub fn image_encoder(&self) -> EncoderConfig {
        EncoderConfig::new(Modality::Image, self.image_layers, self.image_hidden, self.image_seed)
    }

    pub fn san(&self) -> Result<IisanConfig> {
        let cfg = IisanConfig {
            variant: self.variant,
            text_hidden: self.text_hidden,
            image_hidden: self.image_hidden,
            text_plan: select_layers(self.text_drop, self.text_layers, self.image_layers)?,
            image_plan: select_layers(self.image_drop, self.image_layers, self.image_layers)?,
            bottleneck: self.bottleneck,
            d_seq: self.d_seq,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seq(&self) -> SeqConfig {
        SeqConfig {
            d: self.d_seq,
            heads: self.seq_heads,
            blocks: self.seq_blocks,
            max_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            users: self.synth_users,
            items: self.synth_items,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
            strength: self.synth_strength,
            seed: self.seed,
        }
    }

    /// Checks everything that can be checked without touching files.
    pub fn validate(&self) -> Result<()> {
        self.text_encoder().validate()?;
        self.image_encoder().validate()?;
        self.san()?;
        self.seq().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrips() {
        let mut c = RunConfig::default();
        c.set("variant", "va").unwrap();
        c.set("lr", "0.001").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn comments_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nepochs = 3   # short run\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(matches!(c.apply_text("epochs 3"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("epochs = x"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("text_drop = sideways"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_validate_and_va_preset() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.apply_text("variant = va\ntext_layers = 24\ntext_hidden = 96\ntext_drop = asym_eq5_grouped").unwrap();
        c.validate().unwrap();
        assert_eq!(c.san().unwrap().text_plan.kept, vec![9, 12, 15, 18, 21, 24]);
        // VS with unequal widths is rejected
        c.set("variant", "vs").unwrap();
        assert!(c.validate().is_err());
    }
}
