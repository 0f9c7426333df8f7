use std::fs;
use std::io::Write;
use std::path::PathBuf;

use super::config::RunConfig;
use super::synthetic::generate_synthetic;
use crate::backbone::build_encoder;
use crate::cache::{build_cache, cache_file_size};
use crate::costmodel::{compare, estimate, Regime, Workload};
use crate::error::{Error, Result};
use crate::recsys::{
    compute_popularity, evaluate, popularity_baseline, split_leave_one_out, train_with, EvalTarget,
    InteractionDataset, ItemSource, Recommender,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Cache,
    Train,
    Eval,
    Profile,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Cache => "cache",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Profile => "profile",
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_STALE: i32 = 4;
pub const EXIT_VERDICT: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Staleness(_) => EXIT_STALE,
        Error::Input(_)
        | Error::NotFound(_)
        | Error::Path { .. }
        | Error::Format { .. }
        | Error::Version { .. }
        | Error::Domain(_) => EXIT_INPUT,
        Error::Dimension { .. } | Error::Contract(_) | Error::Io(_) => 1,
    }
}

/// Report text goes to `out` and to `<out dir>/<command>.report`.
struct Reporter<'w> {
    sink: &'w mut dyn Write,
    text: String,
}

impl Reporter<'_> {
    fn line(&mut self, s: impl AsRef<str>) -> Result<()> {
        let s = s.as_ref();
        writeln!(self.sink, "{s}")?;
        self.text.push_str(s);
        self.text.push('\n');
        Ok(())
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::path(&cfg.out, e))
}

fn load_data(cfg: &RunConfig) -> Result<(PathBuf, InteractionDataset)> {
    let path = cfg.resolve(&cfg.data);
    if !path.exists() {
        return Err(Error::NotFound(format!(
            "interaction file {} (run `gen` first or set `data = PATH`)",
            path.display()
        )));
    }
    let data = InteractionDataset::read(&path)?;
    Ok((path, data))
}

fn item_source(cfg: &RunConfig) -> Result<ItemSource> {
    let san = cfg.san()?;
    if cfg.train_source == "live" {
        return Ok(ItemSource::live(
            build_encoder(cfg.text_encoder())?,
            build_encoder(cfg.image_encoder())?,
            false,
        ));
    }
    ItemSource::cached(
        &cfg.resolve(&cfg.cache_text),
        &cfg.resolve(&cfg.cache_image),
        cfg.text_encoder().fingerprint(),
        cfg.image_encoder().fingerprint(),
        &san,
    )
}

/// Runs `cmd`. Returns the exit status for a completed run (0, or 5 for a
/// failed verdict); errors map through [`exit_code`].
pub fn run(cmd: Command, cfg: &RunConfig, sink: &mut dyn Write) -> Result<i32> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let mut r = Reporter {
        sink,
        text: String::new(),
    };
    r.line(format!("CONFIG hash={} seed={} command={}", cfg.hash(), cfg.seed, cmd.as_str()))?;
    for l in cfg.to_text().lines() {
        r.line(format!("# {l}"))?;
    }
    let status = match cmd {
        Command::Gen => gen(cfg, &mut r)?,
        Command::Cache => cache(cfg, &mut r)?,
        Command::Train => train_cmd(cfg, &mut r)?,
        Command::Eval => eval(cfg, &mut r)?,
        Command::Profile => profile(cfg, &mut r)?,
    };
    let report = cfg.out.join(format!("{}.report", cmd.as_str()));
    fs::write(&report, &r.text).map_err(|e| Error::path(&report, e))?;
    Ok(status)
}

fn gen(cfg: &RunConfig, r: &mut Reporter<'_>) -> Result<i32> {
    let spec = cfg.synthetic();
    let data = generate_synthetic(&spec)?;
    let path = cfg.resolve(&cfg.data);
    data.write(&path)?;
    r.line(format!(
        "GEN users={} items={} interactions={} strength={} path={}",
        data.users.len(),
        data.catalog().len(),
        data.interaction_count(),
        spec.strength,
        path.display()
    ))?;
    Ok(EXIT_OK)
}

fn cache(cfg: &RunConfig, r: &mut Reporter<'_>) -> Result<i32> {
    let (_, data) = load_data(cfg)?;
    let san = cfg.san()?;
    let items: Vec<u64> = data.catalog().into_iter().collect();
    let jobs = [
        (cfg.text_encoder(), san.text_plan.cache_layers(), &cfg.cache_text),
        (cfg.image_encoder(), san.image_plan.cache_layers(), &cfg.cache_image),
    ];
    for (enc_cfg, layers, path) in jobs {
        let hidden = enc_cfg.hidden_dim;
        let modality = enc_cfg.modality;
        let enc = build_encoder(enc_cfg)?;
        let summary = build_cache(&enc, &items, &layers, &cfg.resolve(path))?;
        let expected = cache_file_size(items.len(), layers.len(), hidden);
        r.line(format!(
            "CACHE modality={} items={} layers={:?} bytes={} formula={} fingerprint={:016x} path={}",
            modality,
            summary.item_count,
            summary.kept_layers,
            summary.bytes,
            expected,
            summary.encoder_fingerprint,
            summary.path.display()
        ))?;
        let full = cache_file_size(items.len(), enc.config().layers + 1, hidden);
        r.line(format!(
            "  kept {} of {} layer outputs; an unpruned cache would take {} bytes",
            layers.len(),
            enc.config().layers + 1,
            full
        ))?;
    }
    Ok(EXIT_OK)
}

fn train_cmd(cfg: &RunConfig, r: &mut Reporter<'_>) -> Result<i32> {
    let (_, data) = load_data(cfg)?;
    let split = split_leave_one_out(&data)?;
    let catalog = data.catalog();
    let pop = compute_popularity(&split, &catalog);
    let mut source = item_source(cfg)?;
    let mut rec = Recommender::new(cfg.san()?, cfg.seq(), cfg.seed)?;
    r.line(format!(
        "TRAIN users={} dropped={} items={} trainable_params={} source={}",
        split.users.len(),
        split.dropped,
        catalog.len(),
        rec.trainable_params(),
        cfg.train_source
    ))?;
    let mut lines = Vec::new();
    let report = train_with(&mut rec, &mut source, &split, &pop, &cfg.train(), |e, l| {
        lines.push(format!("epoch {e:>3} loss {l:.6}"))
    })?;
    for l in lines {
        r.line(l)?;
    }
    let ckpt = cfg.resolve(&cfg.checkpoint);
    let bytes = rec.save(&ckpt)?;
    let curve = cfg.out.join("loss.tsv");
    let body = format!("# config_hash={}\n{}", cfg.hash(), report.to_tsv());
    fs::write(&curve, body).map_err(|e| Error::path(&curve, e))?;
    let val = evaluate(&rec, &source, &split, &catalog, EvalTarget::Validation)?;
    r.line(format!(
        "VALIDATION hr10={:.6} ndcg10={:.6} users={}",
        val.hr_at_10, val.ndcg_at_10, val.users
    ))?;
    r.line(format!(
        "CHECKPOINT path={} bytes={} steps={} loss_curve={}",
        ckpt.display(),
        bytes,
        report.steps,
        curve.display()
    ))?;
    Ok(EXIT_OK)
}

fn eval(cfg: &RunConfig, r: &mut Reporter<'_>) -> Result<i32> {
    let (_, data) = load_data(cfg)?;
    let split = split_leave_one_out(&data)?;
    let catalog = data.catalog();
    let pop = compute_popularity(&split, &catalog);
    let mut rec = Recommender::new(cfg.san()?, cfg.seq(), cfg.seed)?;
    let ckpt = cfg.resolve(&cfg.checkpoint);
    if !ckpt.exists() {
        return Err(Error::NotFound(format!("checkpoint {} (run `train` first)", ckpt.display())));
    }
    rec.load(&ckpt)?;
    let source = item_source(cfg)?;
    let base = popularity_baseline(&split, &catalog, &pop)?;
    let m = evaluate(&rec, &source, &split, &catalog, EvalTarget::Test)?;
    r.line(format!(
        "popularity baseline  HR@10 {:.4}  NDCG@10 {:.4}",
        base.hr_at_10, base.ndcg_at_10
    ))?;
    r.line(format!("IISAN-{}             HR@10 {:.4}  NDCG@10 {:.4}", cfg.variant, m.hr_at_10, m.ndcg_at_10))?;
    r.line(format!(
        "BASELINE hr10={:.6} ndcg10={:.6} users={}",
        base.hr_at_10, base.ndcg_at_10, base.users
    ))?;
    r.line(m.machine_line())?;
    Ok(EXIT_OK)
}

fn profile(cfg: &RunConfig, r: &mut Reporter<'_>) -> Result<i32> {
    let items = match load_data(cfg) {
        Ok((_, d)) => d.catalog().len(),
        Err(_) => cfg.synth_items,
    };
    let (text, image, san) = (cfg.text_encoder(), cfg.image_encoder(), cfg.san()?);
    let w = Workload::new(cfg.batch_size, items);
    let reports = Regime::ALL
        .iter()
        .map(|&reg| estimate(&text, &image, &san, reg, &w))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare(&reports)?;
    r.line(format!(
        "PROFILE batch={} text_tokens={} image_tokens={} items={}",
        w.batch, w.text_tokens, w.image_tokens, w.items
    ))?;
    for l in cmp.to_string().lines() {
        r.line(l)?;
    }
    for rep in &reports {
        r.line(rep.machine_line())?;
    }
    Ok(match cmp.verdict() {
        Some(false) => EXIT_VERDICT,
        _ => EXIT_OK,
    })
}
