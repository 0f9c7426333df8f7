use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iisan::cli::{exit_code, run, Command, RunConfig};
use iisan::error::Error;

/// Decoupled side-adapter training for multimodal sequential recommendation.
#[derive(Parser, Debug)]
#[command(name = "iisan", version)]
struct Args {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for data, caches, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Generate a synthetic interaction file.
    Gen,
    /// Precompute pruned hidden-state caches for every catalog item.
    Cache,
    /// Train the side network and sequence encoder.
    Train,
    /// Evaluate a checkpoint on the test split against the popularity baseline.
    Eval,
    /// Compare analytic training cost across regimes.
    Profile,
}

fn config(args: &Args) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cmd = match args.cmd {
        Cmd::Gen => Command::Gen,
        Cmd::Cache => Command::Cache,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Profile => Command::Profile,
    };
    let result = config(&args).and_then(|cfg| run(cmd, &cfg, &mut io::stdout().lock()));
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
