use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use phasecast::store::config::{load_config, RunConfig};
use phasecast_cli::pipeline::{run_all, run_stage, Stage};

#[derive(Parser)]
#[command(
    name = "phasecast",
    version,
    about = "Autoregressive visual-sequence modeling on a 4D breathing phantom"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default configuration as TOML.
    InitConfig,
    /// Run the full pipeline: data, tokenizer, pretrain, finetune, eval.
    Run(RunArgs),
    /// Generate phantom cases and archive held-out samples.
    Phantom(RunArgs),
    /// Train the image tokenizer.
    Tokenizer(RunArgs),
    /// Pretrain the sequence model on the shape corpus.
    Pretrain(RunArgs),
    /// Fine-tune the sequence model on phantom cases.
    Finetune(RunArgs),
    /// Evaluate and write metrics, heatmaps, and the run manifest.
    Eval(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker count. Runs are strictly sequential; only 1 is supported.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        if self.jobs != 1 {
            bail!("--jobs {} is not supported; runs are single-threaded (use --jobs 1)", self.jobs);
        }
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::InitConfig => {
            print!("{}", RunConfig::default().to_toml());
        }
        Cmd::Run(args) => {
            let cfg = args.resolve()?;
            run_all(&cfg)?;
        }
        Cmd::Phantom(args) => run_stage(&args.resolve()?, Stage::Phantom)?,
        Cmd::Tokenizer(args) => run_stage(&args.resolve()?, Stage::Tokenizer)?,
        Cmd::Pretrain(args) => run_stage(&args.resolve()?, Stage::Pretrain)?,
        Cmd::Finetune(args) => run_stage(&args.resolve()?, Stage::Finetune)?,
        Cmd::Eval(args) => run_stage(&args.resolve()?, Stage::Eval)?,
    }
    Ok(())
}
