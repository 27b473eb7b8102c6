//! Command-line entry point. Subcommands mirror the pipeline stages;
//! `all` chains them. Exit code is nonzero on failure, with the failing
//! stage named in the error.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use harness::config::RunConfig;
use harness::pipeline;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "eqlab", about = "Task-conditioned event-sequence prediction lab")]
struct Cli {
    /// Run configuration file (plain-text key = value); defaults to the
    /// built-in acceptance configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for every artifact and report.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the built-in smoke configuration (minutes-scale).
    #[arg(long, global = true)]
    smoke: bool,

    /// Worker thread count override.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort, splits, and vocabulary.
    Gen,
    /// Train the query-conditioned encoder.
    TrainEq,
    /// Train the autoregressive baseline.
    TrainAr,
    /// Evaluate the task suite and write the reports.
    Eval,
    /// Extract query embeddings and the cosine-group report.
    Embed,
    /// Time single-task inference in both modes.
    Timing,
    /// Run every stage in order.
    All,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.smoke) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::smoke(11),
        (None, false) => RunConfig::acceptance(11),
    };
    if cli.smoke && cli.config.is_some() {
        anyhow::bail!("--smoke and --config are mutually exclusive");
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
        cfg.eval_seed = seed.wrapping_mul(1000).wrapping_add(77);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .context("building worker pool")?;
    let out = cli.out.clone();
    match cli.command {
        Command::Gen => pipeline::stage_gen(&cfg, &out).context("stage gen"),
        Command::TrainEq => pipeline::stage_train_eq(&cfg, &out).context("stage train-eq"),
        Command::TrainAr => pipeline::stage_train_ar(&cfg, &out).context("stage train-ar"),
        Command::Eval => pipeline::stage_eval(&cfg, &out).context("stage eval"),
        Command::Embed => pipeline::stage_embed(&cfg, &out).context("stage embed"),
        Command::Timing => pipeline::stage_timing(&cfg, &out).context("stage timing"),
        Command::All => pipeline::run_experiment(&cfg, &out),
    }
}
