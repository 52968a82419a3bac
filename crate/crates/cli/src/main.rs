use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use conceptformer::pipeline::{self, RunConfig, RunDirs};
use conceptformer::prompting::PromptMode;

#[derive(Parser)]
#[command(name = "conceptformer", version, about = "Concept-vector injection experiments on a toy closed world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy world, its sentences, star graphs and splits.
    GenWorld,
    /// Build the tokenizer and pretrain the frozen LM on train subjects.
    PretrainLm,
    /// Train a ConceptFormer (both stages unless --stage is given).
    TrainCf {
        #[arg(long)]
        n_vectors: Option<usize>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
    },
    /// Score the evaluation split in one prompt mode.
    Eval {
        #[arg(long, value_parser = parse_mode)]
        mode: PromptMode,
        #[arg(long)]
        n_vectors: Option<usize>,
        /// Checkpoint stage for cf mode.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        /// Read concept vectors from a precomputed table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Precompute concept vectors for every entity.
    BuildTable {
        #[arg(long)]
        n_vectors: Option<usize>,
    },
    /// Merge evaluation reports into a comparison table.
    Report,
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    PromptMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected baseline, rag or cf"))
}

fn run(cli: Cli) -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.common.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    log::info!("seed {}, config sha256 {}", cfg.seed, cfg.sha256());
    let dirs = RunDirs::new(&cli.common.out);
    match cli.command {
        Command::GenWorld => {
            let s = pipeline::gen_world(&cfg, &dirs, &args)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::PretrainLm => {
            let r = pipeline::pretrain_lm(&cfg, &dirs, &args)?;
            println!(
                "pretrained on {} sequences: perplexity {:.2} -> {:.2}, fingerprint {}",
                r.sequences, r.initial_perplexity, r.final_perplexity, r.fingerprint
            );
        }
        Command::TrainCf { n_vectors, stage } => {
            let n = n_vectors.unwrap_or(cfg.cf.n_vectors);
            for r in pipeline::train_cf(&cfg, &dirs, n, stage, &args)? {
                println!(
                    "stage {} n={}: validation loss {:.4} -> {:.4} (best epoch {}, {:?}), checkpoint {}",
                    r.stage, r.n, r.initial_validation_loss, r.best_validation_loss, r.best_epoch, r.stop_reason, r.cf_fingerprint
                );
            }
        }
        Command::Eval {
            mode,
            n_vectors,
            stage,
            table,
        } => {
            if mode != PromptMode::Cf && (table.is_some() || n_vectors.is_some()) {
                bail!("--table and --n-vectors apply to cf mode only");
            }
            if let Some(s) = stage {
                cfg.eval.checkpoint_stage = s;
            }
            let r = pipeline::eval(&cfg, &dirs, mode, n_vectors, table.as_deref(), &args)?;
            print!("{}", r.text_table());
        }
        Command::BuildTable { n_vectors } => {
            let n = n_vectors.unwrap_or(cfg.cf.n_vectors);
            let s = pipeline::build_table(&cfg, &dirs, n, &args)?;
            println!(
                "{} entries, {} excluded, sha256 {}",
                s.entries,
                s.excluded.len(),
                s.file_sha256
            );
        }
        Command::Report => {
            let c = pipeline::report(&cfg, &dirs, &args)?;
            print!("{}", c.text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
