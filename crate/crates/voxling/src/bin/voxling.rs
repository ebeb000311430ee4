//! Command-line front end for the training pipeline. Each subcommand maps to
//! one pipeline stage and reads or writes artifacts under the output
//! directory. Settings resolve in precedence order: command-line flag, then
//! `VOXLING_OUT` (output directory only), then the config file, then the
//! built-in default. The resolved config is echoed into the output directory
//! so a run can always be reproduced from its artifacts alone.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxling::config::RunConfig;
use voxling::error::Result;
use voxling::pipeline;

#[derive(Parser)]
#[command(
    name = "voxling",
    version,
    about = "Two-stage training pipeline for a toy volumetric vision-language model",
    after_help = "Typical sequence: gen, analyze, sft, rl, eval. Every command is \
                  deterministic for a fixed seed with --threads 1."
)]
struct Cli {
    /// Config file with `key = value` lines under [section] headers.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base seed for all randomness; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides VOXLING_OUT and the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads. Execution is currently serial regardless of the
    /// value; 1 is the bit-deterministic setting and anything above it is
    /// accepted for forward compatibility.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, question items, vocabulary, and embeddings.
    Gen,
    /// Summarize corpus composition and sentence position densities.
    Analyze,
    /// Warm up the decoder, then train the bridge with re-weighted cross entropy.
    Sft,
    /// Refine the supervised checkpoint with group-relative policy optimization.
    Rl,
    /// Score a trained checkpoint on held-out questions.
    Eval,
    /// Check analytic gradients against central finite differences.
    Gradcheck,
}

/// Builds the effective config: file values first, then environment, then
/// flags, each layer overriding the one below it.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                voxling::error::VoxError::MissingFile(format!("{} ({e})", path.display()))
            })?;
            RunConfig::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var("VOXLING_OUT") {
        if !dir.is_empty() {
            config.out = dir;
        }
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.display().to_string();
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<bool> {
    let config = resolve_config(cli)?;
    match cli.command {
        Command::Gen => {
            let s = pipeline::cmd_gen(&config)?;
            println!(
                "gen: {} volumes, {} question items ({} skipped), vocab {} -> {}",
                s.n_volumes, s.n_items, s.n_skipped, s.vocab_size, config.out
            );
        }
        Command::Analyze => {
            let s = pipeline::cmd_analyze(&config)?;
            print!("{}", s.table);
            println!(
                "analyze: normal sentences lead abnormal ones: {}",
                if s.normal_leads { "yes" } else { "no" }
            );
        }
        Command::Sft => {
            let s = pipeline::cmd_sft(&config)?;
            println!(
                "sft: warmup loss {:.4}, final loss {:.4} over {} train volumes -> {}",
                s.warmup_final_loss, s.sft_final_loss, s.n_train_volumes, config.out
            );
        }
        Command::Rl => {
            let s = pipeline::cmd_rl(&config)?;
            println!(
                "rl: mean reward {:.4}, probe accuracy {:.4} over {} train items -> {}",
                s.final_mean_reward, s.final_probe_accuracy, s.n_train_items, config.out
            );
        }
        Command::Eval => {
            let s = pipeline::cmd_eval(&config)?;
            let fmt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            };
            println!(
                "eval: {} items from {}: think accuracy {}, no-think accuracy {}",
                s.n_items,
                s.checkpoint,
                fmt(s.think_accuracy),
                fmt(s.no_think_accuracy)
            );
        }
        Command::Gradcheck => {
            let s = pipeline::cmd_gradcheck(&config)?;
            print!("{}", s.table);
            if !s.all_pass {
                eprintln!("voxling: gradcheck failed, see table above");
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("voxling: error: {e}");
            ExitCode::FAILURE
        }
    }
}
