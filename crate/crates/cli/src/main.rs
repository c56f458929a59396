//! `dm2rm`: dataset generation, feature caching, training, evaluation,
//! ranking and serving. Every command prints JSON; `--pretty` switches the
//! ranking output to a table.
//!
//! Exit codes: 0 on success, 1 for invalid input or usage, 2 for failures
//! while running.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "dm2rm",
    version,
    about = "Dual-mode image ranking for fetch-and-carry instructions"
)]
struct Cli {
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Language-pipeline options shared by commands that process instructions.
#[derive(Debug, Clone, Args)]
struct LangArgs {
    /// JSON file with LLM client settings; without it the rule-based
    /// paraphraser and phrase identifier are used.
    #[arg(long, value_name = "FILE")]
    llm: Option<PathBuf>,
    /// Directory holding `paraphrase.txt` and `phrases.txt` prompt templates.
    #[arg(long, value_name = "DIR")]
    prompts: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a seeded synthetic dataset.
    GenSynthetic {
        /// Number of environments.
        #[arg(long, default_value_t = 24)]
        envs: usize,
        /// Images per environment.
        #[arg(long, default_value_t = 8)]
        images: usize,
        /// Instructions per environment.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Fraction of images no instruction refers to.
        #[arg(long, default_value_t = 0.25)]
        distractor_rate: f64,
        /// Image side in pixels; a multiple of 8.
        #[arg(long, default_value_t = 32)]
        side: u32,
        /// Environment shares of train,val,test_hm3d,test_mp3d.
        #[arg(long, default_value = "0.7,0.1,0.1,0.1", value_name = "RATIOS")]
        split: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Precomputes provider embeddings into a cache file.
    Embed {
        /// Provider tag: `synthetic-text` or `synthetic-image`.
        #[arg(long)]
        provider: String,
        /// Dataset directory, or a manifest file inside it.
        #[arg(long)]
        manifest: PathBuf,
        /// Cache file; extended when it exists.
        #[arg(long)]
        out: PathBuf,
        /// Model configuration supplying dimensions and provider seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        lang: LangArgs,
    },
    /// Trains on the train split, selecting the best epoch on val.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON model configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `best`, `last` and `train_log.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configuration's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        lang: LangArgs,
    },
    /// Evaluates a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test_hm3d", "test_mp3d"])]
        split: String,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Recall cut-offs.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20", value_parser = clap::value_parser!(u64).range(1..))]
        ks: Vec<u64>,
        #[command(flatten)]
        lang: LangArgs,
    },
    /// Ranks an environment's images for one instruction in both modes.
    Rank {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Environment id.
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        topk: u64,
        /// JSON output (the default).
        #[arg(long, conflicts_with = "pretty")]
        json: bool,
        /// Human-readable table.
        #[arg(long)]
        pretty: bool,
        #[command(flatten)]
        lang: LangArgs,
    },
    /// Writes h_txt for every instruction in both modes as JSON lines.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict to one split.
        #[arg(long, value_parser = ["train", "val", "test_hm3d", "test_mp3d"])]
        split: Option<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        lang: LangArgs,
    },
    /// Runs the HTTP ranking service.
    Serve {
        /// Checkpoint to load; without it /rank answers 503.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        topk: u64,
        /// Directory of the session and selection logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Allowed browser origin; repeatable. Any origin when omitted.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        #[command(flatten)]
        lang: LangArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
