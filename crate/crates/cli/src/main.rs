//! `ecf`: end-to-end command line for the taste-cluster recommender.
//! Prepares datasets, trains models, and reports accuracy and
//! explanation quality.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ModelKind;
use config::RunConfig;
use ecf_core::Result;

#[derive(Parser)]
#[command(name = "ecf", version, about = "Explainable taste-cluster recommender")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "ecf.conf")]
    config: PathBuf,
    /// Overrides the seed that drives all randomness in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the embedding width (64 by default; 180 reproduces the
    /// wide parity setting).
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filters, splits, and indexes the raw interaction and tag files.
    Prepare,
    /// Trains a model and writes it under the output directory.
    Train {
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
    },
    /// Scores the test split with Recall and NDCG.
    Evaluate {
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
        /// Ranking cutoff; without it the standard cutoffs 5, 10, 20
        /// are all reported.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Explains why an item is recommended to a user.
    Explain {
        user: String,
        item: String,
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
        /// Emits the explanation as JSON instead of prose.
        #[arg(long)]
        json: bool,
    },
    /// Ranks unseen items for a user.
    Recommend {
        user: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
    },
    /// Dumps the learned taste clusters with their tags and members.
    Clusters {
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
    },
    /// Compares cluster quality against reference cluster builders.
    Explainability {
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
    },
    /// Suggests tags for an item from the clusters it belongs to.
    DiscoverTags {
        item: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, value_enum, default_value = "single")]
        kind: ModelKind,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(dim) = cli.dim {
        cfg.train.hp.embed_dim = dim;
    }
    match cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Train { kind } => commands::train(&cfg, kind),
        Command::Evaluate { kind, k } => commands::evaluate(&cfg, kind, k),
        Command::Explain {
            user,
            item,
            kind,
            json,
        } => commands::explain(&cfg, kind, &user, &item, json),
        Command::Recommend { user, k, kind } => commands::recommend(&cfg, kind, &user, k),
        Command::Clusters { kind } => commands::clusters(&cfg, kind),
        Command::Explainability { kind } => commands::explainability(&cfg, kind),
        Command::DiscoverTags { item, top, kind } => {
            commands::discover_tags(&cfg, kind, &item, top)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
