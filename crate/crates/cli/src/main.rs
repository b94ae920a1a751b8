//! `placerec`: generate synthetic data, train, index, evaluate and sweep.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration (including
//! missing upstream artifacts), 2 for failures while running.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "placerec",
    version,
    about = "LiDAR place recognition as grid-cell classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON). Without it a stage reuses the configuration
    /// resolved by the previous stage in `--out`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the stage's random streams: synthesis for `gen`, initialization
    /// and sampling for `train` and `sweep`, graph levels for `eval --approximate`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model and training overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Mini-batch size [default: 64].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Embedding size D [default: 512].
    #[arg(long)]
    pub emb_size: Option<usize>,
    /// Point decimation factor k [default: 20].
    #[arg(long)]
    pub decimation: Option<u32>,
    /// L2-normalize embeddings; `--normalize false` turns it off [default: true].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
}

/// Evaluation overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct EvalOpts {
    /// Match radius in meters [default: 18.0].
    #[arg(long)]
    pub radius: Option<f64>,
    /// Extra K values, comma separated; 1 and the top-1% K are always included.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Average recall over queries instead of maps.
    #[arg(long)]
    pub query_weighted: bool,
    /// Use the approximate graph index instead of an exact scan.
    #[arg(long)]
    pub approximate: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and split a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the dataset in `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOpts,
        /// Train without this map and evaluate on it alone.
        #[arg(long)]
        holdout_map: Option<u32>,
    },
    /// Embed the database and write the index and label map.
    Index {
        #[command(flatten)]
        common: Common,
        /// Distance metric: euclidean or cosine.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Score validation queries against the index.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalOpts,
        /// Report path [default: <out>/report.json].
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate every combination of embedding size, decimation
    /// and normalization.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        eval: EvalOpts,
        #[arg(long, value_delimiter = ',', default_value = "16,512")]
        emb_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "20")]
        decimations: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "false,true")]
        norms: Vec<bool>,
        #[arg(long)]
        holdout_map: Option<u32>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen { common } => commands::gen(&common),
        Command::Train {
            common,
            train,
            holdout_map,
        } => commands::train(&common, &train, holdout_map),
        Command::Index { common, metric } => commands::index(&common, metric.as_deref()),
        Command::Eval {
            common,
            eval,
            report,
        } => commands::eval(&common, &eval, report),
        Command::Sweep {
            common,
            epochs,
            batch,
            eval,
            emb_sizes,
            decimations,
            norms,
            holdout_map,
        } => commands::sweep(
            &common,
            &TrainOpts {
                epochs,
                batch,
                ..TrainOpts::default()
            },
            &eval,
            &commands::Grid {
                emb_sizes,
                decimations,
                norms,
            },
            holdout_map,
        ),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
