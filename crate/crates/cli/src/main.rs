//! `koa`: offline knee-osteoarthritis KL-grade screening.
//!
//! Exit codes: 0 success, 2 bad input, 3 model error, 4 insight failure
//! (the prediction is still printed).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "koa",
    version,
    about = "Offline knee-osteoarthritis KL-grade screening"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset tree and print per-grade counts for both splits.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        /// Directory for class_distribution.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-grade pixel-intensity histograms and the class distribution.
    Eda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one radiograph.
    Predict {
        #[arg(long)]
        model: PathBuf,
        image: PathBuf,
        /// Append an interpretive report for the predicted grade.
        #[arg(long)]
        insights: bool,
        /// Use the built-in report table; never touch the network.
        #[arg(long)]
        offline: bool,
        #[arg(long)]
        json: bool,
    },
    /// Extract frozen-backbone features for one split into a cache file.
    Features {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 5-way head on cached or freshly extracted features.
    TrainHead(TrainArgs),
    /// Confusion matrix and per-class metrics on a dataset split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
        /// Comma-separated grades, e.g. 1,2,3.
        #[arg(long)]
        subset: Option<String>,
        /// Directory for confusion.csv and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert float weights to per-tensor int8.
    Quantize {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "weights-only")]
        policy: String,
    },
    /// List the tensors of a .koam file.
    Manifest { model: PathBuf },
    /// Generate synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args)]
struct TrainArgs {
    /// Training feature cache from `koa features`.
    #[arg(long, conflicts_with = "data")]
    features: Option<PathBuf>,
    /// Optional test feature cache for per-epoch test accuracy.
    #[arg(long, requires = "features")]
    test_features: Option<PathBuf>,
    /// Dataset root; features are extracted with --model.
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
    /// Backbone model. With --out, a copy with the trained head is written.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Random ResNet-18 with batch-norm statistics calibrated on synthetic images.
    Model {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = koa_core::fixtures::HEAD_INIT_RANGE)]
        head_range: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset tree of synthetic radiographs.
    Dataset {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        train_per_grade: usize,
        #[arg(long, default_value_t = 5)]
        test_per_grade: usize,
        #[arg(long, default_value_t = 160)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Train,
    Test,
    /// Train and test pooled.
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { data, out } => commands::ingest(&data, out.as_deref()),
        Command::Eda { data, out } => commands::eda(&data, &out),
        Command::Predict {
            model,
            image,
            insights,
            offline,
            json,
        } => commands::predict(&model, &image, insights, offline, json),
        Command::Features {
            model,
            data,
            split,
            out,
        } => commands::features(&model, &data, split, &out),
        Command::TrainHead(args) => commands::train_head(&args),
        Command::Evaluate {
            model,
            data,
            split,
            subset,
            out,
        } => commands::evaluate(&model, &data, split, subset.as_deref(), out.as_deref()),
        Command::Quantize {
            input,
            output,
            policy,
        } => commands::quantize(&input, &output, &policy),
        Command::Manifest { model } => commands::manifest(&model),
        Command::Synth(cmd) => commands::synth(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
