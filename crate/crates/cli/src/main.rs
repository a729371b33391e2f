//! `vispref` command-line front end: one subcommand per pipeline stage,
//! composed through files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "vispref", version, about = "Profile users' visual preferences from their image collections")]
struct Cli {
    /// TOML or JSON config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthFlags),
    /// Learn an embedding from the labeled images of a corpus.
    TrainMetric(TrainFlags),
    /// Replace every image's features by its embedding.
    Embed(EmbedFlags),
    /// Pick the background users and fit visual clusters on them.
    Cluster(ClusterFlags),
    /// Write per-user preference profiles.
    Profile(ProfileFlags),
    /// Compare all user pairs and write pair statistics and their eCDF.
    Compare(CompareFlags),
    /// Board-retrieval MRR across train sizes.
    Predict(PredictFlags),
    /// Mean average precision of an embedding on labeled images.
    EvalMap(EvalMapFlags),
}

#[derive(Args, Serialize, Debug)]
pub struct SynthFlags {
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub images_per_user: Option<usize>,
    #[arg(long)]
    pub n_latent_clusters: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub cluster_separation: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub dirichlet_concentration: Option<f64>,
    #[arg(long)]
    pub n_groups: Option<usize>,
    /// latent_cluster_as_label | none
    #[arg(long)]
    pub label_mode: Option<String>,
    /// Corpus output (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ground-truth sidecar (JSON); defaults to `<out>.truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Serialize, Debug)]
pub struct TrainFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_similar: Option<usize>,
    #[arg(long)]
    pub n_dissimilar: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub layer_lr_scale: Option<Vec<f64>>,
    #[arg(long)]
    pub sgd_momentum: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub output_dim: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub norm_epsilon: Option<f64>,
    #[arg(long)]
    pub norm_momentum: Option<f64>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
}

#[derive(Args, Serialize, Debug)]
pub struct EmbedFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// raw | learned | hybrid
    #[arg(long)]
    pub mode: Option<String>,
    /// Corpus whose features form the fixed half of hybrid embeddings,
    /// matched by (user_id, image_id); defaults to the input features.
    #[arg(long)]
    pub fixed_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Debug)]
pub struct FilterFlags {
    /// Keep users with at least this many images.
    #[arg(long)]
    pub min_pins: Option<usize>,
    /// Keep users with an image at or after this timestamp.
    #[arg(long)]
    pub cutoff_time: Option<u64>,
}

#[derive(Args, Serialize, Debug)]
pub struct ClusterFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// margin | bandwidth | <distance>
    #[arg(long)]
    pub cutoff: Option<String>,
    /// Contrastive margin of the embedding the corpus was produced with.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub background_size: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub filter: FilterFlags,
}

#[derive(Args, Serialize, Debug)]
pub struct ProfileFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub filter: FilterFlags,
}

#[derive(Args, Serialize, Debug)]
pub struct CompareFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pair statistics output (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// eCDF of the max-|z| statistic (CSV); defaults to `<out>.ecdf.csv`.
    #[arg(long)]
    pub ecdf_out: Option<PathBuf>,
    /// Total prior pseudo-counts contributed by the background.
    #[arg(long)]
    pub prior_mass: Option<f64>,
    /// Explicit multiplier on the background counts; overrides the prior mass.
    #[arg(long)]
    pub prior_scale: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub filter: FilterFlags,
}

#[derive(Args, Serialize, Debug)]
pub struct PredictFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub train_sizes: Option<Vec<usize>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub filter: FilterFlags,
}

#[derive(Args, Serialize, Debug)]
pub struct EvalMapFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// raw | learned | hybrid
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub fixed_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<vispref::Error>() {
            return match e.kind() {
                vispref::ErrorKind::Data => EXIT_DATA,
                vispref::ErrorKind::Numeric => EXIT_NUMERIC,
            };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let file = match &cli.config {
        Some(p) => config::load_file(p)?,
        None => serde_json::Value::Object(Default::default()),
    };
    let seed = config::global(&file, "seed", cli.seed)?.unwrap_or(0);
    if let Some(n) = config::global::<usize>(&file, "threads", cli.threads)? {
        if n == 0 {
            return Err(config::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Ctx { file, seed };
    match &cli.command {
        Command::Synth(f) => commands::synth(&ctx, f),
        Command::TrainMetric(f) => commands::train_metric(&ctx, f),
        Command::Embed(f) => commands::embed(&ctx, f),
        Command::Cluster(f) => commands::cluster(&ctx, f),
        Command::Profile(f) => commands::profile(&ctx, f),
        Command::Compare(f) => commands::compare(&ctx, f),
        Command::Predict(f) => commands::predict(&ctx, f),
        Command::EvalMap(f) => commands::eval_map(&ctx, f),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
