//! `dtigen` command-line entry point.

mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dtigen", version, about = "Generative drug-target-interaction triplet discovery")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run data-parallel stages on one thread, in order.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with lexicons and an unlabeled pool.
    Datagen(DatagenArgs),
    /// Score, filter and split a raw labeled corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Fit a BPE tokenizer on a corpus.
    TrainBpe(TrainBpeArgs),
    /// Train a model, or fine-tune one with --init.
    Train(TrainArgs),
    /// Generate triplets for documents.
    Generate(GenerateArgs),
    /// Score predictions against gold triplets.
    Evaluate(EvaluateArgs),
    /// Pseudo-labeling of unlabeled documents.
    #[command(subcommand)]
    Semisup(SemisupCommand),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Train one model per triplet order and report triplet F1.
    AblateOrders(RunArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long)]
    pub unlabeled_fraction: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildCorpusArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub lexicons: PathBuf,
    /// Keep this many best-scoring documents (default: all).
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Split sizes as test,valid,train.
    #[arg(long, value_parser = parse_split)]
    pub split: (usize, usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainBpeArgs {
    /// Corpus directory (uses train.jsonl) or a corpus file.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub merges: usize,
    #[arg(long, default_value = "DIT")]
    pub order: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with train.jsonl and valid.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run configuration (model, optimizer, train, provider sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tokenizer to use; fitted on the training split when absent.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    /// Fine-tune this checkpoint instead of training from scratch.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Train on this corpus file instead of <corpus>/train.jsonl.
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    /// Must match the order the checkpoint was trained with.
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum SemisupCommand {
    /// Keep spotted triplets occurring in at least --min-occ documents.
    RuleFilter {
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        lexicons: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_occ: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep pseudo triplets agreeing with model output on two of three fields.
    KdLabel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign known triplets to documents mentioning their entities.
    DsLabel {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        /// Synonym lexicons used for retrieval.
        #[arg(long)]
        lexicons: Option<PathBuf>,
        #[arg(long)]
        with_interaction: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upsample a labeled corpus and merge pseudo-labeled data into it.
    Merge {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long, default_value_t = 5)]
        upsample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Lexicons for mention retrieval in distance statistics.
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
    /// Also write the statistics here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Add the semi-supervised stage with default settings when the
    /// config has none.
    #[arg(long)]
    pub semisup: bool,
}

fn parse_split(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated sizes: test,valid,train".into());
    }
    let n = |p: &str| p.parse::<usize>().map_err(|e| format!("bad split size `{p}`: {e}"));
    Ok((n(parts[0])?, n(parts[1])?, n(parts[2])?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = dtigen::par::init_threads_from_env();
    log::debug!("{threads} worker threads");
    commands::run(cli)
}
