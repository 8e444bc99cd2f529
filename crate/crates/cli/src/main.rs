mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, CONFIG_ENV};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "asmalign", version, about = "Assembly/text contrastive pipeline")]
struct Cli {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads. Computation is currently single threaded.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Synth(SynthArgs),
    /// Train a WordPiece vocabulary on a corpus.
    TokTrain(TokTrainArgs),
    /// Stage 1: masked-token and jump-target pre-training.
    Pretrain(PretrainArgs),
    /// Stage 2: contrastive alignment with explanations.
    Align(AlignArgs),
    /// Export function or explanation embeddings.
    Embed(EmbedArgs),
    /// Classify functions against label prompts.
    Zeroshot(ZeroshotArgs),
    /// Pool-based retrieval metrics.
    EvalRetrieval(RetrievalArgs),
    /// Linear probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Few-shot linear probes over several shot counts.
    Fewshot(FewshotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `builtin` or a template file.
    #[arg(long)]
    pub templates: Option<String>,
    #[arg(long)]
    pub variants: Option<usize>,
    /// Use only the first N templates in id order.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rename: Option<bool>,
    #[arg(long)]
    pub nop_rate: Option<f64>,
    #[arg(long)]
    pub reorder: Option<bool>,
    #[arg(long)]
    pub shuffle: Option<bool>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokTrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<u64>,
    #[arg(long)]
    pub max_instructions: Option<usize>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelShape {
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mlm_rate: Option<f64>,
    #[arg(long)]
    pub jtp_rate: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub shape: ModelShape,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by this subcommand.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Stage-1 checkpoint; without it the encoder starts from random weights.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub learnable_temperature: Option<bool>,
    #[arg(long)]
    pub symmetric: Option<bool>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub projection: Option<bool>,
    /// `bow` (trained with the encoder) or `precomputed` (frozen).
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ModelShape,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `asm` or `text`.
    #[arg(long)]
    pub side: Option<String>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// `label<TAB>prompt` lines.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// A single function listing.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// A corpus file; reports accuracy when records carry labels.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `text` (function to explanation) or `asm` (function to function).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated shot counts.
    #[arg(long)]
    pub ks: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let ctx = commands::Context {
        file: &file,
        workers: cli.workers.unwrap_or(1),
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::TokTrain(a) => commands::tok_train(&ctx, a),
        Command::Pretrain(a) => commands::pretrain(&ctx, a),
        Command::Align(a) => commands::align(&ctx, a),
        Command::Embed(a) => commands::embed(&ctx, a),
        Command::Zeroshot(a) => commands::zeroshot(&ctx, a),
        Command::EvalRetrieval(a) => commands::eval_retrieval(&ctx, a),
        Command::Probe(a) => commands::probe(&ctx, a),
        Command::Fewshot(a) => commands::fewshot(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
