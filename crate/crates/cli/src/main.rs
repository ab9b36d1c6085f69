mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Large lookup layers: tokenizer and allocation building, desk-scale training,
/// evaluation, offload benchmarking and analysis.
#[derive(Parser, Debug)]
#[command(name = "l3", version, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file (TOML, or JSON by extension)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration value; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random component [default: $L3_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory of .txt documents [config: data.corpus]
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Trained tokenizer file [config: data.tokenizer]
    #[arg(long, value_name = "FILE")]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a deterministic synthetic text corpus
    SynthCorpus {
        #[command(flatten)]
        common: Common,
        /// Number of files [config: synth.files]
        #[arg(long)]
        files: Option<usize>,
        /// Bytes per file [config: synth.bytes_per_file]
        #[arg(long)]
        bytes_per_file: Option<usize>,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Train a byte-pair tokenizer on a corpus
    TokenizeTrain {
        #[command(flatten)]
        common: Common,
        /// Directory of .txt documents [config: data.corpus]
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Target vocabulary size [config: model.vocab_size]
        #[arg(long)]
        vocab: Option<usize>,
        /// Tokenizer file to write
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Build an embedding allocation
    Alloc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Give every token N embeddings instead of counting codewords
        #[arg(long, value_name = "N")]
        uniform: Option<u32>,
        /// Total embeddings [config: alloc.v]
        #[arg(long)]
        v: Option<usize>,
        /// Per-token cap [config: alloc.k]
        #[arg(long)]
        k: Option<u32>,
        /// Codeword counting rule: appendix or pseudocode [config: alloc.algo]
        #[arg(long)]
        algo: Option<String>,
        /// Vocabulary size when no tokenizer is given [config: model.vocab_size]
        #[arg(long)]
        vocab: Option<usize>,
        /// Allocation file to write
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Print the shape of an allocation
    Stats {
        #[command(flatten)]
        common: Common,
        /// Allocation file
        #[arg(long, value_name = "FILE")]
        alloc: PathBuf,
        /// Also write the statistics as JSON
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Train a model
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Allocation file for L3 layers [config: model.allocation]
        #[arg(long, value_name = "FILE")]
        alloc: Option<PathBuf>,
        /// f32 or f64 [config: model.precision]
        #[arg(long)]
        precision: Option<String>,
        /// Token budget [config: train.total_tokens]
        #[arg(long)]
        total_tokens: Option<usize>,
        /// Continue from a checkpoint with training state
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Held-out perplexity of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Which part of the corpus: val, train or all
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate at most this many tokens
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Result file (JSON)
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Resident vs offloaded generation timing
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with L3 layers
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Sweep the depth of a single L3 layer instead (untrained weights)
        #[arg(long)]
        sweep: bool,
        /// Allocation file for the sweep [config: model.allocation]
        #[arg(long, value_name = "FILE")]
        alloc: Option<PathBuf>,
        /// Random prompts [config: bench.prompts]
        #[arg(long)]
        prompts: Option<usize>,
        /// Tokens generated per prompt [config: bench.n_new]
        #[arg(long)]
        n_new: Option<usize>,
        /// Fixed synthetic latency [config: bench.latency_ns_per_kb]
        #[arg(long)]
        latency_ns_per_kb: Option<u64>,
        /// Await every L3 layer before the first one runs [config: bench.strict]
        #[arg(long)]
        strict: bool,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Tuned-lens KL profile and L3 score statistics
    Lens {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Lens optimizer steps per site [config: lens.steps]
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Per-token FLOPs of one L3 layer
    Flops {
        /// Embeddings bound to the token
        #[arg(long)]
        d_t: u64,
        #[arg(long)]
        d_in: usize,
        #[arg(long)]
        d_emb: usize,
        #[arg(long)]
        d_up: usize,
        /// Defaults to d_in
        #[arg(long)]
        d_out: Option<usize>,
    },
    /// Train the dense / L3 comparison set under matched compute
    Matrix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Only resolve and print the variants
        #[arg(long)]
        plan_only: bool,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
