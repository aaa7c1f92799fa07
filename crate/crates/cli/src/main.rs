//! `rbs`: data preparation, scorer training, validation, best-of-N,
//! toy policy optimization and cost estimation from one binary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rbs", version, about = "Self-supervised reward scorer toolkit")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand; they override config-file values.
#[derive(Args, Debug, Default, Clone)]
struct Flags {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    split: Option<SplitKind>,
    /// Chunk length.
    #[arg(long = "L", global = true)]
    l: Option<usize>,
    /// Prefix length.
    #[arg(long = "L1", global = true)]
    l1: Option<usize>,
    /// Suffix length.
    #[arg(long = "L2", global = true)]
    l2: Option<usize>,
    /// Batch size.
    #[arg(long = "B", global = true)]
    b: Option<usize>,
    /// Centering coefficient.
    #[arg(long, global = true)]
    c: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    token_budget: Option<u64>,
    #[arg(long, global = true, value_enum)]
    tokenizer: Option<TokenizerFlag>,
    /// Comma-separated best-of-N sizes, e.g. 1,2,4,8.
    #[arg(long = "N-list", global = true)]
    n_list: Option<String>,
    /// Completions per prompt.
    #[arg(long = "K", global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    clip: Option<f64>,
    /// Cost mode: generation or annotation.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// stated, table3-effective or custom:P_in,P_out.
    #[arg(long, global = true)]
    prices: Option<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SplitKind {
    Fixed,
    Sentence,
    RandomBreakpoint,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TokenizerFlag {
    Byte,
    Whitespace,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize a corpus and build prefix/suffix pairs.
    Prepare {
        /// Documents (.jsonl or blank-line separated text) or a token stream.
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate the keyed synthetic corpus and best-of-N task.
    Synth,
    /// Train the scorer on prefix/suffix pairs.
    Train {
        /// Training pairs (pairs.bin or pairs.jsonl).
        #[arg(long)]
        input: PathBuf,
        /// Held-out pairs; defaults to the tail of the input.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Warm-start checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Continue training on chosen/rejected triples.
    TrainCurated {
        /// JSON-lines with prompt, chosen and rejected fields.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Word vocabulary (TSV) for the whitespace tokenizer.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// In-batch ranking metrics of a checkpoint on held-out pairs.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Best-of-N curve and MAP gain over a baseline scorer.
    Bon {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline checkpoint; defaults to the seeded initialization.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Candidate sets; defaults to the synthetic task.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a toy policy against a scorer checkpoint.
    Grpo {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimate generation or annotation cost of preference data.
    Cost {
        /// Rows CSV; defaults to the bundled dataset rows.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
