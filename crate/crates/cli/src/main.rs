mod commands;
mod options;
mod verify;

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand, ValueEnum};

use options::{ParadigmArg, Precision, EXIT_HELP};

#[derive(Parser, Debug)]
#[command(
    name = "yoco",
    version,
    about = "Decoder-decoder inference engine: verification suites, generation, cost accounting and chunk-parallel simulation",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model config JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset (tiny, tiny-swa, 3b, 65b, 160m ... 13b; suffix -640k/-5m/-80m
    /// for extended rope bases).
    #[arg(long)]
    pub preset: Option<String>,
    /// Seed for weight initialization and random inputs.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every invariant suite; exits 1 if any fails.
    #[command(after_help = EXIT_HELP)]
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        /// Load weights instead of initializing from the seed.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Prompt length for the engine and simulator suites.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Restrict paradigm comparisons (repeatable).
        #[arg(long, value_enum)]
        paradigm: Vec<ParadigmArg>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write the cache/FLOP accounting CSV for a list of lengths.
    #[command(after_help = EXIT_HELP)]
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        /// Output CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy generation; prints prompt and continuation token ids.
    #[command(after_help = EXIT_HELP)]
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Prompt token ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        /// Chunk size for prompt encoding (defaults to the config's).
        #[arg(long)]
        prefill_chunk: Option<usize>,
    },
    /// Simulate chunk parallelism; writes the summary CSV and event trace.
    #[command(after_help = EXIT_HELP)]
    Parsim {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Device counts, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        devices: Vec<usize>,
        /// Sequence length.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Summary CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trace JSONL path; with several device counts, `.p<P>` is inserted
        /// before the extension.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Initialize weights from a seed and save them.
    #[command(after_help = EXIT_HELP)]
    InitWeights {
        #[command(flatten)]
        model: ModelArgs,
        /// Manifest path; the blob is written next to it with a `.bin` extension.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    ChunkwiseCrossTerm,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify {
            model,
            weights,
            n,
            paradigm,
            inject_fault,
        } => commands::verify(
            &model,
            weights.as_ref(),
            n,
            paradigm,
            inject_fault.map(|FaultArg::ChunkwiseCrossTerm| yoco::gret::Fault::CorruptCrossTerm),
        ),
        Command::Bench { model, n, out } => commands::bench(&model, &n, out.as_ref()),
        Command::Generate {
            model,
            weights,
            prompt,
            max_new,
            prefill_chunk,
        } => commands::generate(&model, weights.as_ref(), &prompt, max_new, prefill_chunk),
        Command::Parsim {
            model,
            weights,
            devices,
            n,
            out,
            trace,
        } => commands::parsim(&model, weights.as_ref(), &devices, n, out.as_ref(), trace.as_ref()),
        Command::InitWeights { model, out } => commands::init_weights(&model, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        process::exit(e.code as i32);
    }
}
