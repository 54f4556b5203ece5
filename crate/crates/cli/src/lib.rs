//! Command-line pipeline: generate or import a corpus, build the vocabulary
//! and splits, train both variants, pick thresholds, evaluate, analyze,
//! plot traces and run the incremental ranker.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

#[derive(Debug, Parser)]
#[command(name = "turnshift", version, about = "Response-conditioned turn-shift prediction")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Root seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Flat `key = value` experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantArg {
    Baseline,
    Rc,
}

impl From<VariantArg> for turnshift::sequencing::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => turnshift::sequencing::Variant::Baseline,
            VariantArg::Rc => turnshift::sequencing::Variant::Rc,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        n_dialogs: Option<usize>,
    },
    /// Split a corpus and build the vocabulary from its training part.
    Vocab {
        /// Interchange-format corpus (defaults to the generated one).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Encode the splits into sample caches.
    Prepare {
        /// Only this variant (both by default).
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Train one variant.
    Train {
        #[arg(long, value_enum)]
        variant: VariantArg,
    },
    /// Optimize decision thresholds on the validation split.
    Threshold {
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Evaluate both models on the test split.
    Eval,
    /// Plot the per-word trace of one turn.
    Trace {
        /// Trace files; two files give an overlaid plot.
        #[arg(long = "traces", required = true, num_args = 1..=2)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        dialog: String,
        #[arg(long)]
        cu_index: Option<usize>,
        #[arg(long, default_value = "svg")]
        format: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Divergence analysis of baseline versus RC test traces.
    Analyze {
        #[arg(long)]
        annotator: Option<String>,
        /// Annotation file for the import annotator.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score candidate responses word by word.
    Rank {
        /// History turns: one interchange record.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Candidate responses: every turn of every record is one candidate.
        #[arg(long)]
        candidates: PathBuf,
        /// Words of the incoming utterance; read one per line from stdin
        /// when absent.
        #[arg(long)]
        words: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "rc")]
        variant: VariantArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Respond only when the best candidate leads by this margin.
        #[arg(long)]
        margin: Option<f64>,
        /// Comma-separated per-candidate log-odds biases.
        #[arg(long)]
        bias: Option<String>,
    },
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let recorded: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(&cli, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
