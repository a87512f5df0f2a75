mod commands;
mod selector;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use ctxprobe_core::aggregate::{DEFAULT_MIN_POSITION, DEFAULT_MIN_POS_COUNT};
use ctxprobe_core::backends::DEFAULT_HTTP_TIMEOUT_MS;
use ctxprobe_core::metrics::ScoreKind;
use ctxprobe_core::types::{DEFAULT_BATCH_SIZE, DEFAULT_C_MAX, DEFAULT_TOP_K_EXPORT};
use ctxprobe_core::StoreDtype;

use selector::BackendSelector;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_INTERNAL: u8 = 5;

/// Context length probing: score every target token under every context
/// length and explain predictions by the tokens that change them.
#[derive(Debug, Parser)]
#[command(name = "ctxprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a backend over every document and write one store per document.
    Probe(ProbeArgs),
    /// Write per-document NLL/KL curves and Δ-scores as CSV.
    Metrics(RunsArgs),
    /// Corpus-level loss and Δ summaries (JSON report plus CSV curves).
    Aggregate(AggregateArgs),
    /// Write one viewer bundle per document.
    Export(ExportArgs),
    /// probe, metrics, aggregate and export in one go.
    Run(RunArgs),
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected an integer >= 1, got {s:?}")),
    }
}

fn score_kind(s: &str) -> Result<ScoreKind, String> {
    match s {
        "kl" => Ok(ScoreKind::Kl),
        "nll" => Ok(ScoreKind::Nll),
        _ => Err(format!("expected kl or nll, got {s:?}")),
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).multiple(true).args(["conllu", "text"])))]
pub struct InputArgs {
    /// CoNLL-U files or directories of *.conllu files.
    #[arg(long, num_args = 1..)]
    pub conllu: Vec<PathBuf>,
    /// Plain-text files or directories of *.txt files, one document each.
    #[arg(long, num_args = 1..)]
    pub text: Vec<PathBuf>,
    /// Split words into pieces of at most this many characters (local tokenizer).
    #[arg(long, value_parser = positive)]
    pub max_piece_chars: Option<usize>,
    /// Never put a space before closing punctuation when joining words.
    #[arg(long)]
    pub no_space_before_punct: bool,
}

#[derive(Debug, Args)]
pub struct ProbeOpts {
    /// ngram:<order>:<alpha> | trigger:<trigger>:<target>:<horizon>:<p_hi>:<p_lo> | http:<url>
    #[arg(long)]
    pub backend: BackendSelector,
    #[arg(long, default_value_t = DEFAULT_C_MAX, value_parser = positive)]
    pub c_max: usize,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub stride: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE, value_parser = positive)]
    pub batch_size: usize,
    /// Store precision: f16, f32 or f64.
    #[arg(long, default_value = "f16")]
    pub dtype: StoreDtype,
    /// Top predictions kept per context length in viewer bundles.
    #[arg(long, default_value_t = DEFAULT_TOP_K_EXPORT, value_parser = positive)]
    pub top_k: usize,
    /// Batches evaluated concurrently within a document.
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub parallelism: usize,
    /// Documents processed concurrently.
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub jobs: usize,
    #[arg(long, env = "CTXPROBE_HTTP_TIMEOUT_MS", default_value_t = DEFAULT_HTTP_TIMEOUT_MS)]
    pub http_timeout_ms: u64,
    /// Print segment/row/batch counts and exit without calling the backend.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub opts: ProbeOpts,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunsArgs {
    /// Directory written by `probe`.
    #[arg(long)]
    pub runs: PathBuf,
    /// Defaults to the runs directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateOpts {
    #[arg(long, default_value_t = DEFAULT_MIN_POS_COUNT)]
    pub min_pos_count: u64,
    #[arg(long, default_value_t = DEFAULT_MIN_POSITION)]
    pub min_position: usize,
    /// Δ-score kind for the decay and POS summaries.
    #[arg(long, default_value = "kl", value_parser = score_kind)]
    pub score: ScoreKind,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub runs: RunsArgs,
    #[command(flatten)]
    pub opts: AggregateOpts,
}

#[derive(Debug, Args)]
pub struct ExportOpts {
    /// Overrides the value recorded at probe time.
    #[arg(long, value_parser = positive)]
    pub export_top_k: Option<usize>,
    /// Keep every context length in bundle curves.
    #[arg(long)]
    pub full_resolution: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub runs: RunsArgs,
    #[command(flatten)]
    pub opts: ExportOpts,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub probe: ProbeOpts,
    #[command(flatten)]
    pub aggregate: AggregateOpts,
    #[command(flatten)]
    pub export: ExportOpts,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Probe(a) => commands::probe(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Aggregate(a) => commands::aggregate(a),
        Command::Export(a) => commands::export(a),
        Command::Run(a) => commands::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
