mod commands;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use patent_kg::link::{CandidatePolicy, Method};

use error::CliError;

/// Build patent knowledge graphs, predict links and patents, and backtest.
#[derive(Debug, Parser)]
#[command(name = "patent-kg", version)]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and lexicon.
    Synth(SynthArgs),
    /// Build the co-occurrence graph at a cutoff year.
    BuildKg(BuildKgArgs),
    /// Train a link prediction model on a graph.
    Train(TrainArgs),
    /// Predict missing links in a graph.
    PredictLinks(PredictLinksArgs),
    /// Enumerate candidate patents from predicted links.
    PredictPatents(PredictPatentsArgs),
    /// Run the cutoff-year backtest and write a report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub synth_seed: Option<u64>,
    #[arg(long)]
    pub communities: Option<usize>,
    #[arg(long)]
    pub entities_per_community: Option<usize>,
    #[arg(long)]
    pub docs_per_year: Option<usize>,
    #[arg(long)]
    pub years: Option<usize>,
    #[arg(long)]
    pub start_year: Option<i32>,
    #[arg(long)]
    pub entities_per_doc: Option<usize>,
    #[arg(long)]
    pub mixing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Hinge margin.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets the entity, output and token dimensions together.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictFlags {
    /// Fraction of the edge count to emit as predicted links.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Common-neighbor threshold (default: half the maximum, rounded up).
    #[arg(long)]
    pub zeta: Option<usize>,
    #[arg(long, value_parser = parse_policy)]
    pub candidates: Option<CandidatePolicy>,
}

fn parse_policy(s: &str) -> Result<CandidatePolicy, String> {
    s.parse().map_err(|e: patent_kg::link::LinkError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: patent_kg::link::LinkError| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output corpus (JSON Lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output lexicon, one term per line.
    #[arg(long)]
    pub lexicon_out: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthFlags,
}

#[derive(Debug, Args)]
pub struct BuildKgArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// `jsonl` or `csv`; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub cutoff: Option<i32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Corpus used for context sentences (context method only).
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictLinksArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub predict: PredictFlags,
}

#[derive(Debug, Args)]
pub struct PredictPatentsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub links: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub clique_cap: Option<usize>,
    /// Later graph whose patents mark candidates as valid.
    #[arg(long)]
    pub future: Option<PathBuf>,
    /// Years after the cutoff that count as future.
    #[arg(long)]
    pub horizon: Option<i32>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    /// Report CSV; the full report goes next to it as `<out>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    pub cutoffs: Option<Vec<i32>>,
    #[arg(long)]
    pub horizon: Option<i32>,
    #[arg(long)]
    pub clique_cap: Option<usize>,
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub predict: PredictFlags,
}

fn long_version() -> String {
    format!(
        "{}\ngraph format {}\nmodel format {}\nlinks format {}\ncandidates format {}\nreport format {}\ncheckpoint format {}",
        env!("CARGO_PKG_VERSION"),
        patent_kg::graph::GRAPH_FORMAT_VERSION,
        patent_kg::link::MODEL_FORMAT_VERSION,
        patent_kg::link::LINKS_FORMAT_VERSION,
        patent_kg::patent::CANDIDATES_FORMAT_VERSION,
        patent_kg::eval::REPORT_FORMAT_VERSION,
        patent_kg::num::CHECKPOINT_VERSION,
    )
}

fn parse(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let version: &'static str = Box::leak(long_version().into_boxed_str());
    let matches = Cli::command().long_version(version).try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn run(args: Vec<OsString>) -> i32 {
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 1;
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::BuildKg(a) => commands::build_kg(a),
        Command::Train(a) => commands::train(a),
        Command::PredictLinks(a) => commands::predict_links(a),
        Command::PredictPatents(a) => commands::predict_patents(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `patent-kg --help` for usage");
            }
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os().collect()));
}
