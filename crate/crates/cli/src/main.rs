//! `glean`: generate data, train reductions, build graphs, search and measure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use glean_core::ErrorKind;

#[derive(Debug, Parser)]
#[command(
    name = "glean",
    version,
    about = "Query-aware dimensionality reduction for inner-product search"
)]
pub struct Cli {
    /// File of `key = value` lines supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for `search` and `bench`.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Log one line per stage to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate vectors and map them to the inner-product setting.
    Convert(ConvertArgs),
    /// Write a synthetic database and query set.
    Synth(SynthArgs),
    /// Train a reduction model.
    Train(TrainArgs),
    /// Encode the database with a model and build the search graph.
    Build(BuildArgs),
    /// Search a query file and write the result ids.
    Search(SearchArgs),
    /// Loss and recall across methods and target dimensions, as CSV.
    Sweep(SweepArgs),
    /// Throughput of the search pipeline.
    Bench(BenchArgs),
    /// Cluster-access traces (and optionally variance profiles), as CSV.
    Trace(TraceArgs),
    /// Replay a streaming operation log.
    StreamReplay(StreamReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityArg {
    Ip,
    Euclidean,
    Cosine,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Similarity the inputs' neighbors are defined by.
    #[arg(long, value_enum, default_value_t = SimilarityArg::Ip)]
    pub similarity: SimilarityArg,
    #[arg(long)]
    pub out_x: PathBuf,
    #[arg(long)]
    pub out_q: PathBuf,
    /// Also write exact inner-product top-k ids of the converted pair.
    #[arg(long)]
    pub out_gt: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Decaying-spectrum database with rotated queries.
    Ood,
    /// Gaussian mixture; queries drawn from the same mixture.
    Mixture,
    /// Low-dimensional blobs on a sphere shell with isotropic queries.
    Blobs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Ood)]
    pub kind: SynthKind,
    #[arg(long)]
    pub n: usize,
    /// Number of queries.
    #[arg(long)]
    pub queries: usize,
    #[arg(long)]
    pub dim: usize,
    /// Query rotation in radians (`ood`).
    #[arg(long, default_value_t = 0.0)]
    pub angle: f64,
    /// Mixture components (`mixture`).
    #[arg(long, default_value_t = 16)]
    pub components: usize,
    /// Number of blobs (`blobs`).
    #[arg(long, default_value_t = 2)]
    pub blobs: usize,
    /// Dimension of each blob's subspace (`blobs`).
    #[arg(long, default_value_t = 8)]
    pub intrinsic_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_x: PathBuf,
    #[arg(long)]
    pub out_q: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Sphering,
    Svd,
    Gleanvec,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub data: PathBuf,
    /// Learning queries; unused by `svd`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Target dimension, required for `gleanvec`. Linear models keep the full
    /// basis and are sliced at search time.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 100_000)]
    pub sample_limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Lifted,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_db: PathBuf,
    #[arg(long)]
    pub out_graph: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub degree: usize,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 1.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Lazy,
    Eager,
}

#[derive(Debug, Args)]
pub struct SearchOpts {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub kappa: usize,
    #[arg(long, default_value_t = 200)]
    pub window: usize,
    /// Dimensions scored during graph traversal; defaults to the model's maximum.
    #[arg(long)]
    pub d_search: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Lazy)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub search: SearchOpts,
    /// Result ids, one ivecs record per query.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth to report recall against.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Learning queries; defaults to half the query file.
    #[arg(long)]
    pub learn: Option<usize>,
    /// Test queries; defaults to the rest of the query file.
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32])]
    pub dims: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Method::Svd, Method::Sphering, Method::Gleanvec])]
    pub methods: Vec<Method>,
    /// Cluster counts swept for `gleanvec`.
    #[arg(long, value_delimiter = ',', default_values_t = [4])]
    pub clusters: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// GleanVec repetitions (seeds 0..N) averaged per row.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Graph over the data file; adds graph recall and QPS columns.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub kappa: usize,
    #[arg(long, default_value_t = 200)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub search: SearchOpts,
    /// Timed passes over the query file.
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub search: SearchOpts,
    /// Sliding-window length for the distinct-cluster count.
    #[arg(long, default_value_t = 10)]
    pub trace_window: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Database vectors for the captured-variance profile.
    #[arg(long, requires = "variance_out")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub variance_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Vectors referenced by INSERT offsets.
    #[arg(long)]
    pub data: PathBuf,
    /// Vectors referenced by QUERY offsets.
    #[arg(long)]
    pub queries: PathBuf,
    /// Updates between automatic refreshes; 0 disables them.
    #[arg(long, default_value_t = glean_core::streaming::DEFAULT_REFRESH_PERIOD)]
    pub period: u64,
    /// Decay applied to the query statistics at each refresh.
    #[arg(long, default_value_t = 1.0)]
    pub decay: f64,
    /// Bring every record to the final model before exiting.
    #[arg(long)]
    pub reproject: bool,
    /// Save the final model.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn label(&self) -> &'static str {
        match self.code {
            2 => "usage",
            3 => "data",
            4 => "numeric",
            _ => "internal",
        }
    }
}

impl From<glean_core::Error> for Failure {
    fn from(e: glean_core::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn parse(argv: Vec<String>) -> Result<Cli, clap::Error> {
    let command = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    Cli::from_arg_matches(&command.try_get_matches_from(argv)?)
}

/// Parses the command line, then reparses with config defaults placed ahead
/// of the user's own flags so that the flags win.
fn parse_with_config(argv: Vec<String>) -> Result<Cli, Failure> {
    let cli = parse(argv.clone()).map_err(clap_failure)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let defaults = config::load(path)?;
    let at =
        config::subcommand_position(&argv).ok_or_else(|| Failure::usage("no subcommand given"))?;
    let mut merged = argv[..=at].to_vec();
    merged.extend(defaults);
    merged.extend_from_slice(&argv[at + 1..]);
    parse(merged).map_err(clap_failure)
}

fn clap_failure(e: clap::Error) -> Failure {
    use clap::error::ErrorKind as K;
    if matches!(
        e.kind(),
        K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
    ) {
        let _ = e.print();
        return Failure {
            code: 0,
            message: String::new(),
        };
    }
    let text = e.to_string();
    let first = text.lines().next().unwrap_or("invalid arguments");
    Failure::usage(first.trim_start_matches("error: ").to_string())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let outcome = parse_with_config(argv).and_then(|cli| {
        let level = if cli.verbose { "info" } else { "warn" };
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
        commands::run(cli)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.code == 0 => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.label(), f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
