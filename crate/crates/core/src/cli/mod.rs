//! Command-line interface.
//!
//! Every command reads an optional JSON [`RunConfig`]; command-line flags
//! override individual fields. Outputs embed the effective configuration
//! and [`TOOL_VERSION`](crate::TOOL_VERSION).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{AttributeOutput, PreviewManifest, TrainManifest};
pub use config::{EvalConfig, RunConfig, CONFIG_VERSION};

use crate::augment::Guidance;
use crate::error::Error;
use crate::testbed::SplitName;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ssca", version, about = "Counterfactual attribution and debiased training on a shortcut testbed")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "SSCA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Erm,
    Ssca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorruptionSet {
    /// The six standard corruptions, or the list in the config.
    Default,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    TestId,
    TestOodDecorrelated,
    TestOodCuefree,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::TestId => SplitName::TestId,
            SplitArg::TestOodDecorrelated => SplitName::TestOodDecorrelated,
            SplitArg::TestOodCuefree => SplitName::TestOodCuefree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    Counterfactual,
    FactualLima,
    Random,
}

impl From<GuidanceArg> for Guidance {
    fn from(g: GuidanceArg) -> Self {
        match g {
            GuidanceArg::Counterfactual => Guidance::Counterfactual,
            GuidanceArg::FactualLima => Guidance::FactualLima,
            GuidanceArg::Random => Guidance::Random,
        }
    }
}

/// Overrides for the attribution search.
#[derive(Debug, Args, Default)]
pub struct SearchArgs {
    /// Grid rows and columns.
    #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
    pub grid: Option<Vec<usize>>,
    /// Region budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Early-stop threshold on the counter-class confidence.
    #[arg(long)]
    pub tau_cf: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shortcut dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory (created if missing).
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a classifier with plain ERM or with mined refilled samples.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for params.bin, loss.csv and train.json.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        tau_aug: Option<f64>,
        #[arg(long)]
        candidate_fraction: Option<f64>,
        #[arg(long)]
        warmup_epochs: Option<usize>,
        #[arg(long)]
        aug_weight: Option<f64>,
        #[arg(long, value_enum)]
        guidance: Option<GuidanceArg>,
    },
    /// Attribute one image and write the search, its deletion curve and an overlay.
    Attribute {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        params: PathBuf,
        /// Dataset directory, used with --index.
        #[arg(long, requires = "index")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test-id")]
        split: SplitArg,
        #[arg(long, requires = "data")]
        index: Option<usize>,
        /// Single-image tensor file, used instead of --data/--index.
        #[arg(long, conflicts_with_all = ["data", "index"])]
        image: Option<PathBuf>,
        /// Ground-truth label; defaults to the dataset label or the prediction.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, value_enum, default_value = "counterfactual")]
        guidance: GuidanceArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Mine one batch of training images and export the refilled samples.
    AugmentPreview {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Batch size; the first ⌈candidate_fraction · count⌉ are attributed.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// First training index of the batch.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        tau_aug: Option<f64>,
        #[arg(long)]
        candidate_fraction: Option<f64>,
        #[arg(long, value_enum)]
        guidance: Option<GuidanceArg>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained classifier on every split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        corruptions: CorruptionSet,
        /// Corruption noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Correctly classified test images to search for the flip rate.
        #[arg(long)]
        flip_rate: Option<usize>,
        /// Per-step loss log to reference; defaults to loss.csv beside the params.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Report path.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Tabulate evaluation reports side by side.
    Report {
        /// Evaluation report files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Markdown output; printed to stdout as well.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidArchitecture(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::DimensionMismatch(_)
        | Error::Format(_)
        | Error::UnsupportedVersion { .. }
        | Error::EmptySource(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_) => EXIT_DATA,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_CONFIG;
        }
        // A pool built earlier in this process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
