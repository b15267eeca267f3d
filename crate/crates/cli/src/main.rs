//! `wmage`: phantom generation, feature extraction, splitting, training,
//! evaluation, reporting and plotting for white-matter brain-age models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error.

mod commands;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run::{Failure, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "wmage", version, about = "White-matter brain-age pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic aging cohort (NIfTI volumes plus manifest).
    Phantom(PhantomArgs),
    /// Compute the ROI feature CSV for every manifest participant.
    Extract(ExtractArgs),
    /// Assign participants to five folds and the two test sets.
    Split(SplitArgs),
    /// Cross-validate a model and write checkpoints, history and metrics.
    Train(TrainArgs),
    /// Re-evaluate trained fold checkpoints on a manifest and split.
    Evaluate(EvaluateArgs),
    /// Tabulate metrics files and run paired t-tests between them.
    Report(ReportArgs),
    /// Write brain-age-gap KDE curves as CSV and SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom spec as `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of cognitively normal participants.
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid size, `N` or `XxYxZ`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Number of concentric-shell ROIs.
    #[arg(long)]
    pub rois: Option<usize>,
    #[arg(long)]
    pub noise_fa: Option<f64>,
    #[arg(long)]
    pub noise_md: Option<f64>,
    /// Extra participants in the impaired cohort.
    #[arg(long)]
    pub n_impaired: Option<usize>,
    /// Years the impaired cohort's tissue is older than its recorded age.
    #[arg(long)]
    pub impaired_gap: Option<f64>,
    /// Shift of the test share's age range (years).
    #[arg(long, allow_hyphen_values = true)]
    pub age_shift_test: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output feature CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// ROI table (`id name` lines). Defaults to `rois.txt` beside the
    /// manifest, else the 134-ROI table.
    #[arg(long)]
    pub rois: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output splits CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cross-validation folds (only 5 is supported).
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(5..=5))]
    pub folds: u8,
    /// Trailing share of normal participants held out for testing.
    #[arg(long, default_value_t = wmage_core::experiment::DEFAULT_TEST_FRACTION)]
    pub test_fraction: f64,
}

/// Data sources shared by `train` and `evaluate`.
#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Splits CSV from `wmage split`.
    #[arg(long)]
    pub splits: PathBuf,
    /// Feature CSV from `wmage extract`; ROI models read volumes otherwise.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// ROI table, as for `extract`.
    #[arg(long)]
    pub rois: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config as `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// e.g. `roi_mlp:537-128-64-1` or `resnet:18,head_hidden=true,input=32`.
    #[arg(long)]
    pub model: Option<String>,
    /// `l1` or `mse`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `constant` or `cosine`.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub md_scale: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// `pca` or `zscore`.
    #[arg(long)]
    pub feature_norm: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Run directory written by `wmage train`.
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics JSON-lines files; pass several to compare them.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Output table file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-fold metric for the t-tests: `val`, `test_normal` or `test_impaired`.
    #[arg(long, default_value = "test_normal")]
    pub compare: String,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Metrics JSON-lines files, one chart each.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("WMAGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::usage(format!(
            "WMAGE_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::data(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Extract(a) => commands::extract(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::Plot(a) => commands::plot(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wmage: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
