//! `raydn` command-line front end.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

/// Ray-denoising laboratory: generate scenes, build ray queries, train and
/// evaluate the toy detector, and inspect the Beta offset sampler.
///
/// Exit codes: 0 success, 2 input or path error, 3 numeric failure,
/// 4 version or compatibility failure.
#[derive(Debug, Parser)]
#[command(name = "raydn", version)]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes (rig plus boxes) as JSON files.
    GenScenes {
        /// Number of scenes.
        #[arg(long)]
        count: usize,
        /// Output directory [default: paths.scenes].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Build ray-query groups for every scene and write them as JSON.
    BuildQueries {
        /// Scene directory [default: paths.scenes].
        #[arg(long, value_name = "DIR")]
        scenes: Option<PathBuf>,
        /// Output file.
        #[arg(long, value_name = "FILE", default_value = "queries.json")]
        out: PathBuf,
    },
    /// Train the detector; writes model.bin and losses.csv.
    Train {
        /// Scene directory [default: paths.scenes].
        #[arg(long, value_name = "DIR")]
        scenes: Option<PathBuf>,
        /// Add ray queries and the denoising loss during training.
        #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
        with_beam: bool,
        /// Output directory [default: paths.run].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run inference on scenes and write detections plus metric reports.
    Eval {
        /// Model file [default: <paths.run>/model.bin].
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Scene directory [default: paths.scenes].
        #[arg(long, value_name = "DIR")]
        scenes: Option<PathBuf>,
        /// Output directory [default: paths.report].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Drop detections scoring below this [default: score_floor].
        #[arg(long, value_name = "SCORE")]
        score_floor: Option<f64>,
    },
    /// Draw Beta samples and their shifted offsets into samples.csv.
    BetaSample {
        /// Shape λ [default: rays.params.lambda].
        #[arg(long)]
        lambda: Option<f64>,
        /// Shape μ [default: rays.params.mu].
        #[arg(long)]
        mu: Option<f64>,
        /// Number of draws.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Also write pdf.svg: offset histogram with the density overlaid.
        #[arg(long)]
        svg: bool,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = "beta")]
        out: PathBuf,
    },
    /// Render SVG plots from losses.csv, pr_curves.csv or samples.csv files.
    Plot {
        /// Input CSV files; the kind is recognized from the header.
        #[arg(required = true, value_name = "CSV")]
        inputs: Vec<PathBuf>,
        /// Output directory; each input becomes <stem>.svg.
        #[arg(long, value_name = "DIR", default_value = "plots")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
