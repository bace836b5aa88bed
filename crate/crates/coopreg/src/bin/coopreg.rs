//! Experiment CLI: train registration models on the synthetic box-bump
//! families, evaluate them, run latent-space sweeps, and emit reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use coopreg::experiment::{
    emit_report, eval_experiment, latent_sweep, load_experiment_model, read_rows_csv,
    render_falsecolor, sweep_monotonicity, train_experiment, write_sweep_csv, ExperimentSpec,
};
use coopreg::field::warp_image;
use coopreg::metrics::DICE_THRESHOLD;
use coopreg::nets::primary_forward;
use coopreg::rawio;
use coopreg::Result;

#[derive(Parser)]
#[command(
    name = "coopreg",
    version,
    about = "Cooperative-autoencoder image registration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the dataset seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config snapshot, checkpoint and history CSV.
    Train(Common),
    /// Evaluate a trained checkpoint on the held-out test pairs; writes
    /// eval CSV and false-color figures, and prints the report row.
    Eval(Common),
    /// Latent-space sweep against the centered-bump target (h = 1 models).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Number of uniformly spaced source images.
        #[arg(long, default_value_t = 100)]
        sources: usize,
    },
    /// Combine eval rows from several experiment directories into one
    /// report (CSV plus aligned text table).
    Report(Common),
    /// Render false-color target/registered overlays for test pairs.
    Render {
        #[command(flatten)]
        common: Common,
        /// How many test pairs to render.
        #[arg(long, default_value_t = 3)]
        pairs: usize,
    },
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let bytes = std::fs::read(&common.config)?;
    let mut spec: ExperimentSpec = serde_json::from_slice(&bytes)?;
    if let Some(seed) = common.seed {
        spec.train.seed = seed;
        spec.dataset.seed = seed;
    }
    Ok(spec)
}

/// Config schema of the `report` subcommand: experiment output directories
/// to collect `eval.csv` rows from, and the output path of the report CSV.
#[derive(Deserialize)]
struct ReportConfig {
    experiments: Vec<PathBuf>,
    output: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let spec = load_spec(&common)?;
            println!(
                "training {} ({} iterations) -> {}",
                spec.name,
                spec.train.total_iterations,
                spec.output_dir.display()
            );
            train_experiment(&spec)?;
            println!("checkpoint written to {}", spec.checkpoint_dir().display());
        }
        Command::Eval(common) => {
            let spec = load_spec(&common)?;
            let model = load_experiment_model(&spec)?;
            let row = eval_experiment(&spec, &model)?;
            println!(
                "{}  {}  ae={:.2}%  dice={:.4}  landmark={:.2}%  runtime={:.5}s",
                row.dataset,
                row.method,
                row.ae_error_pct,
                row.dice,
                row.landmark_error_pct,
                row.test_runtime_sec
            );
        }
        Command::Sweep { common, sources } => {
            let spec = load_spec(&common)?;
            let model = load_experiment_model(&spec)?;
            let sweep = latent_sweep(&model, spec.dataset.family, sources)?;
            let csv_path = spec.output_dir.join("sweep.csv");
            write_sweep_csv(&sweep.rows, &csv_path)?;
            let strip_path = spec.output_dir.join("figures").join("sweep_strip.png");
            std::fs::create_dir_all(strip_path.parent().unwrap())?;
            rawio::save_png_rgb(&strip_path, &sweep.strip)?;
            println!(
                "sweep of {} sources: spearman rho = {:.4} ({} and {})",
                sweep.rows.len(),
                sweep_monotonicity(&sweep.rows),
                csv_path.display(),
                strip_path.display()
            );
        }
        Command::Report(common) => {
            let bytes = std::fs::read(&common.config)?;
            let config: ReportConfig = serde_json::from_slice(&bytes)?;
            let mut rows = Vec::new();
            for dir in &config.experiments {
                rows.extend(read_rows_csv(dir.join("eval.csv"))?);
            }
            emit_report(&rows, &config.output)?;
            println!(
                "report with {} rows -> {} (+ .txt)",
                rows.len(),
                config.output.display()
            );
        }
        Command::Render { common, pairs } => {
            let spec = load_spec(&common)?;
            let model = load_experiment_model(&spec)?;
            let dataset = spec.dataset.build()?;
            let fig_dir = spec.output_dir.join("figures");
            std::fs::create_dir_all(&fig_dir)?;
            for (i, pair) in dataset.test_pairs().take(pairs).enumerate() {
                let field =
                    primary_forward(&model.primary, &pair.source.image, &pair.target.image)?;
                let registered = warp_image(&pair.source.image, &field)?;
                let rgb = render_falsecolor(&pair.target.image, &registered, DICE_THRESHOLD)?;
                let path = fig_dir.join(format!("falsecolor_{i:02}.png"));
                rawio::save_png_rgb(&path, &rgb)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
