use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use har_cli::stages::{self, RunContext};
use har_cli::{CliError, CliResult, Overrides, PipelineConfig, OUT_DIR_ENV};
use har_core::bnn::FrameworkMode;
use har_core::encoder::MetricMode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Sota,
    Tracked,
}

impl From<ModeArg> for FrameworkMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sota => FrameworkMode::Sota,
            ModeArg::Tracked => FrameworkMode::Tracked,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Triplet,
    Quadruplet,
}

impl From<MetricArg> for MetricMode {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Triplet => MetricMode::Triplet,
            MetricArg::Quadruplet => MetricMode::Quadruplet,
        }
    }
}

/// Activity recognition pipeline with tracked Bayesian embeddings.
///
/// Exit codes: 0 success, 1 I/O or format error, 2 config error,
/// 3 missing upstream artifact, 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "har", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides HAR_OUT_DIR and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Metric loss for the encoder; overrides the config.
    #[arg(long, global = true, value_enum)]
    metric: Option<MetricArg>,

    /// Framework mode for mode-specific stages.
    #[arg(long, global = true, value_enum, default_value = "tracked")]
    mode: ModeArg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset (or register the configured one).
    Generate,
    /// Train the variational encoder.
    TrainEncoder,
    /// Train the Bayesian classifier for --mode.
    TrainBnn,
    /// Score the test split (and the held-out class) for --mode.
    Evaluate {
        /// Score the held-out class as well; defaults to the config.
        #[arg(long)]
        with_unknown: Option<bool>,
    },
    /// SHAP attributions for --mode plus class-similarity tables.
    Explain,
    /// SHAP-driven feature pruning and retraining for --mode.
    Compress,
    /// Consolidated comparison of every evaluated mode and variant.
    Report,
    /// All stages in order.
    Run,
}

fn execute(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let overrides = Overrides { seed: cli.seed, out_dir: cli.out.clone(), metric: cli.metric.map(Into::into) };
    config.apply(&overrides, std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))?;
    let ctx = RunContext::new(config)?;
    let mode: FrameworkMode = cli.mode.into();
    match cli.command {
        Command::Generate => {
            let d = stages::generate(&ctx)?;
            println!(
                "train {} validation {} test {} unknown {}",
                d.train.len(),
                d.validation.len(),
                d.test.len(),
                d.unknown.len()
            );
        }
        Command::TrainEncoder => {
            stages::train_encoder_stage(&ctx)?;
            println!("encoder written to {}", ctx.path("encoder.ckpt").display());
        }
        Command::TrainBnn => {
            stages::train_bnn_stage(&ctx, mode)?;
            println!(
                "{mode} classifier written to {}",
                ctx.path(&format!("bnn_{}.ckpt", stages::mode_slug(mode))).display()
            );
        }
        Command::Evaluate { with_unknown } => {
            let s = stages::evaluate_stage(&ctx, mode, with_unknown.unwrap_or(ctx.config.evaluation.with_unknown))?;
            println!("{mode}: accuracy {:.4} threshold {:.4}", s.accuracy, s.ood_threshold);
            if let Some(a) = s.ood_auroc {
                println!("{mode}: OOD AUROC {a:.4}");
            }
        }
        Command::Explain => {
            let s = stages::explain_stage(&ctx, mode)?;
            let top: Vec<&str> = s.ranking.iter().take(5).map(|f| f.name.as_str()).collect();
            println!("{mode}: top features {}", top.join(", "));
        }
        Command::Compress => {
            let s = stages::compress_stage(&ctx, mode)?;
            let f = s.report.final_state();
            println!(
                "{mode}: kept {:?}, {} -> {} parameters, test accuracy {:.4} -> {:.4}",
                f.kept_dims,
                s.report.iterations[0].param_count,
                f.param_count,
                s.baseline_test_accuracy,
                s.compressed_test_accuracy
            );
        }
        Command::Report => print!("{}", stages::report_stage(&ctx)?),
        Command::Run => print!("{}", stages::run_all(&ctx, mode)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(inner) = &e {
                let mut src = std::error::Error::source(inner);
                while let Some(s) = src {
                    eprintln!("  caused by: {s}");
                    src = s.source();
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
