//! `cbct` — dataset simulation, model training, evaluation and
//! prior-misalignment sweeps for sparse-view interventional CBCT.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbct::config::AppConfig;
use cbct::error::CbctError;
use cbct::pipeline;

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "CBCT_THREADS";

#[derive(Parser)]
#[command(
    name = "cbct",
    about = "Sparse-view interventional CBCT toolkit: simulate, train, eval, sweep",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; omitted fields use desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of simulated interventional cases.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one model; the kind and misalignment mode come from the
    /// config unless overridden here.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Override the configured model kind
        /// (fdkconvnet | prior_net | prior_segnet).
        #[arg(long)]
        kind: Option<String>,
        /// Override the configured misalignment mode (mis | no-mis).
        #[arg(long)]
        mode: Option<String>,
        /// Continue from an existing checkpoint, keeping epoch numbering.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints (plus the raw FDK baseline) on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated checkpoint paths; the literal entry `fdk`
        /// stands for the always-included baseline.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Prior rotation in degrees applied at evaluation time.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        alpha: f64,
    },
    /// Median/IQR of per-slice RMSE versus prior rotation.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Comma-separated rotation angles; defaults to the config grid.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Vec<f64>,
    },
}

fn load_config(common: &CommonArgs) -> Result<AppConfig, CbctError> {
    let mut config = match &common.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn checkpoint_paths(models: &[String]) -> Vec<PathBuf> {
    models
        .iter()
        .filter(|m| m.as_str() != pipeline::FDK_TAG && !m.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn init_threads() {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn run() -> Result<(), CbctError> {
    let cli = Cli::parse();
    init_threads();
    match cli.command {
        Command::Simulate { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::cmd_simulate(&config, &common.out)?;
            println!(
                "simulated {} cases into {}",
                summary.n_cases,
                common.out.display()
            );
        }
        Command::Train {
            common,
            dataset,
            kind,
            mode,
            resume,
        } => {
            let mut config = load_config(&common)?;
            if let Some(kind) = kind {
                config.train.kind = kind.parse()?;
            }
            if let Some(mode) = mode {
                config.train.mode = match mode.as_str() {
                    "mis" => cbct::augment::MisalignMode::Mis,
                    "no-mis" => cbct::augment::MisalignMode::NoMis,
                    other => {
                        return Err(CbctError::Config(format!(
                            "unknown misalignment mode '{other}' (want mis or no-mis)"
                        )));
                    }
                };
            }
            let summary = pipeline::cmd_train(&config, &dataset, &common.out, resume.as_deref())?;
            println!(
                "trained {} for {} epochs (best val total {:.6} at epoch {}); checkpoint {}",
                summary.tag,
                summary.epochs_completed,
                summary.best_val_total,
                summary.best_epoch,
                summary.checkpoint.display()
            );
        }
        Command::Eval {
            common,
            dataset,
            models,
            alpha,
        } => {
            let config = load_config(&common)?;
            let ckpts = checkpoint_paths(&models);
            let summary = pipeline::cmd_eval(&config, &dataset, &ckpts, &common.out, alpha)?;
            println!("wrote {} metric rows to {}", summary.n_rows, summary.metrics_path.display());
            for agg in &summary.aggregates {
                println!(
                    "{:<24} SSIM {:6.2} ± {:5.2} %   PSNR {:6.2} ± {:5.2} dB   RMSE {:8.2} ± {:7.2} HU   (n={})",
                    agg.model,
                    agg.ssim_pct_mean,
                    agg.ssim_pct_std,
                    agg.psnr_db_mean,
                    agg.psnr_db_std,
                    agg.rmse_hu_mean,
                    agg.rmse_hu_std,
                    agg.n_slices
                );
            }
            for w in &summary.wilcoxon {
                println!(
                    "wilcoxon {} vs {}: p = {:.6} (n={})",
                    w.model_a, w.model_b, w.p_value, w.n
                );
            }
        }
        Command::Sweep {
            common,
            dataset,
            models,
            alphas,
        } => {
            let config = load_config(&common)?;
            let ckpts = checkpoint_paths(&models);
            let grid = if alphas.is_empty() {
                config.sweep.alphas()
            } else {
                alphas
            };
            let summary = pipeline::cmd_sweep(&config, &dataset, &ckpts, &common.out, &grid)?;
            println!(
                "swept {} (model, alpha) pairs into {}",
                summary.rows.len(),
                summary.sweep_path.display()
            );
        }
    }
    Ok(())
}

fn exit_code_for(err: &CbctError) -> u8 {
    match err {
        CbctError::Config(_) | CbctError::InvalidArgument(_) => 2,
        CbctError::InvalidData(_) | CbctError::Io { .. } => 3,
        CbctError::TrainingDiverged { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}
