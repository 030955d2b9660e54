use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glucose_cli::commands::{self, EvaluateOptions, ForecastSource};
use glucose_cli::formats::render_results_table;
use glucose_cli::{CliError, Result, RunConfig};
use glucose_core::absorption::ModelFamily;
use glucose_core::evaluation::EvalSetting;

/// Hybrid glucose-insulin modelling: simulate a virtual patient, learn meal
/// absorption, and evaluate forecasts.
#[derive(Debug, Parser)]
#[command(name = "glucose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for simulation and training, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $GLUCOSE_OUTPUT_ROOT/<command>, else the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "GLUCOSE_OUTPUT_ROOT", hide_env_values = true)]
    output_root: Option<PathBuf>,
    /// Euler step for training and forecasting (min), overriding the config.
    #[arg(long)]
    dt_train: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a virtual-patient dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Noise setting: exact-exact, exact-noisy, noisy-exact or noisy-noisy.
        #[arg(long, value_parser = parse_setting)]
        setting: Option<EvalSetting>,
    },
    /// Fit one absorption model family to a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// neural, bump or square.
        #[arg(long, value_parser = parse_family)]
        family: ModelFamily,
    },
    /// Forecast RMSE over every test window for each checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Dataset directories, one per noise setting.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Checkpoints written by `train`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Also evaluate the generating absorption model.
        #[arg(long)]
        ground_truth: bool,
        /// Write per-window errors to windows.csv.
        #[arg(long)]
        dump_windows: bool,
    },
    /// Forecast from one time point over a chosen horizon.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(
            long,
            required_unless_present = "ground_truth",
            conflicts_with = "ground_truth"
        )]
        checkpoint: Option<PathBuf>,
        /// Use the generating absorption model instead of a checkpoint.
        #[arg(long)]
        ground_truth: bool,
        /// Forecast origin: time of the last warm-up observation (min).
        #[arg(long)]
        start: f64,
        /// Forecast length (min).
        #[arg(long, default_value_t = 240.0)]
        horizon: f64,
    },
    /// Simulate, train and evaluate the full model × noise-setting grid.
    #[command(name = "repro-table1")]
    ReproTable1 {
        #[command(flatten)]
        common: Common,
        /// Training runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn parse_setting(s: &str) -> std::result::Result<EvalSetting, String> {
    EvalSetting::parse(s).ok_or_else(|| {
        format!(
            "unknown setting `{s}` (expected exact-exact, exact-noisy, noisy-exact or noisy-noisy)"
        )
    })
}

fn parse_family(s: &str) -> std::result::Result<ModelFamily, String> {
    match ModelFamily::parse(s) {
        Some(f) if f != ModelFamily::TemplateMixture => Ok(f),
        _ => Err(format!(
            "unknown family `{s}` (expected neural, bump or square)"
        )),
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply_seed(self.seed);
        if let Some(dt) = self.dt_train {
            cfg.training.dt_train = dt;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig, command: &str) -> PathBuf {
        match (&self.out, &self.output_root) {
            (Some(out), _) => out.clone(),
            (None, Some(root)) => root.join(command),
            (None, None) => cfg.output_dir.join(command),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, setting } => {
            let mut cfg = common.load()?;
            if let Some(s) = setting {
                cfg.setting = s;
            }
            let out = common.out_dir(&cfg, "simulate");
            let s = commands::simulate(&cfg, &out)?;
            println!(
                "simulated {} days ({}): {} observations, {} meals, {} boluses -> {}",
                s.days,
                cfg.setting,
                s.observations,
                s.meals,
                s.boluses,
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            family,
        } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg, "train");
            let ckpt = commands::train(&cfg, &data, family, &out)?;
            println!(
                "{family}: best validation RMSE {:.4} mg/dl at iteration {} -> {}",
                ckpt.best_val_rmse,
                ckpt.best_iteration,
                commands::checkpoint_path(&out, family).display()
            );
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            ground_truth,
            dump_windows,
        } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg, "evaluate");
            if checkpoint.is_empty() && !ground_truth {
                return Err(CliError::Usage(
                    "give at least one --checkpoint or --ground-truth".into(),
                ));
            }
            let report = commands::evaluate(
                &cfg,
                &data,
                &checkpoint,
                &out,
                EvaluateOptions {
                    ground_truth,
                    dump_windows,
                },
            )?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", render_results_table(&report.table));
        }
        Command::Forecast {
            common,
            data,
            checkpoint,
            ground_truth,
            start,
            horizon,
        } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg, "forecast");
            let source = match (checkpoint, ground_truth) {
                (Some(p), false) => ForecastSource::Checkpoint(p),
                _ => ForecastSource::GroundTruth,
            };
            let rows = commands::forecast(&cfg, &data, &source, start, horizon, &out)?;
            println!(
                "{} forecast points -> {}",
                rows.len(),
                out.join(commands::FORECAST_CSV).display()
            );
        }
        Command::ReproTable1 { common, jobs } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg, "repro-table1");
            let table = commands::repro_table1(&cfg, &out, jobs)?;
            print!("{}", render_results_table(&table));
            println!(
                "results -> {}",
                Path::new(&out).join(commands::RESULTS_CSV).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
