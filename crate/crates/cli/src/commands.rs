//! The pipeline steps behind each subcommand.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glucose_core::absorption::{AbsorptionModel, ModelFamily};
use glucose_core::evaluation::{
    build_results_table, rmse_all_windows, EvalSetting, ResultsTable, TrainedModel, WindowError,
};
use glucose_core::simulator::{generate_dataset, Split};
use glucose_core::training::{self, forecast_windows, TrainingOutcome, TrainingWindow};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, Checkpoint, ForecastRow, ModelRecord, StoredDataset, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulateSummary {
    pub days: usize,
    pub observations: usize,
    pub meals: usize,
    pub boluses: usize,
}

/// Generates a dataset for `cfg.setting` and writes it to `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    let ds = generate_dataset(&cfg.simulation, cfg.setting)?;
    formats::write_dataset(out, &ds, &cfg.simulation)?;
    Ok(SimulateSummary {
        days: cfg.simulation.days,
        observations: ds.observations.len(),
        meals: ds.true_meals.len(),
        boluses: ds.insulin.events.len(),
    })
}

pub fn checkpoint_path(out: &Path, family: ModelFamily) -> PathBuf {
    out.join(format!("{family}.checkpoint.json"))
}

pub fn log_path(out: &Path, family: ModelFamily) -> PathBuf {
    out.join(format!("{family}.log.csv"))
}

fn trainable(family: ModelFamily) -> Result<()> {
    if family == ModelFamily::TemplateMixture {
        return Err(CliError::Usage(
            "the ground-truth template mixture cannot be trained".into(),
        ));
    }
    Ok(())
}

fn checkpoint(stored: &StoredDataset, outcome: &TrainingOutcome, cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        format_version: FORMAT_VERSION,
        model: ModelRecord::from_model(&outcome.model),
        setting: stored.dataset.setting,
        dataset_fingerprint: stored.fingerprint.clone(),
        best_iteration: outcome.best_iteration,
        best_val_rmse: outcome.best_val_rmse,
        training: cfg.training.clone(),
    }
}

fn write_run(
    out: &Path,
    family: ModelFamily,
    ckpt: &Checkpoint,
    outcome: &TrainingOutcome,
) -> Result<()> {
    formats::write_json(&checkpoint_path(out, family), ckpt)?;
    formats::write_training_log(&log_path(out, family), &outcome.reports)
}

/// Trains one family on the dataset in `data` and writes checkpoint and log to `out`.
pub fn train(cfg: &RunConfig, data: &Path, family: ModelFamily, out: &Path) -> Result<Checkpoint> {
    trainable(family)?;
    let stored = formats::read_dataset(data)?;
    let patient = stored.manifest.simulation.patient;
    let outcome = training::train(&stored.dataset, family, &patient, &cfg.training)?;
    let ckpt = checkpoint(&stored, &outcome, cfg);
    write_run(out, family, &ckpt, &outcome)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvaluateOptions {
    /// Adds a row for the generating absorption model.
    pub ground_truth: bool,
    /// Writes per-window errors to `windows.csv`.
    pub dump_windows: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateReport {
    pub table: ResultsTable,
    pub warnings: Vec<String>,
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";
pub const WINDOWS_CSV: &str = "windows.csv";

fn write_results(out: &Path, table: &ResultsTable) -> Result<()> {
    formats::write_results_csv(&out.join(RESULTS_CSV), table)?;
    formats::write_text(
        &out.join(RESULTS_TXT),
        &formats::render_results_table(table),
    )
}

/// Test-split RMSE of each checkpoint on the dataset of its noise setting.
pub fn evaluate(
    cfg: &RunConfig,
    data: &[PathBuf],
    checkpoints: &[PathBuf],
    out: &Path,
    opts: EvaluateOptions,
) -> Result<EvaluateReport> {
    let mut warnings = Vec::new();
    let mut datasets: BTreeMap<EvalSetting, StoredDataset> = BTreeMap::new();
    for dir in data {
        let stored = formats::read_dataset(dir)?;
        let setting = stored.dataset.setting;
        match datasets.entry(setting) {
            Entry::Occupied(_) => warnings.push(format!(
                "{}: second dataset for {setting} ignored",
                dir.display()
            )),
            Entry::Vacant(slot) => {
                slot.insert(stored);
            }
        }
    }
    let mut models: Vec<(ModelFamily, EvalSetting, AbsorptionModel)> = Vec::new();
    for path in checkpoints {
        let ckpt = formats::read_checkpoint(path)?;
        let model = ckpt
            .model
            .to_model()
            .map_err(|e| CliError::format(path, e))?;
        match datasets.get(&ckpt.setting) {
            None => {
                warnings.push(format!(
                    "{}: no dataset for setting {}, skipped",
                    path.display(),
                    ckpt.setting
                ));
                continue;
            }
            Some(d) if d.fingerprint != ckpt.dataset_fingerprint => warnings.push(format!(
                "{}: trained on a different dataset than the {} data provided",
                path.display(),
                ckpt.setting
            )),
            Some(_) => {}
        }
        if models
            .iter()
            .any(|(f, s, _)| *f == ckpt.family() && *s == ckpt.setting)
        {
            warnings.push(format!(
                "{}: duplicate {} / {} checkpoint replaces the earlier one",
                path.display(),
                ckpt.family(),
                ckpt.setting
            ));
            models.retain(|(f, s, _)| !(*f == ckpt.family() && *s == ckpt.setting));
        }
        models.push((ckpt.family(), ckpt.setting, model));
    }
    if opts.ground_truth {
        for (setting, d) in &datasets {
            models.push((
                ModelFamily::TemplateMixture,
                *setting,
                d.manifest.simulation.ground_truth.model()?,
            ));
        }
    }

    let mut table = ResultsTable::new();
    let mut dump: Vec<(ModelFamily, EvalSetting, Vec<WindowError>)> = Vec::new();
    for (family, setting, model) in &models {
        let d = &datasets[setting];
        let patient = d.manifest.simulation.patient;
        let report = rmse_all_windows(model, &d.dataset, Split::Test, &patient, &cfg.training)?;
        table.insert(*family, *setting, report.rmse)?;
        if opts.dump_windows {
            dump.push((*family, *setting, report.windows));
        }
    }
    write_results(out, &table)?;
    if opts.dump_windows {
        dump.sort_by_key(|(f, s, _)| (*f, *s));
        formats::write_window_errors(&out.join(WINDOWS_CSV), &dump)?;
    }
    Ok(EvaluateReport { table, warnings })
}

/// Which absorption model drives a forecast.
#[derive(Debug, Clone, PartialEq)]
pub enum ForecastSource {
    Checkpoint(PathBuf),
    GroundTruth,
}

pub const FORECAST_CSV: &str = "forecast.csv";

/// Forecasts `horizon` minutes ahead of the observation at time `start`,
/// estimating the initial state from the observations up to `start`.
pub fn forecast(
    cfg: &RunConfig,
    data: &Path,
    source: &ForecastSource,
    start: f64,
    horizon: f64,
    out: &Path,
) -> Result<Vec<ForecastRow>> {
    let stored = formats::read_dataset(data)?;
    let ds = &stored.dataset;
    let model = match source {
        ForecastSource::Checkpoint(path) => {
            let ckpt = formats::read_checkpoint(path)?;
            ckpt.model
                .to_model()
                .map_err(|e| CliError::format(path, e))?
        }
        ForecastSource::GroundTruth => stored.manifest.simulation.ground_truth.model()?,
    };
    let interval = ds.observation_interval;
    let on_grid = |v: f64| {
        let r = v / interval;
        (r >= 0.0 && (r - r.round()).abs() < 1e-9).then_some(r.round() as usize)
    };
    let domain = |msg: String| CliError::Domain(glucose_core::Error::Precondition(msg));
    let anchor = on_grid(start)
        .ok_or_else(|| domain(format!("start {start} is not an observation time")))?;
    let targets = on_grid(horizon).filter(|&n| n > 0).ok_or_else(|| {
        domain(format!(
            "horizon {horizon} must be a positive multiple of {interval} min"
        ))
    })?;
    let warmup = cfg.training.warmup_obs;
    if anchor + 1 < warmup || anchor + targets >= ds.observations.len() {
        return Err(domain(format!(
            "window from {start} min for {horizon} min needs {warmup} earlier observations and data up to {} min",
            start + horizon
        )));
    }
    let window =
        TrainingWindow::from_dataset(ds, anchor + 1 - warmup, warmup, targets, &cfg.training)?;
    let patient = stored.manifest.simulation.patient;
    let fc = forecast_windows(
        std::slice::from_ref(&window),
        &model,
        &patient,
        &cfg.training,
    )?
    .pop()
    .expect("one window");
    let rows: Vec<ForecastRow> = (0..targets)
        .map(|j| {
            let k = anchor + 1 + j;
            ForecastRow {
                t_min: ds.observations[k].time,
                observed_mgdl: ds.observations[k].glucose,
                predicted_mgdl: fc.glucose[j],
                predicted_ug: fc.ug[j],
                true_ug: ds.truth[k].ug,
            }
        })
        .collect();
    formats::write_forecast(&out.join(FORECAST_CSV), &rows)?;
    Ok(rows)
}

pub fn dataset_dir(out: &Path, setting: EvalSetting) -> PathBuf {
    out.join("data").join(setting.label())
}

pub fn run_dir(out: &Path, setting: EvalSetting) -> PathBuf {
    out.join("models").join(setting.label())
}

/// Simulates all four noise settings, trains every family on each, and
/// evaluates the grid, running up to `jobs` trainings at once.
pub fn repro_table1(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<ResultsTable> {
    let mut stored = Vec::with_capacity(EvalSetting::ALL.len());
    for setting in EvalSetting::ALL {
        let dir = dataset_dir(out, setting);
        let ds = generate_dataset(&cfg.simulation, setting)?;
        formats::write_dataset(&dir, &ds, &cfg.simulation)?;
        stored.push(formats::read_dataset(&dir)?);
    }
    let runs: Vec<(ModelFamily, usize)> = ModelFamily::TRAINABLE
        .iter()
        .flat_map(|&f| (0..stored.len()).map(move |i| (f, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let patient = cfg.simulation.patient;
    let outcomes: Vec<TrainingOutcome> = pool.install(|| {
        runs.par_iter()
            .map(|&(family, i)| {
                training::train(&stored[i].dataset, family, &patient, &cfg.training)
            })
            .collect::<glucose_core::Result<Vec<_>>>()
    })?;

    let mut trained = Vec::with_capacity(runs.len());
    for (&(family, i), outcome) in runs.iter().zip(&outcomes) {
        let s = &stored[i];
        write_run(
            &run_dir(out, s.dataset.setting),
            family,
            &checkpoint(s, outcome, cfg),
            outcome,
        )?;
        trained.push(TrainedModel {
            setting: s.dataset.setting,
            model: outcome.model.clone(),
        });
    }
    let datasets: Vec<_> = stored.iter().map(|s| &s.dataset).collect();
    let table = build_results_table(&trained, &datasets, &patient, &cfg.training)?;
    write_results(out, &table)?;
    formats::write_text(&out.join("config.toml"), &cfg.to_toml())?;
    Ok(table)
}
