//! Windowed forecast error and the model × noise-setting results grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::absorption::{AbsorptionModel, ModelFamily};
use crate::ode::PatientParams;
use crate::simulator::{Dataset, Split};
use crate::training::{all_windows, forecast_windows, TrainingConfig, TrainingWindow};
use crate::{Error, Result};

/// Which noise sources are applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EvalSetting {
    pub timestamp_noise: bool,
    pub observation_noise: bool,
}

impl EvalSetting {
    pub const EXACT: Self = Self::new(false, false);

    /// Column order of the results grid.
    pub const ALL: [Self; 4] = [
        Self::new(false, false),
        Self::new(false, true),
        Self::new(true, false),
        Self::new(true, true),
    ];

    pub const fn new(timestamp_noise: bool, observation_noise: bool) -> Self {
        Self {
            timestamp_noise,
            observation_noise,
        }
    }

    /// `"{timestamps}-{observations}"`, e.g. `exact-noisy`.
    pub fn label(self) -> &'static str {
        match (self.timestamp_noise, self.observation_noise) {
            (false, false) => "exact-exact",
            (false, true) => "exact-noisy",
            (true, false) => "noisy-exact",
            (true, true) => "noisy-noisy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.label() == s)
    }
}

impl core::fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}

/// Squared-error summary of one forecast window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowError {
    /// Dataset index of the first warm-up observation.
    pub start: usize,
    pub anchor_time: f64,
    pub sse: f64,
    pub count: usize,
}

impl WindowError {
    pub fn mse(&self) -> f64 {
        self.sse / self.count as f64
    }

    pub fn rmse(&self) -> f64 {
        libm::sqrt(self.mse())
    }
}

/// Root of the squared error pooled over every timestep of every window.
pub fn pooled_rmse(errors: &[WindowError]) -> f64 {
    let sse: f64 = errors.iter().map(|e| e.sse).sum();
    let n: usize = errors.iter().map(|e| e.count).sum();
    if n == 0 {
        return 0.0;
    }
    libm::sqrt(sse / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    /// Pooled over all windows and timesteps.
    pub rmse: f64,
    pub windows: Vec<WindowError>,
}

impl RmseReport {
    /// Alternative summary: mean of per-window RMSEs.
    pub fn mean_window_rmse(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        self.windows.iter().map(WindowError::rmse).sum::<f64>() / self.windows.len() as f64
    }
}

/// Per-window errors of `model` on the given windows.
pub fn window_errors(
    windows: &[TrainingWindow],
    model: &AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<Vec<WindowError>> {
    let forecasts = forecast_windows(windows, model, params, cfg)?;
    Ok(windows
        .iter()
        .zip(forecasts)
        .map(|(w, f)| WindowError {
            start: w.start,
            anchor_time: w.anchor_time(),
            sse: f
                .glucose
                .iter()
                .zip(w.observed())
                .map(|(p, o)| (p - o) * (p - o))
                .sum(),
            count: w.targets.len(),
        })
        .collect())
}

pub(crate) fn pooled_rmse_of(
    windows: &[TrainingWindow],
    model: &AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<f64> {
    Ok(pooled_rmse(&window_errors(windows, model, params, cfg)?))
}

/// Forecast RMSE over every window of `split` (stride one observation).
pub fn rmse_all_windows(
    model: &AbsorptionModel,
    dataset: &Dataset,
    split: Split,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<RmseReport> {
    cfg.validate()?;
    let windows = all_windows(dataset, split, cfg)?;
    let errors = window_errors(&windows, model, params, cfg)?;
    Ok(RmseReport {
        rmse: pooled_rmse(&errors),
        windows: errors,
    })
}

/// Test RMSE per (model family, noise setting).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    cells: BTreeMap<(ModelFamily, EvalSetting), f64>,
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, family: ModelFamily, setting: EvalSetting, rmse: f64) -> Result<()> {
        if !(rmse.is_finite() && rmse >= 0.0) {
            return Err(Error::invalid(format!(
                "RMSE must be finite and nonnegative, got {rmse}"
            )));
        }
        self.cells.insert((family, setting), rmse);
        Ok(())
    }

    pub fn get(&self, family: ModelFamily, setting: EvalSetting) -> Option<f64> {
        self.cells.get(&(family, setting)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModelFamily, EvalSetting, f64)> + '_ {
        self.cells.iter().map(|(&(f, s), &v)| (f, s, v))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// A trained model tagged with the setting whose data it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub setting: EvalSetting,
    pub model: AbsorptionModel,
}

/// Evaluates each trained family on the test split of its own setting.
pub fn build_results_table(
    models: &[TrainedModel],
    datasets: &[&Dataset],
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<ResultsTable> {
    let mut table = ResultsTable::new();
    for family in ModelFamily::TRAINABLE {
        for setting in EvalSetting::ALL {
            let cell = || format!("{family} / {setting}");
            let model = models
                .iter()
                .find(|m| m.setting == setting && m.model.family() == family)
                .ok_or_else(|| Error::MissingCell(format!("no model for {}", cell())))?;
            let dataset = datasets
                .iter()
                .find(|d| d.setting == setting)
                .ok_or_else(|| Error::MissingCell(format!("no dataset for {}", cell())))?;
            let report = rmse_all_windows(&model.model, dataset, Split::Test, params, cfg)?;
            table.insert(family, setting, report.rmse)?;
        }
    }
    Ok(table)
}
