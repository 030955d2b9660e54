//! End-to-end fitting of absorption parameters.
//!
//! Each iteration samples a minibatch of forecast windows, estimates every
//! window's initial state from its warm-up observations, integrates the
//! minimal model across the targets, and differentiates the mean squared
//! error through the unrolled Euler steps. Patient parameters stay fixed.

mod adam;
mod adjoint;
mod window;

use alloc::format;
use alloc::vec::Vec;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use adjoint::{
    batch_loss_and_grad, forecast_window, forecast_windows, grad_loss, WindowForecast,
};
pub use window::{
    all_windows, sample_minibatch, sample_offsets, valid_window_count, window_in_split,
    TrainingWindow, WindowMeal,
};

use crate::absorption::{AbsorptionModel, ModelFamily};
use crate::evaluation::pooled_rmse_of;
use crate::ode::PatientParams;
use crate::rng;
use crate::simulator::{Dataset, Split};
use crate::{Error, Result};

/// How the unobserved insulin states are guessed before warm-up forcing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum WarmupGuess {
    /// Start warm-up from the basal insulin state.
    #[default]
    Basal,
    /// Start from basal `lookback` minutes before warm-up and replay the
    /// known insulin boluses up to the first warm-up observation.
    InsulinHistory { lookback: f64 },
}

impl WarmupGuess {
    pub fn lookback(&self) -> f64 {
        match *self {
            WarmupGuess::Basal => 0.0,
            WarmupGuess::InsulinHistory { lookback } => lookback,
        }
    }
}

/// Placement of the warm-up observations relative to the loss region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WindowAnatomy {
    /// Warm-up observations precede a full window of targets.
    #[default]
    Preceding,
    /// Warm-up observations are the first observations of the window.
    Inside,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Window length in observations.
    pub window_len: usize,
    /// Observations used to estimate the initial state.
    pub warmup_obs: usize,
    pub peak_lr: f64,
    pub ramp_iterations: usize,
    /// Euler step used for training and forecasting (min).
    pub dt_train: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub warmup_guess: WarmupGuess,
    pub window_anatomy: WindowAnatomy,
    /// Validation RMSE is computed every this many iterations.
    pub validation_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 512,
            window_len: 48,
            warmup_obs: 10,
            peak_lr: 0.2,
            ramp_iterations: 30,
            dt_train: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            warmup_guess: WarmupGuess::default(),
            window_anatomy: WindowAnatomy::Preceding,
            validation_every: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_obs == 0 || self.window_len <= self.warmup_obs {
            return Err(Error::invalid(format!(
                "need window_len > warmup_obs >= 1, got {} and {}",
                self.window_len, self.warmup_obs
            )));
        }
        if self.batch_size == 0 || self.validation_every == 0 {
            return Err(Error::invalid(
                "batch_size and validation_every must be positive",
            ));
        }
        if !(self.dt_train.is_finite() && self.dt_train > 0.0) {
            return Err(Error::invalid(format!(
                "dt_train must be positive, got {}",
                self.dt_train
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::invalid(format!(
                "peak_lr must be nonnegative, got {}",
                self.peak_lr
            )));
        }
        let lookback = self.warmup_guess.lookback();
        if !(lookback.is_finite() && lookback >= 0.0) {
            return Err(Error::invalid("warm-up lookback must be nonnegative"));
        }
        self.adam.validate()
    }

    /// Forecast targets per window.
    pub fn targets_per_window(&self) -> usize {
        match self.window_anatomy {
            WindowAnatomy::Preceding => self.window_len,
            WindowAnatomy::Inside => self.window_len - self.warmup_obs,
        }
    }

    /// Observations covered by one window including warm-up.
    pub fn window_span(&self) -> usize {
        self.warmup_obs + self.targets_per_window()
    }
}

/// One iteration of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub iteration: usize,
    /// Minibatch loss before the update.
    pub loss: f64,
    /// Validation RMSE after the update, when computed.
    pub val_rmse: Option<f64>,
    pub lr: f64,
}

pub fn mse_loss(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: observed.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::precondition("mse of empty series"));
    }
    let sse: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok(sse / predicted.len() as f64)
}

/// Linear warm-up to the peak rate, then a half-period cosine decay.
pub fn lr_schedule(iter: usize, cfg: &TrainingConfig) -> Result<f64> {
    if iter >= cfg.iterations {
        return Err(Error::precondition(format!(
            "iteration {iter} outside schedule of {}",
            cfg.iterations
        )));
    }
    let peak = cfg.peak_lr;
    let ramp = cfg.ramp_iterations;
    if iter < ramp {
        return Ok(peak * (iter + 1) as f64 / ramp as f64);
    }
    let progress = (iter - ramp) as f64 / (cfg.iterations - ramp) as f64;
    Ok(peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    /// Parameters with the lowest validation RMSE seen.
    pub model: AbsorptionModel,
    pub reports: Vec<LossReport>,
    /// Iteration after which `model` was taken (0 for the initialization).
    pub best_iteration: usize,
    pub best_val_rmse: f64,
}

/// Trains a freshly initialized model of `family`.
pub fn train(
    dataset: &Dataset,
    family: ModelFamily,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<TrainingOutcome> {
    if family == ModelFamily::TemplateMixture {
        return Err(Error::invalid("the template mixture is not trainable"));
    }
    train_from(
        dataset,
        AbsorptionModel::initial(family, cfg.seed),
        params,
        cfg,
    )
}

fn is_divergence(e: &Error) -> bool {
    match e {
        Error::BlowUp { .. } | Error::NonFinite(_) => true,
        Error::Window { source, .. } => is_divergence(source),
        _ => false,
    }
}

/// Trains starting from `initial`.
pub fn train_from(
    dataset: &Dataset,
    initial: AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    params.validate()?;
    let validation = all_windows(dataset, Split::Validation, cfg)?;
    let val_rmse = |m: &AbsorptionModel| pooled_rmse_of(&validation, m, params, cfg);

    let mut model = initial;
    let mut theta = model.trainable();
    let mut adam = AdamState::new(theta.len());
    let mut best = (model.clone(), 0, val_rmse(&model)?);
    let mut reports: Vec<LossReport> = Vec::with_capacity(cfg.iterations);
    let mut rng = rng::stream(cfg.seed, rng::STREAM_MINIBATCH);

    for it in 0..cfg.iterations {
        let diverged = |reports: &[LossReport]| Error::Diverged {
            iteration: it + 1,
            last: reports.last().copied(),
        };
        let lr = lr_schedule(it, cfg)?;
        let batch = sample_minibatch(dataset, cfg, &mut rng)?;
        let (loss, grad) = match batch_loss_and_grad(&batch, &model, params, cfg) {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => return Err(diverged(&reports)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(&reports));
        }
        let (next_adam, next_theta) = adam_step(&adam, &theta, &grad, lr, &cfg.adam)?;
        model = model
            .with_trainable(&next_theta)
            .map_err(|_| diverged(&reports))?;
        adam = next_adam;
        theta = next_theta;

        let done = it + 1;
        let val = if done % cfg.validation_every == 0 || done == cfg.iterations {
            match val_rmse(&model) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => return Err(diverged(&reports)),
                Err(e) if is_divergence(&e) => return Err(diverged(&reports)),
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        if let Some(v) = val {
            if v < best.2 {
                best = (model.clone(), done, v);
            }
        }
        reports.push(LossReport {
            iteration: done,
            loss,
            val_rmse: val,
            lr,
        });
    }
    Ok(TrainingOutcome {
        model: best.0,
        reports,
        best_iteration: best.1,
        best_val_rmse: best.2,
    })
}
