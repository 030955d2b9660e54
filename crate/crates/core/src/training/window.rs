use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use super::TrainingConfig;
use crate::absorption::{MealEvent, SQUARE_LEAD, SUPPORT_HORIZON};
use crate::rng::Rng;
use crate::simulator::{Dataset, InsulinSchedule, Split};
use crate::{Error, Result};

/// A recorded meal tagged with its index in the dataset's event list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowMeal {
    pub id: usize,
    pub event: MealEvent,
}

/// Warm-up observations, forecast targets and the inputs needed to run the
/// model across them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// Dataset index of the first warm-up observation.
    pub start: usize,
    pub warmup: Vec<(f64, f64)>,
    pub targets: Vec<(f64, f64)>,
    pub meals: Vec<WindowMeal>,
    pub insulin: InsulinSchedule,
}

impl TrainingWindow {
    pub fn new(
        start: usize,
        warmup: Vec<(f64, f64)>,
        targets: Vec<(f64, f64)>,
        meals: Vec<WindowMeal>,
        insulin: InsulinSchedule,
    ) -> Result<Self> {
        if warmup.is_empty() || targets.is_empty() {
            return Err(Error::precondition(
                "window needs warm-up and target observations",
            ));
        }
        let all = || warmup.iter().chain(targets.iter());
        if all().any(|&(t, y)| !(t.is_finite() && y.is_finite())) {
            return Err(Error::NonFinite("window observations"));
        }
        let times: Vec<f64> = all().map(|p| p.0).collect();
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::precondition(
                "window times must be strictly increasing",
            ));
        }
        let anchor = warmup[warmup.len() - 1].0;
        let spacing = targets[0].0 - anchor;
        for (j, &(t, _)) in targets.iter().enumerate() {
            let expect = anchor + (j + 1) as f64 * spacing;
            if (t - expect).abs() > 1e-9 * expect.abs().max(1.0) {
                return Err(Error::precondition(
                    "targets must be evenly spaced after the anchor",
                ));
            }
        }
        Ok(Self {
            start,
            warmup,
            targets,
            meals,
            insulin,
        })
    }

    /// Time of the last warm-up observation, where the forecast starts.
    pub fn anchor_time(&self) -> f64 {
        self.warmup[self.warmup.len() - 1].0
    }

    pub fn end_time(&self) -> f64 {
        self.targets[self.targets.len() - 1].0
    }

    pub fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.targets.iter().map(|p| p.1)
    }

    /// Builds the window whose first warm-up observation is `start`, with
    /// `warmup_obs` warm-up and `n_targets` target observations.
    pub fn from_dataset(
        dataset: &Dataset,
        start: usize,
        warmup_obs: usize,
        n_targets: usize,
        cfg: &TrainingConfig,
    ) -> Result<Self> {
        let span = warmup_obs + n_targets;
        let n = dataset.observations.len();
        if warmup_obs == 0 || start + span > n {
            return Err(Error::precondition(format!(
                "window [{start}, {}) outside {n} observations",
                start + span
            )));
        }
        let obs = &dataset.observations[start..start + span];
        let warmup: Vec<(f64, f64)> = obs[..warmup_obs]
            .iter()
            .map(|o| (o.time, o.glucose))
            .collect();
        let targets: Vec<(f64, f64)> = obs[warmup_obs..]
            .iter()
            .map(|o| (o.time, o.glucose))
            .collect();
        let anchor = warmup[warmup_obs - 1].0;
        let end = targets[n_targets - 1].0;
        let meals = dataset
            .recorded_meals
            .iter()
            .enumerate()
            .filter(|(_, m)| m.time - SQUARE_LEAD <= end && m.time + SUPPORT_HORIZON > anchor)
            .map(|(id, &event)| WindowMeal { id, event })
            .collect();
        let history = warmup[0].0 - cfg.warmup_guess.lookback();
        let insulin = dataset.insulin.restricted(history, end);
        Self::new(start, warmup, targets, meals, insulin)
    }
}

/// Number of window start positions within `len` observations.
pub fn valid_window_count(len: usize, cfg: &TrainingConfig) -> usize {
    (len + 1).saturating_sub(cfg.window_span())
}

fn checked_count(dataset: &Dataset, split: Split, cfg: &TrainingConfig) -> Result<usize> {
    let len = dataset.split_len(split);
    match valid_window_count(len, cfg) {
        0 => Err(Error::DatasetTooShort {
            needed: cfg.window_span(),
            available: len,
        }),
        c => Ok(c),
    }
}

/// Window at local position `offset` within `split`.
pub fn window_in_split(
    dataset: &Dataset,
    split: Split,
    offset: usize,
    cfg: &TrainingConfig,
) -> Result<TrainingWindow> {
    let base = dataset.splits.range(split).start;
    TrainingWindow::from_dataset(
        dataset,
        base + offset,
        cfg.warmup_obs,
        cfg.targets_per_window(),
        cfg,
    )
}

/// Every window of `split`, stride one observation.
pub fn all_windows(
    dataset: &Dataset,
    split: Split,
    cfg: &TrainingConfig,
) -> Result<Vec<TrainingWindow>> {
    let count = checked_count(dataset, split, cfg)?;
    (0..count)
        .map(|o| window_in_split(dataset, split, o, cfg))
        .collect()
}

/// Window start offsets drawn uniformly with replacement from `split`.
pub fn sample_offsets(
    dataset: &Dataset,
    split: Split,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let count = checked_count(dataset, split, cfg)?;
    Ok((0..cfg.batch_size)
        .map(|_| rng.random_range(0..count))
        .collect())
}

/// A training minibatch of `cfg.batch_size` windows.
pub fn sample_minibatch(
    dataset: &Dataset,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<Vec<TrainingWindow>> {
    sample_offsets(dataset, Split::Train, cfg, rng)?
        .into_iter()
        .map(|o| window_in_split(dataset, Split::Train, o, cfg))
        .collect()
}
