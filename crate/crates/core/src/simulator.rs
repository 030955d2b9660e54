//! Virtual-patient data generation.
//!
//! Four meals a day at random times with random glucose content and random
//! absorption-template mixtures, one insulin bolus per meal, Euler
//! integration of the minimal model on a fine grid, and glucose observations
//! every few minutes with optional measurement and meal-time noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::absorption::{AbsorptionModel, AbsorptionTemplate, BumpParams, MealEvent, TEMPLATES};
use crate::evaluation::EvalSetting;
use crate::ode::{rhs_unchecked, ControlSample, PatientParams, PhysioState};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MINUTES_PER_DAY: f64 = 1440.0;

/// A daily meal slot: time window (minutes after midnight) and glucose range (g).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MealSlot {
    pub start: f64,
    pub end: f64,
    pub min_grams: f64,
    pub max_grams: f64,
}

/// Breakfast, lunch, dinner and a late snack.
pub const DEFAULT_MEAL_SLOTS: [MealSlot; 4] = [
    MealSlot {
        start: 360.0,
        end: 540.0,
        min_grams: 5.0,
        max_grams: 65.0,
    },
    MealSlot {
        start: 660.0,
        end: 870.0,
        min_grams: 20.0,
        max_grams: 70.0,
    },
    MealSlot {
        start: 1020.0,
        end: 1200.0,
        min_grams: 40.0,
        max_grams: 100.0,
    },
    MealSlot {
        start: 1320.0,
        end: 1380.0,
        min_grams: 5.0,
        max_grams: 15.0,
    },
];

/// Absorption model that generates the data.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum GroundTruth {
    TemplateMixture { templates: [AbsorptionTemplate; 3] },
    Bump { b1: f64, b2: f64 },
}

impl Default for GroundTruth {
    fn default() -> Self {
        GroundTruth::TemplateMixture {
            templates: TEMPLATES,
        }
    }
}

impl GroundTruth {
    pub fn model(&self) -> Result<AbsorptionModel> {
        match *self {
            GroundTruth::TemplateMixture { templates } => {
                for t in &templates {
                    t.validate()?;
                }
                Ok(AbsorptionModel::TemplateMixture(templates))
            }
            GroundTruth::Bump { b1, b2 } => Ok(AbsorptionModel::Bump(BumpParams::new(b1, b2)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SimulationConfig {
    pub days: usize,
    pub meal_slots: Vec<MealSlot>,
    /// Blood volume used to turn grams into plasma concentration (dl).
    pub blood_volume_dl: f64,
    /// Standard deviation of bolus time around the meal (min).
    pub bolus_time_sd: f64,
    /// Glucose-to-insulin conversion distribution (g/U).
    pub conversion_mean: f64,
    pub conversion_sd: f64,
    /// Sampled conversions at or below this value are redrawn (g/U).
    pub conversion_floor: f64,
    /// Length of the square insulin absorption (min).
    pub insulin_duration: f64,
    /// Plasma concentration produced by one unit of insulin (μU/ml per U).
    pub insulin_to_concentration: f64,
    /// Spacing of glucose observations (min).
    pub observation_interval: f64,
    /// Euler step of the ground-truth integration (min).
    pub step: f64,
    /// Relative observation noise standard deviation.
    pub observation_noise_sd: f64,
    /// Meal-time recording noise (min).
    pub meal_time_noise_mean: f64,
    pub meal_time_noise_sd: f64,
    /// Days in the train, validation and test trajectories.
    pub split_days: [usize; 3],
    pub seed: u64,
    pub patient: PatientParams,
    pub ground_truth: GroundTruth,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            days: 28,
            meal_slots: DEFAULT_MEAL_SLOTS.to_vec(),
            blood_volume_dl: 50.0,
            bolus_time_sd: 10.0,
            conversion_mean: 7.0,
            conversion_sd: 1.0,
            conversion_floor: 3.0,
            insulin_duration: 30.0,
            // 1 U = 10^6 μU spread over 50 dl = 5000 ml.
            insulin_to_concentration: 200.0,
            observation_interval: 5.0,
            step: 0.1,
            observation_noise_sd: 0.05,
            meal_time_noise_mean: 5.0,
            meal_time_noise_sd: 2.5,
            split_days: [20, 4, 4],
            seed: 0,
            patient: PatientParams::default(),
            ground_truth: GroundTruth::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.patient.validate()?;
        self.ground_truth.model()?;
        let positive = [
            ("blood_volume_dl", self.blood_volume_dl),
            ("conversion_mean", self.conversion_mean),
            ("insulin_duration", self.insulin_duration),
            ("insulin_to_concentration", self.insulin_to_concentration),
            ("observation_interval", self.observation_interval),
            ("step", self.step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("bolus_time_sd", self.bolus_time_sd),
            ("conversion_sd", self.conversion_sd),
            ("conversion_floor", self.conversion_floor),
            ("observation_noise_sd", self.observation_noise_sd),
            ("meal_time_noise_sd", self.meal_time_noise_sd),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !self.meal_time_noise_mean.is_finite() {
            return Err(Error::NonFinite("meal_time_noise_mean"));
        }
        if self.conversion_floor >= self.conversion_mean + 5.0 * self.conversion_sd {
            return Err(Error::invalid(
                "conversion floor leaves no probability mass",
            ));
        }
        if self.days == 0 {
            return Err(Error::invalid("days must be positive"));
        }
        if self.split_days.iter().sum::<usize>() != self.days {
            return Err(Error::invalid(format!(
                "split days {:?} must sum to {}",
                self.split_days, self.days
            )));
        }
        for slot in &self.meal_slots {
            let ok = slot.start.is_finite()
                && slot.end.is_finite()
                && 0.0 <= slot.start
                && slot.start < slot.end
                && slot.end <= MINUTES_PER_DAY
                && 0.0 <= slot.min_grams
                && slot.min_grams <= slot.max_grams
                && slot.max_grams.is_finite();
            if !ok {
                return Err(Error::invalid(format!("invalid meal slot {slot:?}")));
            }
        }
        self.observations_per_day()?;
        self.steps_per_observation()?;
        Ok(())
    }

    pub fn observations_per_day(&self) -> Result<usize> {
        whole_ratio(
            MINUTES_PER_DAY,
            self.observation_interval,
            "observation interval",
        )
    }

    pub fn steps_per_observation(&self) -> Result<usize> {
        whole_ratio(self.observation_interval, self.step, "simulation step")
    }

    pub fn horizon(&self) -> f64 {
        self.days as f64 * MINUTES_PER_DAY
    }
}

fn whole_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let n = libm::round(r);
    if n < 1.0 || (r - n).abs() > 1e-9 * n {
        return Err(Error::invalid(format!("{what} {den} must divide {num}")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct InsulinEvent {
    pub time: f64,
    /// Units.
    pub dose: f64,
    /// Absorption duration (min).
    pub duration: f64,
}

/// Known insulin boluses and the unit bridge to plasma concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct InsulinSchedule {
    pub events: Vec<InsulinEvent>,
    pub units_to_concentration: f64,
}

impl InsulinSchedule {
    pub fn rate(&self, t: f64) -> f64 {
        insulin_control_ui(t, &self.events, self.units_to_concentration)
    }

    /// Boluses whose absorption overlaps `[from, to]`.
    pub fn restricted(&self, from: f64, to: f64) -> Self {
        Self {
            events: self
                .events
                .iter()
                .filter(|e| e.time + e.duration > from && e.time <= to)
                .copied()
                .collect(),
            units_to_concentration: self.units_to_concentration,
        }
    }
}

/// Square insulin appearance: `dose · k_I / duration` on `[time, time + duration)`.
pub fn insulin_control_ui(t: f64, events: &[InsulinEvent], units_to_concentration: f64) -> f64 {
    events
        .iter()
        .filter(|e| t >= e.time && t < e.time + e.duration)
        .map(|e| e.dose * units_to_concentration / e.duration)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Observation {
    pub time: f64,
    pub glucose: f64,
}

/// Noiseless state and controls at an observation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub time: f64,
    pub state: PhysioState,
    pub ug: f64,
    pub ui: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Observation index ranges of the three temporal splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitBounds {
    pub train: (usize, usize),
    pub validation: (usize, usize),
    pub test: (usize, usize),
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        let (a, b) = match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        };
        a..b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub setting: EvalSetting,
    pub observation_interval: f64,
    pub observations: Vec<Observation>,
    pub true_meals: Vec<MealEvent>,
    /// Meals as reported, with possibly noisy times; same order as `true_meals`.
    pub recorded_meals: Vec<MealEvent>,
    pub insulin: InsulinSchedule,
    pub truth: Vec<TruthSample>,
    pub splits: SplitBounds,
}

impl Dataset {
    pub fn split_len(&self, split: Split) -> usize {
        self.splits.range(split).len()
    }
}

pub fn grams_to_concentration(grams: f64, cfg: &SimulationConfig) -> f64 {
    grams * 1000.0 / cfg.blood_volume_dl
}

pub fn concentration_to_grams(concentration: f64, cfg: &SimulationConfig) -> f64 {
    concentration * cfg.blood_volume_dl / 1000.0
}

/// Uniform draw on the probability simplex via sorted uniforms.
fn simplex_point(rng: &mut Rng) -> [f64; 3] {
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    [lo, hi - lo, 1.0 - hi]
}

/// One meal per configured slot on `day`.
pub fn sample_meals(day: usize, cfg: &SimulationConfig, rng: &mut Rng) -> Vec<MealEvent> {
    let day_start = day as f64 * MINUTES_PER_DAY;
    cfg.meal_slots
        .iter()
        .map(|slot| {
            let time = day_start + uniform(rng, slot.start, slot.end);
            let grams = uniform(rng, slot.min_grams, slot.max_grams);
            let covariates = simplex_point(rng);
            MealEvent {
                time,
                covariates,
                glucose: grams_to_concentration(grams, cfg),
            }
        })
        .collect()
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bolus size for a meal of `grams` at a conversion of `grams_per_unit`.
pub fn bolus_dose(grams: f64, grams_per_unit: f64) -> f64 {
    grams / grams_per_unit
}

/// One bolus per meal, timed around the meal and sized from a sampled
/// glucose-to-insulin conversion.
pub fn sample_insulin_events(
    meals: &[MealEvent],
    cfg: &SimulationConfig,
    rng: &mut Rng,
) -> Vec<InsulinEvent> {
    let horizon = cfg.horizon();
    meals
        .iter()
        .map(|m| {
            let offset: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.bolus_time_sd;
            let conversion = loop {
                let c =
                    cfg.conversion_mean + cfg.conversion_sd * rng.sample::<f64, _>(StandardNormal);
                if c > cfg.conversion_floor {
                    break c;
                }
            };
            InsulinEvent {
                time: (m.time + offset).clamp(0.0, horizon),
                dose: bolus_dose(concentration_to_grams(m.glucose, cfg), conversion),
                duration: cfg.insulin_duration,
            }
        })
        .collect()
}

/// Relative measurement noise `y = G (1 + σ ε)`; identity when disabled.
pub fn apply_observation_noise(
    trace: &[f64],
    enabled: bool,
    cfg: &SimulationConfig,
    rng: &mut Rng,
) -> Vec<f64> {
    if !enabled {
        return trace.to_vec();
    }
    trace
        .iter()
        .map(|&g| g * (1.0 + cfg.observation_noise_sd * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Shifts recorded meal times by `N(mean, sd²)`; identity when disabled.
pub fn perturb_meal_times(
    events: &[MealEvent],
    enabled: bool,
    cfg: &SimulationConfig,
    rng: &mut Rng,
) -> Vec<MealEvent> {
    if !enabled {
        return events.to_vec();
    }
    let noise = Normal::new(cfg.meal_time_noise_mean, cfg.meal_time_noise_sd)
        .expect("validated noise parameters");
    events
        .iter()
        .map(|e| MealEvent {
            time: e.time + noise.sample(rng),
            ..*e
        })
        .collect()
}

/// Simulates the full horizon and assembles a dataset for one noise setting.
///
/// The underlying trajectory depends only on `cfg` (including the seed);
/// the setting only decides which noise is layered on top.
pub fn generate_dataset(cfg: &SimulationConfig, setting: EvalSetting) -> Result<Dataset> {
    cfg.validate()?;
    let truth_model = cfg.ground_truth.model()?;

    let mut events_rng = rng::stream(cfg.seed, rng::STREAM_EVENTS);
    let mut true_meals = Vec::with_capacity(cfg.days * cfg.meal_slots.len());
    let mut boluses = Vec::with_capacity(true_meals.capacity());
    for day in 0..cfg.days {
        let meals = sample_meals(day, cfg, &mut events_rng);
        boluses.extend(sample_insulin_events(&meals, cfg, &mut events_rng));
        true_meals.extend(meals);
    }
    let insulin = InsulinSchedule {
        events: boluses,
        units_to_concentration: cfg.insulin_to_concentration,
    };

    let per_day = cfg.observations_per_day()?;
    let n_obs = per_day * cfg.days;
    let stride = cfg.steps_per_observation()?;
    let steps = (n_obs - 1) * stride;
    let h = cfg.step;

    // Controls on the integration grid, accumulated meal by meal in event order.
    let mut ug = vec![0.0; steps + 1];
    for meal in &true_meals {
        let (start, end) = truth_model.support(meal);
        let first = libm::ceil(start / h).max(0.0) as usize;
        let last = (libm::ceil(end / h) as usize).min(steps + 1);
        for (k, slot) in ug.iter_mut().enumerate().take(last).skip(first) {
            *slot += truth_model.rate(k as f64 * h, meal);
        }
    }
    let ui: Vec<f64> = (0..=steps).map(|k| insulin.rate(k as f64 * h)).collect();

    let p = &cfg.patient;
    let mut x = p.basal_state();
    let mut truth = Vec::with_capacity(n_obs);
    for k in 0..=steps {
        if k % stride == 0 {
            truth.push(TruthSample {
                time: k as f64 * h,
                state: x,
                ug: ug[k],
                ui: ui[k],
            });
        }
        if k == steps {
            break;
        }
        x = x + rhs_unchecked(x, p, ControlSample::new(ug[k], ui[k])) * h;
        if !x.is_finite() {
            return Err(Error::BlowUp {
                step: k + 1,
                time: (k + 1) as f64 * h,
            });
        }
    }
    // Observation times on the coarse grid, exactly multiples of the interval.
    for (j, s) in truth.iter_mut().enumerate() {
        s.time = j as f64 * cfg.observation_interval;
    }

    let clean: Vec<f64> = truth.iter().map(|s| s.state.g).collect();
    let mut obs_rng = rng::stream(cfg.seed, rng::STREAM_OBSERVATION_NOISE);
    let noisy = apply_observation_noise(&clean, setting.observation_noise, cfg, &mut obs_rng);
    let observations = truth
        .iter()
        .zip(noisy)
        .map(|(s, glucose)| Observation {
            time: s.time,
            glucose,
        })
        .collect();

    let mut time_rng = rng::stream(cfg.seed, rng::STREAM_MEAL_TIME_NOISE);
    let recorded_meals =
        perturb_meal_times(&true_meals, setting.timestamp_noise, cfg, &mut time_rng);

    let [d_train, d_val, _] = cfg.split_days;
    let a = d_train * per_day;
    let b = (d_train + d_val) * per_day;
    Ok(Dataset {
        setting,
        observation_interval: cfg.observation_interval,
        observations,
        true_meals,
        recorded_meals,
        insulin,
        truth,
        splits: SplitBounds {
            train: (0, a),
            validation: (a, b),
            test: (b, n_obs),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conversion() {
        let cfg = SimulationConfig::default();
        assert_eq!(grams_to_concentration(0.0, &cfg), 0.0);
        assert_eq!(grams_to_concentration(50.0, &cfg), 1000.0);
        assert_eq!(grams_to_concentration(5.0, &cfg), 100.0);
    }

    #[test]
    fn bolus_arithmetic() {
        assert_eq!(bolus_dose(70.0, 7.0), 10.0);
        assert_eq!(bolus_dose(0.0, 6.3), 0.0);
    }

    #[test]
    fn zero_gram_meal_gets_zero_dose() {
        let cfg = SimulationConfig::default();
        let mut rng = rng::stream(1, 0);
        let meal = MealEvent::new(600.0, [1.0, 0.0, 0.0], 0.0).unwrap();
        let ev = sample_insulin_events(&[meal], &cfg, &mut rng);
        assert_eq!(ev[0].dose, 0.0);
        assert_eq!(ev[0].duration, 30.0);
    }

    #[test]
    fn insulin_square_is_zero_outside_and_additive() {
        let a = InsulinEvent {
            time: 100.0,
            dose: 3.0,
            duration: 30.0,
        };
        let b = InsulinEvent { time: 110.0, ..a };
        assert_eq!(insulin_control_ui(99.9, &[a], 200.0), 0.0);
        assert_eq!(insulin_control_ui(130.0, &[a], 200.0), 0.0);
        assert_eq!(insulin_control_ui(100.0, &[a], 200.0), 20.0);
        assert_eq!(insulin_control_ui(115.0, &[a, b], 200.0), 40.0);
    }

    #[test]
    fn insulin_square_integrates_to_dose_times_bridge() {
        // Exact midpoint quadrature on the pieces between breakpoints.
        let e = InsulinEvent {
            time: 17.3,
            dose: 4.2,
            duration: 30.0,
        };
        let breaks = [0.0, e.time, e.time + e.duration, 100.0];
        let integral: f64 = breaks
            .windows(2)
            .map(|w| (w[1] - w[0]) * insulin_control_ui(0.5 * (w[0] + w[1]), &[e], 200.0))
            .sum();
        assert!((integral - 4.2 * 200.0).abs() < 1e-9);
    }

    #[test]
    fn noise_disabled_is_identity() {
        let cfg = SimulationConfig::default();
        let mut rng = rng::stream(0, 1);
        let trace = [90.0, 120.0, 0.0];
        assert_eq!(
            apply_observation_noise(&trace, false, &cfg, &mut rng),
            trace
        );
        let noisy = apply_observation_noise(&trace, true, &cfg, &mut rng);
        assert_eq!(noisy[2], 0.0);
        let meals = [MealEvent::new(10.0, [0.2, 0.3, 0.5], 300.0).unwrap()];
        assert_eq!(perturb_meal_times(&meals, false, &cfg, &mut rng), meals);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimulationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.split_days = [20, 4, 3];
        assert!(cfg.validate().is_err());
        let cfg = SimulationConfig {
            step: 0.3,
            ..SimulationConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SimulationConfig {
            ground_truth: GroundTruth::Bump { b1: 0.1, b2: 0.05 },
            ..SimulationConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
