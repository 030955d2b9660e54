//! Bergman minimal model and its fixed-step Euler integration.
//!
//! The state is `(G, X, I)`: plasma glucose (mg/dl), remote insulin action
//! (1/min) and plasma insulin (μU/ml). Controls add glucose and insulin
//! appearance rates to the first and third equations.

use alloc::vec::Vec;
use core::ops::{Add, Mul};

use crate::{Error, Result};

/// Rate constants and basal levels of the minimal model.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PatientParams {
    /// Glucose effectiveness (1/min).
    pub c1: f64,
    /// Decay of remote insulin action (1/min).
    pub c2: f64,
    /// Gain from plasma insulin to insulin action (1/min per μU/ml).
    pub c3: f64,
    /// Plasma insulin clearance (1/min).
    pub c4: f64,
    /// Basal glucose (mg/dl).
    pub gb: f64,
    /// Basal insulin (μU/ml).
    pub ib: f64,
}

impl Default for PatientParams {
    /// A fast-clearing virtual patient whose noiseless glucose stays within
    /// physiological bounds under the default meal and bolus distributions.
    fn default() -> Self {
        Self {
            c1: 0.15,
            c2: 0.2,
            c3: 1.0e-4,
            c4: 0.3,
            gb: 92.0,
            ib: 11.0,
        }
    }
}

impl PatientParams {
    pub fn new(c1: f64, c2: f64, c3: f64, c4: f64, gb: f64, ib: f64) -> Result<Self> {
        let p = Self {
            c1,
            c2,
            c3,
            c4,
            gb,
            ib,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
            ("gb", self.gb),
            ("ib", self.ib),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(alloc::format!(
                    "patient parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The resting equilibrium `(Gb, 0, Ib)`.
    pub fn basal_state(&self) -> PhysioState {
        PhysioState::new(self.gb, 0.0, self.ib)
    }
}

/// Physiological state `(G, X, I)`, also used for its time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhysioState {
    pub g: f64,
    pub x: f64,
    pub i: f64,
}

impl PhysioState {
    pub const fn new(g: f64, x: f64, i: f64) -> Self {
        Self { g, x, i }
    }

    pub fn is_finite(&self) -> bool {
        self.g.is_finite() && self.x.is_finite() && self.i.is_finite()
    }
}

impl Add for PhysioState {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.g + rhs.g, self.x + rhs.x, self.i + rhs.i)
    }
}

impl Mul<f64> for PhysioState {
    type Output = Self;

    fn mul(self, h: f64) -> Self {
        Self::new(self.g * h, self.x * h, self.i * h)
    }
}

/// Exogenous appearance rates entering the model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlSample {
    /// Glucose appearance (mg/dl/min).
    pub ug: f64,
    /// Insulin appearance (μU/ml/min).
    pub ui: f64,
}

impl ControlSample {
    pub const ZERO: Self = Self { ug: 0.0, ui: 0.0 };

    pub const fn new(ug: f64, ui: f64) -> Self {
        Self { ug, ui }
    }
}

/// Projection `(G, X, I) ↦ (G, 0, 0)`: only glucose is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObservationOperator;

impl ObservationOperator {
    pub fn apply(&self, state: PhysioState) -> PhysioState {
        PhysioState::new(state.g, 0.0, 0.0)
    }

    /// The observed scalar, i.e. the glucose component.
    pub fn observe(&self, state: PhysioState) -> f64 {
        state.g
    }
}

/// Uniformly spaced states starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<PhysioState>,
}

impl Trajectory {
    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn final_state(&self) -> PhysioState {
        *self.states.last().expect("trajectory always holds x0")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Right-hand side of the minimal model.
pub fn bergman_rhs(
    state: PhysioState,
    params: &PatientParams,
    control: ControlSample,
) -> Result<PhysioState> {
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !(control.ug.is_finite() && control.ui.is_finite()) {
        return Err(Error::NonFinite("control"));
    }
    Ok(rhs_unchecked(state, params, control))
}

#[inline]
pub(crate) fn rhs_unchecked(
    state: PhysioState,
    p: &PatientParams,
    u: ControlSample,
) -> PhysioState {
    PhysioState {
        g: -p.c1 * (state.g - p.gb) - state.g * state.x + u.ug,
        x: -p.c2 * state.x + p.c3 * (state.i - p.ib),
        i: -p.c4 * (state.i - p.ib) + u.ui,
    }
}

/// Number of `dt` steps spanning `[t0, t_end]`; the span must be a whole
/// number of steps up to rounding.
pub(crate) fn step_count(t0: f64, t_end: f64, dt: f64) -> Result<usize> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(alloc::format!(
            "step must be positive, got {dt}"
        )));
    }
    if !(t0.is_finite() && t_end.is_finite()) || t_end < t0 {
        return Err(Error::precondition(alloc::format!(
            "integration interval [{t0}, {t_end}] is empty or non-finite"
        )));
    }
    let ratio = (t_end - t0) / dt;
    let n = libm::round(ratio);
    if (ratio - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::precondition(alloc::format!(
            "interval length {} is not a multiple of the step {dt}",
            t_end - t0
        )));
    }
    Ok(n as usize)
}

/// Forward Euler from `t0` to `t_end`; the control is sampled at the left
/// end of every step.
pub fn integrate<U>(
    params: &PatientParams,
    mut control: U,
    x0: PhysioState,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory>
where
    U: FnMut(f64) -> ControlSample,
{
    params.validate()?;
    let steps = step_count(t0, t_end, dt)?;
    if !x0.is_finite() {
        return Err(Error::BlowUp { step: 0, time: t0 });
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0);
    let mut x = x0;
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        x = x + rhs_unchecked(x, params, control(t)) * dt;
        if !x.is_finite() {
            return Err(Error::BlowUp {
                step: n + 1,
                time: t0 + (n + 1) as f64 * dt,
            });
        }
        states.push(x);
    }
    Ok(Trajectory { t0, dt, states })
}

/// Integrates `X` and `I` across the warm-up span while the glucose fed to
/// the right-hand side follows the piecewise-linear interpolation of the
/// observed values.
///
/// Returns the state at the last warm-up time with `G` set to the last
/// observation. Only `x_guess.x` and `x_guess.i` are used.
pub fn integrate_forced<U>(
    params: &PatientParams,
    mut control: U,
    warmup: &[(f64, f64)],
    x_guess: PhysioState,
    dt: f64,
) -> Result<PhysioState>
where
    U: FnMut(f64) -> ControlSample,
{
    params.validate()?;
    let (&(t_first, _), &(t_last, g_last)) = match (warmup.first(), warmup.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::precondition(
                "warm-up needs at least one observation",
            ))
        }
    };
    if warmup
        .iter()
        .any(|&(t, g)| !(t.is_finite() && g.is_finite()))
    {
        return Err(Error::NonFinite("warm-up observations"));
    }
    if warmup.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::precondition(
            "warm-up times must be strictly increasing",
        ));
    }
    let steps = step_count(t_first, t_last, dt)?;
    let mut x = x_guess;
    let mut seg = 0;
    for n in 0..steps {
        let t = t_first + n as f64 * dt;
        while seg + 2 < warmup.len() && warmup[seg + 1].0 <= t {
            seg += 1;
        }
        x.g = interpolate(warmup[seg], warmup[seg + 1], t);
        x = x + rhs_unchecked(x, params, control(t)) * dt;
        if !x.is_finite() {
            return Err(Error::BlowUp {
                step: n + 1,
                time: t_first + (n + 1) as f64 * dt,
            });
        }
    }
    x.g = g_last;
    Ok(x)
}

#[inline]
fn interpolate(a: (f64, f64), b: (f64, f64), t: f64) -> f64 {
    let w = (t - a.0) / (b.0 - a.0);
    a.1 + w * (b.1 - a.1)
}
