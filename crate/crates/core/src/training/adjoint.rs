//! Forecasting and reverse-mode gradients through the unrolled Euler steps.
//!
//! Meal rates are evaluated once per (meal, grid step) for a whole batch in a
//! [`RateTable`]; the per-window reverse sweeps accumulate the cotangent of
//! every table entry, and the model is then differentiated once per entry.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::window::TrainingWindow;
use super::{TrainingConfig, WarmupGuess};
use crate::absorption::{AbsorptionModel, GradScratch, MealEvent};
use crate::ode::{integrate_forced, rhs_unchecked, ControlSample, PatientParams, PhysioState};
use crate::{Error, Result};

/// Rates of one meal on a contiguous range of global grid steps.
struct Slot {
    event: MealEvent,
    first: i64,
    values: Vec<f64>,
    needed: Vec<bool>,
    cotangent: Vec<f64>,
}

impl Slot {
    fn index(&self, k: i64) -> Option<usize> {
        let i = k - self.first;
        (i >= 0 && (i as usize) < self.values.len()).then_some(i as usize)
    }
}

pub(crate) struct RateTable<'a> {
    model: &'a AbsorptionModel,
    dt: f64,
    slots: BTreeMap<usize, Slot>,
}

impl<'a> RateTable<'a> {
    pub(crate) fn new(model: &'a AbsorptionModel, dt: f64) -> Self {
        Self {
            model,
            dt,
            slots: BTreeMap::new(),
        }
    }

    fn require(&mut self, window: &TrainingWindow, k0: i64, steps: usize) {
        for m in &window.meals {
            let (start, end) = self.model.support(&m.event);
            let dt = self.dt;
            let slot = self.slots.entry(m.id).or_insert_with(|| {
                let first = libm::floor(start / dt) as i64 - 1;
                let len = libm::ceil((end - start) / dt) as usize + 3;
                Slot {
                    event: m.event,
                    first,
                    values: vec![0.0; len],
                    needed: vec![false; len],
                    cotangent: vec![0.0; len],
                }
            });
            let lo = k0.max(slot.first);
            let hi = (k0 + steps as i64).min(slot.first + slot.values.len() as i64);
            for k in lo..hi {
                slot.needed[(k - slot.first) as usize] = true;
            }
        }
    }

    fn evaluate(&mut self) {
        for slot in self.slots.values_mut() {
            for (i, v) in slot.values.iter_mut().enumerate() {
                if slot.needed[i] {
                    let t = (slot.first + i as i64) as f64 * self.dt;
                    *v = self.model.rate(t, &slot.event);
                }
            }
        }
    }

    fn ug(&self, window: &TrainingWindow, k: i64) -> f64 {
        let mut total = 0.0;
        for m in &window.meals {
            let slot = &self.slots[&m.id];
            if let Some(i) = slot.index(k) {
                total += slot.values[i];
            }
        }
        total
    }

    fn add_cotangent(&mut self, window: &TrainingWindow, k: i64, c: f64) {
        for m in &window.meals {
            let slot = self.slots.get_mut(&m.id).expect("required meal");
            if let Some(i) = slot.index(k) {
                slot.cotangent[i] += c;
            }
        }
    }

    fn backprop(&self, grad: &mut [f64]) {
        let mut scratch = GradScratch::default();
        for slot in self.slots.values() {
            for (i, &c) in slot.cotangent.iter().enumerate() {
                if c != 0.0 {
                    let t = (slot.first + i as i64) as f64 * self.dt;
                    self.model
                        .rate_gradient(t, &slot.event, c, grad, &mut scratch);
                }
            }
        }
    }
}

/// Grid layout of one window at step `dt`.
struct Layout {
    k0: i64,
    steps: usize,
    target_steps: Vec<usize>,
}

fn grid_index(t: f64, dt: f64) -> Result<i64> {
    let r = t / dt;
    let k = libm::round(r);
    if (r - k).abs() > 1e-6 {
        return Err(Error::precondition(
            "observation times must lie on the integration grid",
        ));
    }
    Ok(k as i64)
}

fn layout(window: &TrainingWindow, dt: f64) -> Result<Layout> {
    let k0 = grid_index(window.anchor_time(), dt)?;
    let target_steps = window
        .targets
        .iter()
        .map(|&(t, _)| grid_index(t, dt).map(|k| (k - k0) as usize))
        .collect::<Result<Vec<_>>>()?;
    let steps = target_steps[target_steps.len() - 1];
    Ok(Layout {
        k0,
        steps,
        target_steps,
    })
}

/// Estimated state at the window anchor from the warm-up observations.
pub(crate) fn initial_state(
    window: &TrainingWindow,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<PhysioState> {
    let insulin = |t: f64| ControlSample::new(0.0, window.insulin.rate(t));
    let (t_first, g_first) = window.warmup[0];
    let guess = match cfg.warmup_guess {
        WarmupGuess::Basal => params.basal_state(),
        WarmupGuess::InsulinHistory { lookback } => integrate_forced(
            params,
            insulin,
            &[(t_first - lookback, g_first), (t_first, g_first)],
            params.basal_state(),
            cfg.dt_train,
        )?,
    };
    integrate_forced(params, insulin, &window.warmup, guess, cfg.dt_train)
}

struct Pass {
    states: Vec<PhysioState>,
    ug: Vec<f64>,
}

fn forward(
    window: &TrainingWindow,
    lay: &Layout,
    table: &RateTable<'_>,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<Pass> {
    let h = cfg.dt_train;
    let mut x = initial_state(window, params, cfg)?;
    let mut states = Vec::with_capacity(lay.steps + 1);
    let mut ug = Vec::with_capacity(lay.steps + 1);
    states.push(x);
    for n in 0..lay.steps {
        let k = lay.k0 + n as i64;
        let u = ControlSample::new(table.ug(window, k), window.insulin.rate(k as f64 * h));
        ug.push(u.ug);
        x = x + rhs_unchecked(x, params, u) * h;
        if !x.is_finite() {
            return Err(Error::BlowUp {
                step: n + 1,
                time: (k + 1) as f64 * h,
            });
        }
        states.push(x);
    }
    ug.push(table.ug(window, lay.k0 + lay.steps as i64));
    Ok(Pass { states, ug })
}

/// Model forecast over a window's targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecast {
    /// Predicted glucose at each target time.
    pub glucose: Vec<f64>,
    /// Predicted meal appearance rate at each target time.
    pub ug: Vec<f64>,
}

fn build_table<'a>(
    windows: &[TrainingWindow],
    model: &'a AbsorptionModel,
    cfg: &TrainingConfig,
) -> Result<(RateTable<'a>, Vec<Layout>)> {
    let mut table = RateTable::new(model, cfg.dt_train);
    let mut layouts = Vec::with_capacity(windows.len());
    for w in windows {
        let lay = layout(w, cfg.dt_train).map_err(|e| e.in_window(w.start))?;
        table.require(w, lay.k0, lay.steps + 1);
        layouts.push(lay);
    }
    table.evaluate();
    Ok((table, layouts))
}

/// Forecasts a set of windows sharing one rate table.
pub fn forecast_windows(
    windows: &[TrainingWindow],
    model: &AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<Vec<WindowForecast>> {
    let (table, layouts) = build_table(windows, model, cfg)?;
    windows
        .iter()
        .zip(&layouts)
        .map(|(w, lay)| {
            let pass = forward(w, lay, &table, params, cfg).map_err(|e| e.in_window(w.start))?;
            Ok(WindowForecast {
                glucose: lay.target_steps.iter().map(|&n| pass.states[n].g).collect(),
                ug: lay.target_steps.iter().map(|&n| pass.ug[n]).collect(),
            })
        })
        .collect()
}

/// Predicted glucose at the window's target times.
pub fn forecast_window(
    window: &TrainingWindow,
    model: &AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<Vec<f64>> {
    let mut out = forecast_windows(core::slice::from_ref(window), model, params, cfg)?;
    Ok(out.pop().expect("one window").glucose)
}

/// Mean over windows of the per-window target MSE, and its gradient with
/// respect to the model's trainable parameters.
pub fn batch_loss_and_grad(
    windows: &[TrainingWindow],
    model: &AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<(f64, Vec<f64>)> {
    if windows.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let h = cfg.dt_train;
    let batch = windows.len() as f64;
    let (mut table, layouts) = build_table(windows, model, cfg)?;
    let mut loss = 0.0;
    for (w, lay) in windows.iter().zip(&layouts) {
        let pass = forward(w, lay, &table, params, cfg).map_err(|e| e.in_window(w.start))?;
        let scale = 2.0 / (lay.target_steps.len() as f64 * batch);
        let mut window_sse = 0.0;
        let (mut lg, mut lx, mut li) = (0.0, 0.0, 0.0);
        let mut next_target = lay.target_steps.len();
        for n in (1..=lay.steps).rev() {
            if next_target > 0 && lay.target_steps[next_target - 1] == n {
                next_target -= 1;
                let r = pass.states[n].g - w.targets[next_target].1;
                window_sse += r * r;
                lg += scale * r;
            }
            table.add_cotangent(w, lay.k0 + n as i64 - 1, h * lg);
            let x = pass.states[n - 1];
            let (g0, x0, i0) = (lg, lx, li);
            lg = g0 + h * (-params.c1 - x.x) * g0;
            lx = x0 + h * (-x.g * g0 - params.c2 * x0);
            li = i0 + h * (params.c3 * x0 - params.c4 * i0);
        }
        loss += window_sse / lay.target_steps.len() as f64;
    }
    let mut grad = vec![0.0; model.num_trainable()];
    table.backprop(&mut grad);
    Ok((loss / batch, grad))
}

/// Loss and gradient of a single window.
pub fn grad_loss(
    window: &TrainingWindow,
    model: &AbsorptionModel,
    params: &PatientParams,
    cfg: &TrainingConfig,
) -> Result<(f64, Vec<f64>)> {
    batch_loss_and_grad(core::slice::from_ref(window), model, params, cfg)
}
