//! Meal events and glucose absorption-rate functions.
//!
//! Every meal contributes a rate `a_i(t)` (mg/dl/min) and the glucose control
//! is their sum. Rates are exactly zero outside a finite support: from the
//! meal time (or [`SQUARE_LEAD`] minutes earlier for the sigmoid square) up to
//! [`SUPPORT_HORIZON`] minutes after it.
//!
//! Trainable families expose an unconstrained parameter vector θ:
//! square `[ln w, ln k]`, bump `[ln b1, softplus⁻¹(b2 − b1)]`, and the flat
//! network parameters for the neural model.

use alloc::vec::Vec;

use crate::math::{sigmoid, softplus, softplus_inverse};
use crate::nn::{ForwardCache, Mlp, ScalingSpec, INPUTS};
use crate::{Error, Result};

/// Minutes after a meal beyond which every rate is zero.
pub const SUPPORT_HORIZON: f64 = 480.0;
/// Minutes before a meal at which the sigmoid square is cut to zero.
pub const SQUARE_LEAD: f64 = 60.0;
/// Number of samples in the ground-truth smoothing average.
pub const SMOOTHING_POINTS: usize = 50;
/// Length of the ground-truth smoothing look-back (min).
pub const SMOOTHING_SPAN: f64 = 5.0;

/// A meal at `time` (min) with mixture covariates and glucose content
/// expressed as plasma concentration (mg/dl).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MealEvent {
    pub time: f64,
    pub covariates: [f64; 3],
    pub glucose: f64,
}

impl MealEvent {
    pub fn new(time: f64, covariates: [f64; 3], glucose: f64) -> Result<Self> {
        let e = Self {
            time,
            covariates,
            glucose,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.time.is_finite() {
            return Err(Error::NonFinite("meal time"));
        }
        if !(self.glucose.is_finite() && self.glucose >= 0.0) {
            return Err(Error::invalid(
                "meal glucose must be finite and nonnegative",
            ));
        }
        if self
            .covariates
            .iter()
            .any(|m| !(m.is_finite() && *m >= 0.0))
        {
            return Err(Error::invalid(
                "meal covariates must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    #[inline]
    fn elapsed(&self, t: f64) -> f64 {
        t - self.time
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareParams {
    width: f64,
    sharpness: f64,
}

impl SquareParams {
    pub const DEFAULT_SHARPNESS: f64 = 0.5;

    pub fn new(width: f64, sharpness: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0 && sharpness.is_finite() && sharpness > 0.0) {
            return Err(Error::invalid(alloc::format!(
                "square needs positive width and sharpness, got w = {width}, k = {sharpness}"
            )));
        }
        Ok(Self { width, sharpness })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpParams {
    b1: f64,
    b2: f64,
}

impl BumpParams {
    pub fn new(b1: f64, b2: f64) -> Result<Self> {
        if !(b1.is_finite() && b2.is_finite() && b1 > 0.0 && b1 < b2) {
            return Err(Error::invalid(alloc::format!(
                "bump needs 0 < b1 < b2, got b1 = {b1}, b2 = {b2}"
            )));
        }
        Ok(Self { b1, b2 })
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    /// `1/b1 − 1/b2`, the integral of the unnormalized bump.
    pub fn normalization(&self) -> f64 {
        1.0 / self.b1 - 1.0 / self.b2
    }

    /// Minutes from onset to the maximum of the bump.
    pub fn peak_time(&self) -> f64 {
        libm::log(self.b2 / self.b1) / (self.b2 - self.b1)
    }

    /// Unit-integral bump shape at elapsed time `tau`.
    #[inline]
    fn shape(&self, tau: f64) -> f64 {
        if tau < 0.0 {
            return 0.0;
        }
        (libm::exp(-self.b1 * tau) - libm::exp(-self.b2 * tau)) / self.normalization()
    }
}

/// A delayed, unit-integral bump.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AbsorptionTemplate {
    pub b1: f64,
    pub b2: f64,
    pub delay: f64,
}

/// Regular, fast and slow absorption.
pub const TEMPLATES: [AbsorptionTemplate; 3] = [
    AbsorptionTemplate {
        b1: 0.04,
        b2: 0.09,
        delay: 5.0,
    },
    AbsorptionTemplate {
        b1: 0.08,
        b2: 0.13,
        delay: 5.0,
    },
    AbsorptionTemplate {
        b1: 0.03,
        b2: 0.04,
        delay: 30.0,
    },
];

impl AbsorptionTemplate {
    pub fn validate(&self) -> Result<()> {
        BumpParams::new(self.b1, self.b2)?;
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(Error::invalid("template delay must be nonnegative"));
        }
        Ok(())
    }

    /// Unit-integral delayed bump at elapsed time `tau`.
    #[inline]
    pub fn shape(&self, tau: f64) -> f64 {
        let s = tau - self.delay;
        if s < 0.0 {
            return 0.0;
        }
        (libm::exp(-self.b1 * s) - libm::exp(-self.b2 * s)) / (1.0 / self.b1 - 1.0 / self.b2)
    }
}

/// Network-backed absorption: `g · output_scale · transform(net(τ, m))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralAbsorption {
    pub net: Mlp,
    pub scaling: ScalingSpec,
}

impl NeuralAbsorption {
    pub fn new(net: Mlp, scaling: ScalingSpec) -> Result<Self> {
        if net.input_dim() != INPUTS {
            return Err(Error::invalid("absorption network must take 4 inputs"));
        }
        scaling.validate()?;
        Ok(Self { net, scaling })
    }

    #[inline]
    fn input(&self, tau: f64, e: &MealEvent) -> [f64; INPUTS] {
        let s = &self.scaling.input_scale;
        [
            tau * s[0],
            e.covariates[0] * s[1],
            e.covariates[1] * s[2],
            e.covariates[2] * s[3],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelFamily {
    Neural,
    Bump,
    Square,
    TemplateMixture,
}

impl ModelFamily {
    /// Families that are fitted to data, in results-table row order.
    pub const TRAINABLE: [ModelFamily; 3] =
        [ModelFamily::Neural, ModelFamily::Bump, ModelFamily::Square];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Neural => "neural",
            ModelFamily::Bump => "bump",
            ModelFamily::Square => "square",
            ModelFamily::TemplateMixture => "template_mixture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "neural" => Some(ModelFamily::Neural),
            "bump" => Some(ModelFamily::Bump),
            "square" => Some(ModelFamily::Square),
            "template_mixture" | "truth" => Some(ModelFamily::TemplateMixture),
            _ => None,
        }
    }
}

impl core::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AbsorptionModel {
    Square(SquareParams),
    Bump(BumpParams),
    TemplateMixture([AbsorptionTemplate; 3]),
    Neural(NeuralAbsorption),
}

/// Scratch buffers reused across gradient evaluations of the neural model.
#[derive(Debug, Clone, Default)]
pub struct GradScratch {
    cache: ForwardCache,
    input_grad: [f64; INPUTS],
}

impl AbsorptionModel {
    /// Starting point for training a family.
    pub fn initial(family: ModelFamily, seed: u64) -> Self {
        match family {
            ModelFamily::Square => AbsorptionModel::Square(
                SquareParams::new(60.0, SquareParams::DEFAULT_SHARPNESS).expect("valid"),
            ),
            ModelFamily::Bump => AbsorptionModel::Bump(BumpParams::new(0.02, 0.05).expect("valid")),
            ModelFamily::TemplateMixture => AbsorptionModel::TemplateMixture(TEMPLATES),
            ModelFamily::Neural => AbsorptionModel::Neural(NeuralAbsorption {
                net: Mlp::init(seed),
                scaling: ScalingSpec::default(),
            }),
        }
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            AbsorptionModel::Square(_) => ModelFamily::Square,
            AbsorptionModel::Bump(_) => ModelFamily::Bump,
            AbsorptionModel::TemplateMixture(_) => ModelFamily::TemplateMixture,
            AbsorptionModel::Neural(_) => ModelFamily::Neural,
        }
    }

    /// Interval `[start, end)` outside of which the rate for `e` is zero.
    pub fn support(&self, e: &MealEvent) -> (f64, f64) {
        let lead = match self {
            AbsorptionModel::Square(_) => SQUARE_LEAD,
            _ => 0.0,
        };
        (e.time - lead, e.time + SUPPORT_HORIZON)
    }

    /// Absorption rate of meal `e` at time `t` (mg/dl/min).
    pub fn rate(&self, t: f64, e: &MealEvent) -> f64 {
        match self {
            AbsorptionModel::Square(p) => square_rate(t, e, p),
            AbsorptionModel::Bump(p) => bump_rate(t, e, p),
            AbsorptionModel::TemplateMixture(tpl) => template_mixture_rate(t, e, tpl),
            AbsorptionModel::Neural(n) => neural_rate(t, e, &n.net, &n.scaling),
        }
    }

    pub fn num_trainable(&self) -> usize {
        match self {
            AbsorptionModel::Square(_) | AbsorptionModel::Bump(_) => 2,
            AbsorptionModel::TemplateMixture(_) => 0,
            AbsorptionModel::Neural(n) => n.net.num_params(),
        }
    }

    /// The unconstrained parameter vector θ.
    pub fn trainable(&self) -> Vec<f64> {
        match self {
            AbsorptionModel::Square(p) => alloc::vec![libm::log(p.width), libm::log(p.sharpness)],
            AbsorptionModel::Bump(p) => {
                alloc::vec![libm::log(p.b1), softplus_inverse(p.b2 - p.b1)]
            }
            AbsorptionModel::TemplateMixture(_) => Vec::new(),
            AbsorptionModel::Neural(n) => n.net.params().to_vec(),
        }
    }

    /// The same family with θ replaced.
    pub fn with_trainable(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.num_trainable() {
            return Err(Error::LengthMismatch {
                left: theta.len(),
                right: self.num_trainable(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trainable parameters"));
        }
        Ok(match self {
            AbsorptionModel::Square(_) => AbsorptionModel::Square(SquareParams::new(
                libm::exp(theta[0]),
                libm::exp(theta[1]),
            )?),
            AbsorptionModel::Bump(_) => {
                let b1 = libm::exp(theta[0]);
                AbsorptionModel::Bump(BumpParams::new(b1, b1 + softplus(theta[1]))?)
            }
            AbsorptionModel::TemplateMixture(t) => AbsorptionModel::TemplateMixture(*t),
            AbsorptionModel::Neural(n) => AbsorptionModel::Neural(NeuralAbsorption {
                net: Mlp::from_parts(n.net.sizes(), theta.to_vec())?,
                scaling: n.scaling,
            }),
        })
    }

    /// Accumulates `cotangent · ∂rate(t, e)/∂θ` into `grad`.
    pub fn rate_gradient(
        &self,
        t: f64,
        e: &MealEvent,
        cotangent: f64,
        grad: &mut [f64],
        scratch: &mut GradScratch,
    ) {
        let (start, end) = self.support(e);
        if cotangent == 0.0 || t < start || t >= end {
            return;
        }
        let tau = e.elapsed(t);
        let g = e.glucose;
        match self {
            AbsorptionModel::Square(p) => {
                let (w, k) = (p.width, p.sharpness);
                let s1 = sigmoid(k * tau);
                let s2 = sigmoid(k * (tau - w));
                let d = s1 - s2;
                let d_w = g * (k * s2 * (1.0 - s2) / w - d / (w * w));
                let d_k = g * (s1 * (1.0 - s1) * tau - s2 * (1.0 - s2) * (tau - w)) / w;
                grad[0] += cotangent * w * d_w;
                grad[1] += cotangent * k * d_k;
            }
            AbsorptionModel::Bump(p) => {
                let (b1, b2) = (p.b1, p.b2);
                let b3 = p.normalization();
                let e1 = libm::exp(-b1 * tau);
                let e2 = libm::exp(-b2 * tau);
                let diff = e1 - e2;
                let d_b1 = g * (-tau * e1 / b3 + diff / (b3 * b3 * b1 * b1));
                let d_b2 = g * (tau * e2 / b3 - diff / (b3 * b3 * b2 * b2));
                // b2 = b1 + softplus(δ)
                let delta = softplus_inverse(b2 - b1);
                grad[0] += cotangent * b1 * (d_b1 + d_b2);
                grad[1] += cotangent * sigmoid(delta) * d_b2;
            }
            AbsorptionModel::TemplateMixture(_) => {}
            AbsorptionModel::Neural(n) => {
                if tau < 0.0 {
                    return;
                }
                let input = n.input(tau, e);
                let z = n.net.forward_cached(&input, &mut scratch.cache);
                let dz = cotangent * g * n.scaling.output_scale * n.scaling.transform.derivative(z);
                n.net
                    .backward(&mut scratch.cache, dz, grad, &mut scratch.input_grad);
            }
        }
    }
}

/// Differentiable square: `g [σ(kτ) − σ(k(τ − w))] / w`.
pub fn square_rate(t: f64, e: &MealEvent, p: &SquareParams) -> f64 {
    let tau = e.elapsed(t);
    if !(-SQUARE_LEAD..SUPPORT_HORIZON).contains(&tau) {
        return 0.0;
    }
    let k = p.sharpness;
    e.glucose * (sigmoid(k * tau) - sigmoid(k * (tau - p.width))) / p.width
}

/// `g (e^{−b1 τ} − e^{−b2 τ}) / (1/b1 − 1/b2)` for `τ ≥ 0`.
pub fn bump_rate(t: f64, e: &MealEvent, p: &BumpParams) -> f64 {
    let tau = e.elapsed(t);
    if tau >= SUPPORT_HORIZON {
        return 0.0;
    }
    e.glucose * p.shape(tau)
}

/// Mean of `raw` over 50 evenly spaced points covering `[t − 5, t]`.
pub fn smooth_rate<F: Fn(f64) -> f64>(raw: F, t: f64) -> f64 {
    let step = SMOOTHING_SPAN / (SMOOTHING_POINTS - 1) as f64;
    let sum: f64 = (0..SMOOTHING_POINTS)
        .map(|j| raw(t - SMOOTHING_SPAN + j as f64 * step))
        .sum();
    sum / SMOOTHING_POINTS as f64
}

/// Ground-truth rate: convex mixture of delayed templates scaled by `g`,
/// smoothed over the preceding five minutes.
pub fn template_mixture_rate(t: f64, e: &MealEvent, templates: &[AbsorptionTemplate; 3]) -> f64 {
    let tau = e.elapsed(t);
    if !(0.0..SUPPORT_HORIZON).contains(&tau) {
        return 0.0;
    }
    let raw = |s: f64| {
        let tau = e.elapsed(s);
        templates
            .iter()
            .zip(&e.covariates)
            .map(|(tpl, m)| m * tpl.shape(tau))
            .sum::<f64>()
    };
    e.glucose * smooth_rate(raw, t)
}

pub fn neural_rate(t: f64, e: &MealEvent, net: &Mlp, scaling: &ScalingSpec) -> f64 {
    let tau = e.elapsed(t);
    if !(0.0..SUPPORT_HORIZON).contains(&tau) {
        return 0.0;
    }
    let s = &scaling.input_scale;
    let input = [
        tau * s[0],
        e.covariates[0] * s[1],
        e.covariates[1] * s[2],
        e.covariates[2] * s[3],
    ];
    e.glucose * scaling.output_scale * scaling.transform.apply(net.forward(&input))
}

/// Glucose control: the sum of every meal's absorption rate.
pub fn total_control_ug(t: f64, events: &[MealEvent], model: &AbsorptionModel) -> f64 {
    events.iter().map(|e| model.rate(t, e)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meal(g: f64) -> MealEvent {
        MealEvent::new(100.0, [0.2, 0.5, 0.3], g).unwrap()
    }

    #[test]
    fn event_validation() {
        assert!(MealEvent::new(0.0, [0.5, 0.5, 0.0], -1.0).is_err());
        assert!(MealEvent::new(0.0, [-0.1, 0.6, 0.5], 10.0).is_err());
        assert!(MealEvent::new(f64::NAN, [1.0, 0.0, 0.0], 10.0).is_err());
    }

    #[test]
    fn bump_parameter_errors() {
        assert!(BumpParams::new(0.09, 0.04).is_err());
        assert!(BumpParams::new(0.05, 0.05).is_err());
        assert!(BumpParams::new(0.0, 0.05).is_err());
        let p = BumpParams::new(0.04, 0.09).unwrap();
        assert!((p.normalization() - (25.0 - 1.0 / 0.09)).abs() < 1e-12);
    }

    #[test]
    fn square_parameter_errors() {
        assert!(SquareParams::new(0.0, 0.5).is_err());
        assert!(SquareParams::new(30.0, -1.0).is_err());
    }

    #[test]
    fn bump_is_zero_at_onset() {
        let p = BumpParams::new(0.04, 0.09).unwrap();
        assert_eq!(bump_rate(100.0, &meal(500.0), &p), 0.0);
        assert_eq!(bump_rate(99.0, &meal(500.0), &p), 0.0);
    }

    #[test]
    fn square_far_left_is_negligible() {
        let e = meal(800.0);
        for w in [5.0, 30.0, 120.0] {
            let p = SquareParams::new(w, 0.5).unwrap();
            assert!(square_rate(e.time - 60.0, &e, &p) < e.glucose * 1e-8);
            assert!(square_rate(e.time - 30.0, &e, &p) < e.glucose * 1e-6);
        }
    }

    #[test]
    fn square_plateau() {
        let e = meal(600.0);
        let p = SquareParams::new(40.0, 20.0).unwrap();
        let v = square_rate(e.time + 20.0, &e, &p);
        assert!((v - 600.0 / 40.0).abs() < 1e-3 * 600.0 / 40.0);
    }

    #[test]
    fn smoothing_a_constant_is_identity() {
        assert!((smooth_rate(|_| 2.75, 13.0) - 2.75).abs() < 1e-15);
    }

    #[test]
    fn smoothing_a_step() {
        let t_star = 10.0;
        let v = smooth_rate(|s| if s >= t_star { 1.0 } else { 0.0 }, t_star + 2.5);
        assert!((v - 0.5).abs() <= 1.0 / 50.0);
    }

    #[test]
    fn degenerate_mixture_equals_single_template() {
        let e = MealEvent::new(0.0, [1.0, 0.0, 0.0], 700.0).unwrap();
        for t in [3.0, 7.0, 20.0, 90.0, 300.0] {
            let expected = 700.0 * smooth_rate(|s| TEMPLATES[0].shape(s), t);
            assert!((template_mixture_rate(t, &e, &TEMPLATES) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_bounded_by_largest_template() {
        let e = meal(900.0);
        for k in 0..400 {
            let t = e.time + k as f64;
            let rate = template_mixture_rate(t, &e, &TEMPLATES);
            let bound = TEMPLATES
                .iter()
                .map(|tpl| 900.0 * smooth_rate(|s| tpl.shape(s - e.time), t))
                .fold(0.0, f64::max);
            assert!(rate <= bound + 1e-12);
        }
    }

    #[test]
    fn neural_rate_is_causal_and_linear_in_glucose() {
        let net = Mlp::init(5);
        let scaling = ScalingSpec::default();
        let e = meal(300.0);
        let e2 = MealEvent {
            glucose: 600.0,
            ..e
        };
        assert_eq!(neural_rate(e.time - 1e-9, &e, &net, &scaling), 0.0);
        assert_eq!(
            neural_rate(e.time + SUPPORT_HORIZON, &e, &net, &scaling),
            0.0
        );
        for k in 0..50 {
            let t = e.time + 7.3 * k as f64;
            let a = neural_rate(t, &e, &net, &scaling);
            assert_eq!(neural_rate(t, &e2, &net, &scaling), 2.0 * a);
        }
    }

    #[test]
    fn total_control_sums_events() {
        let model = AbsorptionModel::Bump(BumpParams::new(0.04, 0.09).unwrap());
        assert_eq!(total_control_ug(50.0, &[], &model), 0.0);
        let a = MealEvent::new(0.0, [1.0, 0.0, 0.0], 400.0).unwrap();
        let b = MealEvent::new(20.0, [0.0, 1.0, 0.0], 250.0).unwrap();
        assert_eq!(total_control_ug(35.0, &[a], &model), model.rate(35.0, &a));
        let sum = total_control_ug(35.0, &[a, b], &model);
        assert!((sum - (model.rate(35.0, &a) + model.rate(35.0, &b))).abs() < 1e-12);
    }

    #[test]
    fn trainable_roundtrip() {
        for family in [ModelFamily::Square, ModelFamily::Bump, ModelFamily::Neural] {
            let m = AbsorptionModel::initial(family, 1);
            let theta = m.trainable();
            let back = m.with_trainable(&theta).unwrap();
            let e = meal(400.0);
            for t in [90.0, 110.0, 160.0, 400.0] {
                let (a, b) = (m.rate(t, &e), back.rate(t, &e));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12), "{family}");
            }
        }
        assert!(AbsorptionModel::initial(ModelFamily::Bump, 0)
            .with_trainable(&[0.0])
            .is_err());
    }

    #[test]
    fn family_names_roundtrip() {
        for f in [
            ModelFamily::Neural,
            ModelFamily::Bump,
            ModelFamily::Square,
            ModelFamily::TemplateMixture,
        ] {
            assert_eq!(ModelFamily::parse(f.as_str()), Some(f));
        }
        assert_eq!(ModelFamily::parse("spline"), None);
    }
}
