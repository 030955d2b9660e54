//! Adjoint gradients against central finite differences.

use glucose_core::absorption::{AbsorptionModel, ModelFamily};
use glucose_core::evaluation::EvalSetting;
use glucose_core::simulator::{generate_dataset, Dataset, SimulationConfig, Split};
use glucose_core::training::{
    batch_loss_and_grad, grad_loss, window_in_split, TrainingConfig, TrainingWindow,
};
use rand::{Rng, SeedableRng};

fn short_dataset() -> (SimulationConfig, Dataset) {
    let cfg = SimulationConfig {
        days: 3,
        split_days: [1, 1, 1],
        seed: 11,
        ..SimulationConfig::default()
    };
    let ds = generate_dataset(&cfg, EvalSetting::new(false, true)).unwrap();
    (cfg, ds)
}

/// A model away from its initialization so no coordinate sits at a special point.
fn perturbed(family: ModelFamily, seed: u64) -> AbsorptionModel {
    let m = AbsorptionModel::initial(family, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = m
        .trainable()
        .iter()
        .map(|v| v + 0.05 * rng.random_range(-1.0..1.0))
        .collect();
    m.with_trainable(&theta).unwrap()
}

fn loss_at(
    windows: &[TrainingWindow],
    model: &AbsorptionModel,
    theta: &[f64],
    sim: &SimulationConfig,
    cfg: &TrainingConfig,
) -> f64 {
    let m = model.with_trainable(theta).unwrap();
    batch_loss_and_grad(windows, &m, &sim.patient, cfg)
        .unwrap()
        .0
}

/// Largest coordinate error relative to the largest finite-difference entry.
fn fd_relative_error(
    windows: &[TrainingWindow],
    model: &AbsorptionModel,
    sim: &SimulationConfig,
    cfg: &TrainingConfig,
    coords: &[usize],
) -> f64 {
    let (_, grad) = batch_loss_and_grad(windows, model, &sim.patient, cfg).unwrap();
    let theta = model.trainable();
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    let mut max_ref: f64 = 0.0;
    for &i in coords {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        let fd = (loss_at(windows, model, &plus, sim, cfg)
            - loss_at(windows, model, &minus, sim, cfg))
            / (2.0 * h);
        max_err = max_err.max((fd - grad[i]).abs());
        max_ref = max_ref.max(fd.abs());
    }
    assert!(max_ref > 0.0, "degenerate check: zero gradient");
    max_err / max_ref
}

fn coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

#[test]
fn adjoint_matches_finite_differences() {
    let (sim, ds) = short_dataset();
    for family in ModelFamily::TRAINABLE {
        for window_len in [12, 48] {
            for dt in [1.0, 0.5] {
                let cfg = TrainingConfig {
                    window_len,
                    dt_train: dt,
                    ..TrainingConfig::default()
                };
                // Windows over breakfast and dinner of the training day.
                let windows: Vec<_> = [70, 200]
                    .iter()
                    .map(|&o| window_in_split(&ds, Split::Train, o, &cfg).unwrap())
                    .collect();
                let model = perturbed(family, 3);
                let c = coords(model.num_trainable(), 50, 5);
                let err = fd_relative_error(&windows, &model, &sim, &cfg, &c);
                assert!(err < 1e-3, "{family} len {window_len} dt {dt}: {err:e}");
            }
        }
    }
}

#[test]
fn batch_gradient_is_mean_of_window_gradients() {
    let (sim, ds) = short_dataset();
    let cfg = TrainingConfig::default();
    let model = perturbed(ModelFamily::Neural, 1);
    let windows: Vec<_> = [60, 61, 190]
        .iter()
        .map(|&o| window_in_split(&ds, Split::Train, o, &cfg).unwrap())
        .collect();
    let (loss, grad) = batch_loss_and_grad(&windows, &model, &sim.patient, &cfg).unwrap();
    let parts: Vec<_> = windows
        .iter()
        .map(|w| grad_loss(w, &model, &sim.patient, &cfg).unwrap())
        .collect();
    let mean_loss = parts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    assert!((loss - mean_loss).abs() <= 1e-12 * loss.abs().max(1.0));
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    for (i, g) in grad.iter().enumerate() {
        let mean = parts.iter().map(|p| p.1[i]).sum::<f64>() / 3.0;
        assert!((g - mean).abs() <= 1e-12 * scale, "coordinate {i}");
    }
}

#[test]
fn batch_loss_ignores_window_order() {
    let (sim, ds) = short_dataset();
    let cfg = TrainingConfig::default();
    let model = perturbed(ModelFamily::Bump, 2);
    let mut windows: Vec<_> = [10, 80, 150]
        .iter()
        .map(|&o| window_in_split(&ds, Split::Train, o, &cfg).unwrap())
        .collect();
    let (a, ga) = batch_loss_and_grad(&windows, &model, &sim.patient, &cfg).unwrap();
    windows.reverse();
    let (b, gb) = batch_loss_and_grad(&windows, &model, &sim.patient, &cfg).unwrap();
    assert!((a - b).abs() <= 1e-12 * a);
    for (x, y) in ga.iter().zip(&gb) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-9));
    }
}

#[test]
fn meal_free_window_has_zero_gradient() {
    // Overnight window: the late snack's support ends long before.
    let sim = SimulationConfig {
        days: 3,
        split_days: [1, 1, 1],
        meal_slots: vec![],
        ..SimulationConfig::default()
    };
    let ds = generate_dataset(&sim, EvalSetting::EXACT).unwrap();
    let cfg = TrainingConfig::default();
    let w = window_in_split(&ds, Split::Train, 0, &cfg).unwrap();
    assert!(w.meals.is_empty());
    for family in ModelFamily::TRAINABLE {
        let (loss, grad) =
            grad_loss(&w, &AbsorptionModel::initial(family, 0), &sim.patient, &cfg).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.iter().all(|&g| g == 0.0), "{family}");
    }
}
