use glucose_core::absorption::{total_control_ug, MealEvent};
use glucose_core::evaluation::EvalSetting;
use glucose_core::rng;
use glucose_core::simulator::{
    apply_observation_noise, concentration_to_grams, generate_dataset, perturb_meal_times,
    sample_insulin_events, sample_meals, SimulationConfig, Split, DEFAULT_MEAL_SLOTS,
};

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn meal_free(days: usize) -> SimulationConfig {
    SimulationConfig {
        days,
        split_days: [days - 2, 1, 1],
        meal_slots: vec![],
        ..SimulationConfig::default()
    }
}

#[test]
fn breakfast_ranges_and_simplex_covariates() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(9, 0);
    for _ in 0..10_000 {
        let meals = sample_meals(0, &cfg, &mut r);
        assert_eq!(meals.len(), 4);
        let b = meals[0];
        assert!((360.0..540.0).contains(&b.time));
        let grams = concentration_to_grams(b.glucose, &cfg);
        assert!((5.0 - 1e-9..65.0).contains(&grams), "{grams}");
        for m in &meals {
            assert!(m.covariates.iter().all(|&c| c >= 0.0));
            assert!((m.covariates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn meals_land_on_their_day() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(1, 0);
    let meals = sample_meals(3, &cfg, &mut r);
    for (m, slot) in meals.iter().zip(DEFAULT_MEAL_SLOTS) {
        let local = m.time - 3.0 * 1440.0;
        assert!(local >= slot.start && local < slot.end);
    }
}

#[test]
fn dinner_mean_grams() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(2, 0);
    let grams: Vec<f64> = (0..100_000)
        .map(|_| concentration_to_grams(sample_meals(0, &cfg, &mut r)[2].glucose, &cfg))
        .collect();
    let (mean, _) = mean_sd(&grams);
    assert!((mean - 70.0).abs() < 1.0, "{mean}");
}

#[test]
fn bolus_timing_and_conversion_statistics() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(3, 0);
    // 70 g meals in the middle of the horizon, so clamping never triggers.
    let meal = MealEvent::new(20_000.0, [1.0, 0.0, 0.0], 1400.0).unwrap();
    let meals = vec![meal; 100_000];
    let events = sample_insulin_events(&meals, &cfg, &mut r);
    let offsets: Vec<f64> = events.iter().map(|e| e.time - meal.time).collect();
    let (mean, sd) = mean_sd(&offsets);
    assert!(mean.abs() < 0.1, "{mean}");
    assert!((sd - 10.0).abs() < 0.1, "{sd}");
    for e in &events {
        assert!(e.dose > 0.0 && e.dose < 70.0 / 3.0);
        assert_eq!(e.duration, 30.0);
    }
}

#[test]
fn bolus_times_are_clamped_to_horizon() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(4, 0);
    let meal = MealEvent::new(0.0, [1.0, 0.0, 0.0], 500.0).unwrap();
    let events = sample_insulin_events(&vec![meal; 1000], &cfg, &mut r);
    assert!(events.iter().all(|e| e.time >= 0.0));
    assert!(events.iter().any(|e| e.time == 0.0));
}

#[test]
fn observation_noise_statistics() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(5, 1);
    let trace = vec![120.0; 100_000];
    let noisy = apply_observation_noise(&trace, true, &cfg, &mut r);
    let rel: Vec<f64> = noisy.iter().map(|y| y / 120.0 - 1.0).collect();
    let (mean, sd) = mean_sd(&rel);
    assert!(mean.abs() < 1e-3);
    assert!((sd - 0.05).abs() < 0.05 * 0.05, "{sd}");
}

#[test]
fn meal_time_noise_statistics() {
    let cfg = SimulationConfig::default();
    let mut r = rng::stream(6, 2);
    let meal = MealEvent::new(600.0, [0.1, 0.2, 0.7], 800.0).unwrap();
    let events = vec![meal; 100_000];
    let recorded = perturb_meal_times(&events, true, &cfg, &mut r);
    let shifts: Vec<f64> = recorded.iter().map(|e| e.time - meal.time).collect();
    let (mean, sd) = mean_sd(&shifts);
    assert!((mean - 5.0).abs() < 0.05, "{mean}");
    assert!((sd - 2.5).abs() < 0.05, "{sd}");
    for e in &recorded {
        assert_eq!(e.glucose.to_bits(), meal.glucose.to_bits());
        assert_eq!(e.covariates, meal.covariates);
    }
}

#[test]
fn meal_free_run_stays_basal() {
    let cfg = meal_free(28);
    let ds = generate_dataset(&cfg, EvalSetting::EXACT).unwrap();
    assert!(ds.true_meals.is_empty() && ds.insulin.events.is_empty());
    let drift = ds
        .truth
        .iter()
        .map(|s| (s.state.g - cfg.patient.gb).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-6, "{drift}");
    assert!(ds.observations.iter().all(|o| o.glucose == cfg.patient.gb));
}

#[test]
fn default_dataset_shape_and_consistency() {
    let cfg = SimulationConfig::default();
    let ds = generate_dataset(&cfg, EvalSetting::new(true, true)).unwrap();
    assert_eq!(ds.observations.len(), 28 * 24 * 12);
    assert_eq!(ds.true_meals.len(), 112);
    assert_eq!(ds.insulin.events.len(), 112);
    assert_eq!(ds.recorded_meals.len(), ds.true_meals.len());
    for (r, t) in ds.recorded_meals.iter().zip(&ds.true_meals) {
        assert_ne!(r.time, t.time);
        assert_eq!(r.glucose, t.glucose);
        assert_eq!(r.covariates, t.covariates);
    }
    // Splits are contiguous, disjoint and cover every observation.
    let (tr, va, te) = (
        ds.splits.range(Split::Train),
        ds.splits.range(Split::Validation),
        ds.splits.range(Split::Test),
    );
    assert_eq!(
        (tr.start, tr.end, va.end, te.end),
        (0, va.start, te.start, 8064)
    );
    assert_eq!((tr.len(), va.len(), te.len()), (5760, 1152, 1152));
    for (k, o) in ds.observations.iter().enumerate() {
        assert_eq!(o.time, 5.0 * k as f64);
        assert!(o.glucose.is_finite());
    }
    // Stored glucose control equals the ground-truth sum over events.
    let model = cfg.ground_truth.model().unwrap();
    for s in ds.truth.iter().step_by(7) {
        let direct = total_control_ug(s.time, &ds.true_meals, &model);
        assert!(
            (s.ug - direct).abs() <= 1e-9 * direct.max(1.0),
            "t = {}",
            s.time
        );
    }
}

#[test]
fn glucose_control_integrates_to_meal_mass() {
    // No late snack, so every meal's support ends inside the horizon.
    let cfg = SimulationConfig {
        days: 3,
        split_days: [1, 1, 1],
        meal_slots: DEFAULT_MEAL_SLOTS[..3].to_vec(),
        ..SimulationConfig::default()
    };
    let ds = generate_dataset(&cfg, EvalSetting::EXACT).unwrap();
    let integral: f64 = ds.truth.iter().map(|s| s.ug * 5.0).sum();
    let total: f64 = ds.true_meals.iter().map(|m| m.glucose).sum();
    assert!(
        (integral - total).abs() < 0.01 * total,
        "{integral} vs {total}"
    );
}

#[test]
fn noise_settings_share_the_underlying_trajectory() {
    let cfg = SimulationConfig {
        days: 3,
        split_days: [1, 1, 1],
        seed: 17,
        ..SimulationConfig::default()
    };
    let clean = generate_dataset(&cfg, EvalSetting::EXACT).unwrap();
    let noisy = generate_dataset(&cfg, EvalSetting::new(true, true)).unwrap();
    assert_eq!(clean.truth, noisy.truth);
    assert_eq!(clean.true_meals, noisy.true_meals);
    assert_eq!(clean, generate_dataset(&cfg, EvalSetting::EXACT).unwrap());
    let rel: Vec<f64> = noisy
        .observations
        .iter()
        .zip(&clean.truth)
        .map(|(o, s)| o.glucose / s.state.g - 1.0)
        .collect();
    let (_, sd) = mean_sd(&rel);
    assert!((sd - 0.05).abs() < 0.01);
}

#[test]
fn glucose_stays_physiological_across_seeds() {
    for seed in 0..50 {
        let cfg = SimulationConfig {
            seed,
            ..SimulationConfig::default()
        };
        let ds = generate_dataset(&cfg, EvalSetting::EXACT).unwrap();
        for s in &ds.truth {
            assert!(
                s.state.g > 20.0 && s.state.g < 450.0,
                "seed {seed}: G = {} at t = {}",
                s.state.g,
                s.time
            );
        }
    }
}
