use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glucose_cli::commands::{self, FORECAST_CSV, RESULTS_CSV};
use glucose_cli::formats::{
    self, read_checkpoint, read_forecast, read_results_csv, read_training_log,
};
use glucose_core::absorption::{AbsorptionModel, ModelFamily};
use glucose_core::evaluation::EvalSetting;
use tempfile::TempDir;

const SMALL: &str = "
[simulation]
days = 3
split_days = [1, 1, 1]

[training]
iterations = 30
batch_size = 16
";

fn glucose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glucose"))
        .args(args)
        .env_remove("GLUCOSE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(toml: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, toml).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn simulate(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        ok(glucose(&[
            "simulate",
            "--config",
            s(&self.config),
            "--out",
            s(&out),
        ]));
        out
    }

    fn train(&self, data: &Path, family: &str, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec![
            "train",
            "--config",
            s(&self.config),
            "--data",
            s(data),
            "--family",
            family,
        ];
        args.extend_from_slice(&["--out", s(&out)]);
        args.extend_from_slice(extra);
        ok(glucose(&args));
        out.join(format!("{family}.checkpoint.json"))
    }
}

#[test]
fn default_simulation_has_expected_counts() {
    let f = Fixture::new("");
    let data = f.simulate("data");
    let stored = formats::read_dataset(&data).unwrap();
    assert_eq!(stored.dataset.observations.len(), 8064);
    assert_eq!(stored.dataset.true_meals.len(), 112);
    assert_eq!(stored.dataset.insulin.events.len(), 112);
    assert_eq!(stored.manifest.setting, EvalSetting::EXACT);
}

#[test]
fn simulation_is_reproducible_byte_for_byte() {
    let f = Fixture::new(SMALL);
    let a = f.simulate("a");
    let b = f.simulate("b");
    for file in [
        formats::MANIFEST_FILE,
        formats::OBSERVATIONS_FILE,
        formats::GROUND_TRUTH_FILE,
        formats::EVENTS_FILE,
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let other = f.path("c");
    ok(glucose(&[
        "simulate",
        "--config",
        s(&f.config),
        "--seed",
        "1",
        "--out",
        s(&other),
    ]));
    assert_ne!(
        fs::read(a.join(formats::OBSERVATIONS_FILE)).unwrap(),
        fs::read(other.join(formats::OBSERVATIONS_FILE)).unwrap()
    );
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let f = Fixture::new("[training]\nbatch_sise = 3\n");
    let out = glucose(&[
        "simulate",
        "--config",
        s(&f.config),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
}

#[test]
fn invalid_config_value_is_a_config_error() {
    let f = Fixture::new("[simulation]\ndays = 3\nsplit_days = [1, 1, 2]\n");
    let out = glucose(&[
        "simulate",
        "--config",
        s(&f.config),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let f = Fixture::new(SMALL);
    let missing = f.path("nowhere");
    let out = glucose(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&missing),
        "--family",
        "bump",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = glucose(&["simulate", "--config", s(&f.path("absent.toml"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_iterations_return_the_initialization() {
    let f = Fixture::new(SMALL);
    let data = f.simulate("data");
    let zero = Fixture::new(&SMALL.replace("iterations = 30", "iterations = 0"));
    let ckpt = zero.train(&data, "neural", "run0", &["--seed", "7"]);
    let c = read_checkpoint(&ckpt).unwrap();
    assert_eq!(c.best_iteration, 0);
    assert_eq!(
        c.model.to_model().unwrap(),
        AbsorptionModel::initial(ModelFamily::Neural, 7)
    );
    assert!(
        read_training_log(&commands::log_path(&zero.path("run0"), ModelFamily::Neural))
            .unwrap()
            .is_empty()
    );
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let f = Fixture::new(&SMALL.replace("iterations = 30", "iterations = 80"));
    let data = f.simulate("data");
    let a = f.train(&data, "bump", "a", &[]);
    let b = f.train(&data, "bump", "b", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let log = read_training_log(&commands::log_path(&f.path("a"), ModelFamily::Bump)).unwrap();
    assert_eq!(log.len(), 80);
    let mean = |r: &[glucose_core::training::LossReport]| {
        r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64
    };
    assert!(
        mean(&log[70..]) < mean(&log[..10]),
        "{} vs {}",
        mean(&log[70..]),
        mean(&log[..10])
    );
    let c = read_checkpoint(&a).unwrap();
    assert_eq!(c.family(), ModelFamily::Bump);
    assert!(c.best_val_rmse.is_finite());
}

#[test]
fn evaluate_reports_a_stable_table() {
    let f = Fixture::new(SMALL);
    let data = f.simulate("data");
    let square = f.train(&data, "square", "sq", &[]);
    let bump = f.train(&data, "bump", "bu", &[]);
    let run = |name: &str| {
        let out = f.path(name);
        let stdout = ok(glucose(&[
            "evaluate",
            "--config",
            s(&f.config),
            "--data",
            s(&data),
            "--checkpoint",
            s(&square),
            "--checkpoint",
            s(&bump),
            "--ground-truth",
            "--dump-windows",
            "--out",
            s(&out),
        ]));
        assert!(stdout.contains("ground_truth"));
        out
    };
    let a = run("eval-a");
    let b = run("eval-b");
    assert_eq!(
        fs::read(a.join(RESULTS_CSV)).unwrap(),
        fs::read(b.join(RESULTS_CSV)).unwrap()
    );
    let table = read_results_csv(&a.join(RESULTS_CSV)).unwrap();
    assert_eq!(table.len(), 3);
    let truth = table
        .get(ModelFamily::TemplateMixture, EvalSetting::EXACT)
        .unwrap();
    assert!(truth < 0.5, "ground truth RMSE {truth}");
    assert!(table.get(ModelFamily::Square, EvalSetting::EXACT).unwrap() > truth);
    let header = fs::read_to_string(a.join(RESULTS_CSV)).unwrap();
    assert!(header.contains("model,exact-exact,exact-noisy,noisy-exact,noisy-noisy"));
    assert!(a.join(commands::WINDOWS_CSV).exists());

    let out = glucose(&["evaluate", "--config", s(&f.config), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ground_truth_forecast_tracks_observations() {
    let f = Fixture::new(SMALL);
    let data = f.simulate("data");
    let out = f.path("fc");
    ok(glucose(&[
        "forecast",
        "--config",
        s(&f.config),
        "--data",
        s(&data),
        "--ground-truth",
        "--start",
        "1500",
        "--horizon",
        "300",
        "--out",
        s(&out),
    ]));
    let rows = read_forecast(&out.join(FORECAST_CSV)).unwrap();
    assert_eq!(rows.len(), 60);
    assert_eq!(rows[0].t_min, 1505.0);
    assert!(rows.windows(2).all(|w| w[1].t_min - w[0].t_min == 5.0));
    for r in &rows {
        assert!((r.predicted_mgdl - r.observed_mgdl).abs() < 1.0, "{r:?}");
    }

    for start in ["10", "1502", "4300"] {
        let out = glucose(&[
            "forecast",
            "--config",
            s(&f.config),
            "--data",
            s(&data),
            "--ground-truth",
            "--start",
            start,
            "--out",
            s(&f.path("bad")),
        ]);
        assert_eq!(out.status.code(), Some(4), "start {start}");
    }
}
