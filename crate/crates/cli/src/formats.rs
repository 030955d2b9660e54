//! On-disk formats.
//!
//! Numeric series are CSV with a `# format_version: N` first line and unit
//! suffixes in the headers; structured records are JSON objects carrying a
//! `format_version` field. Floats are written in shortest round-trip form, so
//! reading a file back reproduces every value bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use glucose_core::absorption::{
    AbsorptionModel, AbsorptionTemplate, BumpParams, MealEvent, ModelFamily, NeuralAbsorption,
    SquareParams,
};
use glucose_core::evaluation::{EvalSetting, ResultsTable, WindowError};
use glucose_core::nn::{Mlp, ScalingSpec};
use glucose_core::ode::PhysioState;
use glucose_core::simulator::{
    Dataset, InsulinEvent, InsulinSchedule, Observation, SimulationConfig, SplitBounds, TruthSample,
};
use glucose_core::training::{LossReport, TrainingConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::setting_label;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const EVENTS_FILE: &str = "events.json";

fn version_line() -> String {
    format!("# format_version: {FORMAT_VERSION}\n")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))
        }
        _ => Ok(()),
    }
}

/// Writes a versioned CSV file from serializable rows.
pub fn write_csv<R: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> Result<()> {
    ensure_parent(path)?;
    let mut buf = version_line().into_bytes();
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(&mut buf);
        let io = |e: csv::Error| CliError::write(path, std::io::Error::other(e));
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.serialize(row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::write(path, e))?;
    }
    fs::write(path, buf).map_err(|e| CliError::write(path, e))
}

/// Reads a versioned CSV file, checking the header against `header`.
pub fn read_csv<R: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    if format!("{first}\n") != version_line() {
        return Err(CliError::format(
            path,
            format!("expected `{}`", version_line().trim_end()),
        ));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let found: Vec<String> = r
        .headers()
        .map_err(|e| CliError::format(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if found != header {
        return Err(CliError::format(
            path,
            format!("expected columns {header:?}, found {found:?}"),
        ));
    }
    // Columns were checked above, so rows map onto fields by position.
    r.records()
        .map(|rec| rec.and_then(|rec| rec.deserialize(None)))
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| CliError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("serializable record");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::write(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::format(path, format!("at `{at}`: {}", e.into_inner()))
    })
}

fn check_version(path: &Path, found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(CliError::format(
            path,
            format!("format_version {found} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

const OBSERVATION_HEADER: [&str; 2] = ["t_min", "glucose_mgdl"];
const GROUND_TRUTH_HEADER: [&str; 6] = [
    "t_min",
    "G_mgdl",
    "X_per_min",
    "I_uU_per_ml",
    "uG_mgdl_per_min",
    "uI_uU_per_ml_per_min",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(with = "setting_label")]
    pub setting: EvalSetting,
    pub seed: u64,
    pub observation_interval_min: f64,
    pub observation_count: usize,
    pub meal_count: usize,
    pub bolus_count: usize,
    pub splits: SplitBounds,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsFile {
    pub format_version: u32,
    pub true_meals: Vec<MealEvent>,
    pub recorded_meals: Vec<MealEvent>,
    /// Plasma insulin concentration per unit (μU/ml per U).
    pub insulin_to_concentration: f64,
    pub insulin: Vec<InsulinEvent>,
}

/// A dataset read from disk with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub dataset: Dataset,
    pub manifest: Manifest,
    /// SHA-256 over the manifest, observation and event files.
    pub fingerprint: String,
}

pub fn write_dataset(dir: &Path, dataset: &Dataset, cfg: &SimulationConfig) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        setting: dataset.setting,
        seed: cfg.seed,
        observation_interval_min: dataset.observation_interval,
        observation_count: dataset.observations.len(),
        meal_count: dataset.true_meals.len(),
        bolus_count: dataset.insulin.events.len(),
        splits: dataset.splits,
        simulation: cfg.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_csv(
        &dir.join(OBSERVATIONS_FILE),
        &OBSERVATION_HEADER,
        dataset.observations.iter().map(|o| (o.time, o.glucose)),
    )?;
    write_csv(
        &dir.join(GROUND_TRUTH_FILE),
        &GROUND_TRUTH_HEADER,
        dataset
            .truth
            .iter()
            .map(|s| (s.time, s.state.g, s.state.x, s.state.i, s.ug, s.ui)),
    )?;
    write_json(
        &dir.join(EVENTS_FILE),
        &EventsFile {
            format_version: FORMAT_VERSION,
            true_meals: dataset.true_meals.clone(),
            recorded_meals: dataset.recorded_meals.clone(),
            insulin_to_concentration: dataset.insulin.units_to_concentration,
            insulin: dataset.insulin.events.clone(),
        },
    )?;
    Ok(manifest)
}

pub fn fingerprint(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, OBSERVATIONS_FILE, EVENTS_FILE] {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| CliError::missing(&path, e))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path)?;
    check_version(&manifest_path, manifest.format_version)?;
    let events_path = dir.join(EVENTS_FILE);
    let events: EventsFile = read_json(&events_path)?;
    check_version(&events_path, events.format_version)?;

    let obs_path = dir.join(OBSERVATIONS_FILE);
    let observations: Vec<Observation> = read_csv::<(f64, f64)>(&obs_path, &OBSERVATION_HEADER)?
        .into_iter()
        .map(|(time, glucose)| Observation { time, glucose })
        .collect();
    let truth_path = dir.join(GROUND_TRUTH_FILE);
    let truth: Vec<TruthSample> =
        read_csv::<(f64, f64, f64, f64, f64, f64)>(&truth_path, &GROUND_TRUTH_HEADER)?
            .into_iter()
            .map(|(time, g, x, i, ug, ui)| TruthSample {
                time,
                state: PhysioState::new(g, x, i),
                ug,
                ui,
            })
            .collect();

    if observations.len() != manifest.observation_count || truth.len() != observations.len() {
        return Err(CliError::format(
            &obs_path,
            format!(
                "{} observations and {} ground-truth rows, manifest says {}",
                observations.len(),
                truth.len(),
                manifest.observation_count
            ),
        ));
    }
    if events.true_meals.len() != events.recorded_meals.len() {
        return Err(CliError::format(
            &events_path,
            "true and recorded meals differ in count",
        ));
    }
    if manifest.splits.test.1 != observations.len() {
        return Err(CliError::format(
            &manifest_path,
            "split bounds do not cover the observations",
        ));
    }
    let dataset = Dataset {
        setting: manifest.setting,
        observation_interval: manifest.observation_interval_min,
        observations,
        true_meals: events.true_meals,
        recorded_meals: events.recorded_meals,
        insulin: InsulinSchedule {
            events: events.insulin,
            units_to_concentration: events.insulin_to_concentration,
        },
        truth,
        splits: manifest.splits,
    };
    Ok(StoredDataset {
        dataset,
        manifest,
        fingerprint: fingerprint(dir)?,
    })
}

/// One dense layer: `shape = [outputs, inputs]`, weights row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelRecord {
    Neural {
        layers: Vec<LayerRecord>,
        scaling: ScalingSpec,
    },
    Bump {
        b1: f64,
        b2: f64,
    },
    Square {
        width: f64,
        sharpness: f64,
    },
    TemplateMixture {
        templates: [AbsorptionTemplate; 3],
    },
}

impl ModelRecord {
    pub fn from_model(model: &AbsorptionModel) -> Self {
        match model {
            AbsorptionModel::Neural(n) => {
                let sizes = n.net.sizes();
                let layers = (0..sizes.len() - 1)
                    .map(|l| {
                        let (w, b) = n.net.layer(l);
                        LayerRecord {
                            shape: [sizes[l + 1], sizes[l]],
                            weights: w.to_vec(),
                            biases: b.to_vec(),
                        }
                    })
                    .collect();
                ModelRecord::Neural {
                    layers,
                    scaling: n.scaling,
                }
            }
            AbsorptionModel::Bump(p) => ModelRecord::Bump {
                b1: p.b1(),
                b2: p.b2(),
            },
            AbsorptionModel::Square(p) => ModelRecord::Square {
                width: p.width(),
                sharpness: p.sharpness(),
            },
            AbsorptionModel::TemplateMixture(t) => ModelRecord::TemplateMixture { templates: *t },
        }
    }

    pub fn to_model(&self) -> glucose_core::Result<AbsorptionModel> {
        Ok(match self {
            ModelRecord::Neural { layers, scaling } => {
                let mut sizes = Vec::with_capacity(layers.len() + 1);
                let mut params = Vec::new();
                for (l, layer) in layers.iter().enumerate() {
                    let [n_out, n_in] = layer.shape;
                    if l == 0 {
                        sizes.push(n_in);
                    } else if sizes[l] != n_in {
                        return Err(glucose_core::Error::LengthMismatch {
                            left: n_in,
                            right: sizes[l],
                        });
                    }
                    sizes.push(n_out);
                    if layer.weights.len() != n_out * n_in || layer.biases.len() != n_out {
                        return Err(glucose_core::Error::LengthMismatch {
                            left: layer.weights.len() + layer.biases.len(),
                            right: n_out * n_in + n_out,
                        });
                    }
                    params.extend_from_slice(&layer.weights);
                    params.extend_from_slice(&layer.biases);
                }
                AbsorptionModel::Neural(NeuralAbsorption::new(
                    Mlp::from_parts(&sizes, params)?,
                    *scaling,
                )?)
            }
            ModelRecord::Bump { b1, b2 } => AbsorptionModel::Bump(BumpParams::new(*b1, *b2)?),
            ModelRecord::Square { width, sharpness } => {
                AbsorptionModel::Square(SquareParams::new(*width, *sharpness)?)
            }
            ModelRecord::TemplateMixture { templates } => {
                for t in templates {
                    t.validate()?;
                }
                AbsorptionModel::TemplateMixture(*templates)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelRecord,
    /// Noise setting of the training data.
    #[serde(with = "setting_label")]
    pub setting: EvalSetting,
    pub dataset_fingerprint: String,
    pub best_iteration: usize,
    pub best_val_rmse: f64,
    pub training: TrainingConfig,
}

impl Checkpoint {
    pub fn family(&self) -> ModelFamily {
        match self.model {
            ModelRecord::Neural { .. } => ModelFamily::Neural,
            ModelRecord::Bump { .. } => ModelFamily::Bump,
            ModelRecord::Square { .. } => ModelFamily::Square,
            ModelRecord::TemplateMixture { .. } => ModelFamily::TemplateMixture,
        }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_json(path)?;
    check_version(path, ckpt.format_version)?;
    Ok(ckpt)
}

const LOG_HEADER: [&str; 4] = ["iteration", "loss", "val_rmse", "lr"];

pub fn write_training_log(path: &Path, reports: &[LossReport]) -> Result<()> {
    write_csv(
        path,
        &LOG_HEADER,
        reports
            .iter()
            .map(|r| (r.iteration, r.loss, r.val_rmse, r.lr)),
    )
}

pub fn read_training_log(path: &Path) -> Result<Vec<LossReport>> {
    Ok(
        read_csv::<(usize, f64, Option<f64>, f64)>(path, &LOG_HEADER)?
            .into_iter()
            .map(|(iteration, loss, val_rmse, lr)| LossReport {
                iteration,
                loss,
                val_rmse,
                lr,
            })
            .collect(),
    )
}

/// Row label used in results files.
pub fn row_label(family: ModelFamily) -> &'static str {
    match family {
        ModelFamily::TemplateMixture => "ground_truth",
        f => f.as_str(),
    }
}

fn table_rows(table: &ResultsTable) -> Vec<ModelFamily> {
    let mut rows: Vec<ModelFamily> = ModelFamily::TRAINABLE.to_vec();
    if table
        .iter()
        .any(|(f, _, _)| f == ModelFamily::TemplateMixture)
    {
        rows.push(ModelFamily::TemplateMixture);
    }
    rows
}

/// One row per model, one column per setting; missing cells are empty.
pub fn write_results_csv(path: &Path, table: &ResultsTable) -> Result<()> {
    let mut header = vec!["model"];
    header.extend(EvalSetting::ALL.iter().map(|s| s.label()));
    let rows = table_rows(table).into_iter().map(|f| {
        let mut row = vec![row_label(f).to_owned()];
        row.extend(
            EvalSetting::ALL
                .iter()
                .map(|&s| table.get(f, s).map(|v| v.to_string()).unwrap_or_default()),
        );
        row
    });
    write_csv(path, &header, rows)
}

pub fn read_results_csv(path: &Path) -> Result<ResultsTable> {
    let mut header = vec!["model"];
    header.extend(EvalSetting::ALL.iter().map(|s| s.label()));
    let rows: Vec<Vec<String>> = read_csv(path, &header)?;
    let mut table = ResultsTable::new();
    for row in rows {
        let family = match row[0].as_str() {
            "ground_truth" => ModelFamily::TemplateMixture,
            other => ModelFamily::parse(other)
                .ok_or_else(|| CliError::format(path, format!("unknown model `{other}`")))?,
        };
        for (cell, &setting) in row[1..].iter().zip(&EvalSetting::ALL) {
            if !cell.is_empty() {
                let v: f64 = cell.parse().map_err(|e| CliError::format(path, e))?;
                table.insert(family, setting, v)?;
            }
        }
    }
    Ok(table)
}

/// Aligned plain-text rendering of the results grid (RMSE in mg/dl).
pub fn render_results_table(table: &ResultsTable) -> String {
    let mut out = String::new();
    let width = 13;
    out.push_str(&format!("{:<14}", "RMSE (mg/dl)"));
    out.push_str(&format!("{:>w$}{:>w$}\n", "exact", "noisy", w = 2 * width));
    out.push_str(&format!("{:<14}", "timestamps"));
    out.push_str(&format!("{:>w$}{:>w$}\n", "", "", w = 2 * width));
    out.push_str(&format!("{:<14}", "observations"));
    for s in EvalSetting::ALL {
        let label = if s.observation_noise {
            "noisy"
        } else {
            "exact"
        };
        out.push_str(&format!("{label:>width$}"));
    }
    out.push('\n');
    for f in table_rows(table) {
        out.push_str(&format!("{:<14}", row_label(f)));
        for s in EvalSetting::ALL {
            match table.get(f, s) {
                Some(v) => out.push_str(&format!("{v:>width$.2}")),
                None => out.push_str(&format!("{:>width$}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

const WINDOW_HEADER: [&str; 7] = [
    "model",
    "setting",
    "start_index",
    "anchor_t_min",
    "targets",
    "mse",
    "rmse",
];

pub fn write_window_errors(
    path: &Path,
    rows: &[(ModelFamily, EvalSetting, Vec<WindowError>)],
) -> Result<()> {
    write_csv(
        path,
        &WINDOW_HEADER,
        rows.iter().flat_map(|(f, s, errs)| {
            errs.iter().map(move |e| {
                (
                    row_label(*f),
                    s.label(),
                    e.start,
                    e.anchor_time,
                    e.count,
                    e.mse(),
                    e.rmse(),
                )
            })
        }),
    )
}

/// Row of a forecast file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub t_min: f64,
    pub observed_mgdl: f64,
    pub predicted_mgdl: f64,
    pub predicted_ug: f64,
    pub true_ug: f64,
}

pub const FORECAST_HEADER: [&str; 5] = [
    "t_min",
    "observed_mgdl",
    "predicted_mgdl",
    "predicted_uG_mgdl_per_min",
    "true_uG_mgdl_per_min",
];

pub fn write_forecast(path: &Path, rows: &[ForecastRow]) -> Result<()> {
    write_csv(path, &FORECAST_HEADER, rows)
}

pub fn read_forecast(path: &Path) -> Result<Vec<ForecastRow>> {
    read_csv(path, &FORECAST_HEADER)
}

/// Writes a text file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| CliError::write(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::write(path, e))
}
