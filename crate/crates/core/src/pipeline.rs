//! Training and prediction over whole datasets: feature extraction with
//! training-fitted scalers, device remapping, and grain routing.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{class_index, Event, Grain, GroundTruthLabel, UNKNOWN};
use crate::features::{
    carry_code, extract_features, fit_scalers, pose_code, remap_unseen_device, tx_power_code,
    DeviceTiers, FeatureError, FeatureVector, Scalers, DEFAULT_DEVICE_TIERS,
};
use crate::gbm::{
    grid_search_gbm, strict_threshold, train_gbm, train_gbm_rounds, tune_binary_threshold,
    validation_split, FeatureKind, FeatureSchema, FeatureSpec, GbmConfig,
    GbmError, GbmGrid, GbmModel, Matrix, Task, TrainingLog as GbmLog,
};
use crate::ingest::{Dataset, IngestError};
use crate::mlp::{distance_classes, train_mlp, MlpError, MlpModel, TrainConfig, TrainingLog as MlpLog};
use crate::pathloss::ParamsByGrain;

pub const BUNDLE_FORMAT: &str = "tc4tl-model";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Gbm(#[from] GbmError),
    #[error("no labelled events to train on")]
    EmptyTrainingSet,
    #[error("model has no submodel for {0} events")]
    MissingSubmodel(Grain),
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model version {found} (expected {expected})")]
    UnknownModelVersion { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Gbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedModel {
    Mlp(MlpModel),
    Gbm {
        fine: Option<GbmModel>,
        coarse: Option<GbmModel>,
    },
}

/// Everything prediction needs: the model plus the preprocessing state
/// fitted at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub params: ParamsByGrain,
    pub scalers: Scalers,
    pub known_devices: BTreeSet<String>,
    pub device_tiers: String,
    pub model: TrainedModel,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    bundle: ModelBundle,
}

#[derive(Deserialize)]
struct BundleHeader {
    format: String,
    version: u32,
}

impl ModelBundle {
    pub fn kind(&self) -> ModelKind {
        match self.model {
            TrainedModel::Mlp(_) => ModelKind::Mlp,
            TrainedModel::Gbm { .. } => ModelKind::Gbm,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&BundleFile {
            format: BUNDLE_FORMAT.to_string(),
            version: BUNDLE_FORMAT_VERSION,
            bundle: self.clone(),
        })
        .expect("bundle serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let header: BundleHeader =
            serde_json::from_str(text).map_err(|e| PipelineError::Format(e.to_string()))?;
        if header.format != BUNDLE_FORMAT {
            return Err(PipelineError::Format(format!("not a model bundle: `{}`", header.format)));
        }
        if header.version != BUNDLE_FORMAT_VERSION {
            return Err(PipelineError::UnknownModelVersion {
                found: header.version,
                expected: BUNDLE_FORMAT_VERSION,
            });
        }
        let file: BundleFile =
            serde_json::from_str(text).map_err(|e| PipelineError::Format(e.to_string()))?;
        Ok(file.bundle)
    }

    fn tiers(&self) -> Result<DeviceTiers, PipelineError> {
        Ok(DeviceTiers::parse(&self.device_tiers)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub params: ParamsByGrain,
    pub mlp: TrainConfig,
    pub gbm: GbmConfig,
    /// `None` trains the single `gbm` config.
    pub gbm_grid: Option<GbmGrid>,
    /// Replace the shipped binary threshold with the F1-optimal one on the
    /// validation split.
    pub tune_binary_threshold: bool,
    pub device_tiers: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            params: ParamsByGrain::shipped_default(),
            mlp: TrainConfig::default(),
            gbm: GbmConfig::default(),
            gbm_grid: None,
            tune_binary_threshold: true,
            device_tiers: DEFAULT_DEVICE_TIERS.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmReport {
    pub grain: Grain,
    pub rows: usize,
    pub config: GbmConfig,
    pub log: GbmLog,
    pub binary_threshold: Option<f64>,
    /// TSV, present when a grid was searched.
    pub leaderboard: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainReport {
    Mlp(MlpLog),
    Gbm(Vec<GbmReport>),
}

/// Devices seen on either end in `events`.
pub fn device_vocabulary<'a>(events: impl IntoIterator<Item = &'a Event>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for e in events {
        out.insert(e.metadata.tx_device.clone());
        out.insert(e.metadata.rx_device.clone());
    }
    out.remove(UNKNOWN);
    out
}

/// Copy of `event` with both device names passed through [`remap_unseen_device`].
pub fn remap_devices(event: &Event, known: &BTreeSet<String>) -> Event {
    let mut e = event.clone();
    if e.metadata.tx_device != UNKNOWN {
        e.metadata.tx_device = remap_unseen_device(&e.metadata.tx_device, known);
    }
    if e.metadata.rx_device != UNKNOWN {
        e.metadata.rx_device = remap_unseen_device(&e.metadata.rx_device, known);
    }
    e
}

/// Feature vectors for `events`, in input order.
pub fn features_for(
    events: &[Event],
    params: &ParamsByGrain,
    scalers: &Scalers,
    tiers: &DeviceTiers,
) -> Result<Vec<FeatureVector>, FeatureError> {
    events
        .par_iter()
        .map(|e| extract_features(e, params, scalers, tiers))
        .collect()
}

const GBM_NUMERIC: [&str; 3] = ["predicted_distance_m", "norm_mean_rssi", "norm_path_loss"];

fn code_levels(n: u8) -> Vec<String> {
    (0..n).map(|c| c.to_string()).collect()
}

/// GBM schema: the three numeric features, the five metadata codes as
/// categoricals, and the raw device names as categoricals over `devices`.
pub fn gbm_schema(devices: &BTreeSet<String>) -> FeatureSchema {
    let mut features: Vec<FeatureSpec> = GBM_NUMERIC.iter().map(|n| FeatureSpec::numeric(n)).collect();
    for name in ["tx_power", "tx_carry", "rx_carry", "tx_pose", "rx_pose"] {
        features.push(FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical { levels: code_levels(3) },
        });
    }
    let mut names: Vec<String> = devices.iter().cloned().collect();
    names.push(UNKNOWN.to_string());
    for name in ["tx_device", "rx_device"] {
        features.push(FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical { levels: names.clone() },
        });
    }
    FeatureSchema { features }
}

/// One GBM row; `event` must already be device-remapped.
pub fn gbm_row(schema: &FeatureSchema, event: &Event, fv: &FeatureVector) -> Vec<f64> {
    let m = &event.metadata;
    let f = &schema.features;
    vec![
        fv.predicted_distance_m,
        fv.norm_mean_rssi,
        fv.norm_path_loss,
        tx_power_code(m.tx_power_dbm) as f64,
        carry_code(m.tx_carry) as f64,
        carry_code(m.rx_carry) as f64,
        pose_code(m.tx_pose) as f64,
        pose_code(m.rx_pose) as f64,
        f[8].encode_level(&m.tx_device),
        f[9].encode_level(&m.rx_device),
    ]
}

fn task_for(grain: Grain) -> Task {
    match grain {
        Grain::Fine => Task::MultiClass4,
        Grain::Coarse => Task::Binary,
    }
}

fn labelled(dataset: &Dataset) -> Result<(Vec<Event>, Vec<GroundTruthLabel>), PipelineError> {
    let pairs = dataset.labeled()?;
    if pairs.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    Ok(pairs.into_iter().map(|(e, l)| (e.clone(), l)).unzip())
}

/// F1-optimal binary threshold from the validation part of the 80/20 split,
/// using the model fitted on the training part.
fn tuned_threshold(rows: &Matrix, y: &[f64], cfg: &GbmConfig) -> Result<f64, PipelineError> {
    let (split_model, _) = train_gbm(rows, y, Task::Binary, cfg)?;
    let (_, val) = validation_split(y, Task::Binary, cfg)?;
    let probs = val
        .iter()
        .map(|&i| Ok(split_model.predict_proba(&rows.rows[i])?[0]))
        .collect::<Result<Vec<f64>, GbmError>>()?;
    let positive: Vec<bool> = val.iter().map(|&i| y[i] == 1.8).collect();
    let (t, f1) = tune_binary_threshold(&probs, &positive)?;
    let cut = strict_threshold(&probs, t);
    log::info!("binary threshold tuned to {cut:.4} (validation f1 {f1:.4})");
    Ok(cut)
}

/// Fits scalers on the training events, then trains the requested model.
pub fn train_pipeline(
    train: &Dataset,
    kind: ModelKind,
    config: &PipelineConfig,
) -> Result<(ModelBundle, TrainReport), PipelineError> {
    let (events, labels) = labelled(train)?;
    let tiers = DeviceTiers::parse(&config.device_tiers)?;
    let known_devices = device_vocabulary(&events);
    let scalers = fit_scalers(&events)?;
    let fvs = features_for(&events, &config.params, &scalers, &tiers)?;

    let (model, report) = match kind {
        ModelKind::Mlp => {
            let xs: Vec<Vec<f64>> = fvs.iter().map(|f| f.to_array().to_vec()).collect();
            let ys: Vec<usize> = labels
                .iter()
                .map(|l| class_index(l.max_distance_m).expect("labels are class distances"))
                .collect();
            let (model, log) = train_mlp(&xs, &ys, distance_classes(), &config.mlp)?;
            (TrainedModel::Mlp(model), TrainReport::Mlp(log))
        }
        ModelKind::Gbm => {
            let schema = gbm_schema(&known_devices);
            let mut models = BTreeMap::new();
            let mut reports = Vec::new();
            for grain in Grain::BOTH {
                let idx: Vec<usize> = (0..events.len()).filter(|&i| labels[i].grain == grain).collect();
                if idx.is_empty() {
                    log::warn!("no {grain} events in training data, skipping that submodel");
                    continue;
                }
                let rows = Matrix {
                    schema: schema.clone(),
                    rows: idx.iter().map(|&i| gbm_row(&schema, &events[i], &fvs[i])).collect(),
                };
                let y: Vec<f64> = idx.iter().map(|&i| labels[i].max_distance_m).collect();
                let task = task_for(grain);
                let (model, report) = match &config.gbm_grid {
                    Some(grid) => {
                        let outcome = grid_search_gbm(&rows, &y, task, &config.gbm, grid)?;
                        let leaderboard = outcome.leaderboard_tsv(task);
                        let report = GbmReport {
                            grain,
                            rows: idx.len(),
                            config: outcome.best.clone(),
                            log: outcome.final_log,
                            leaderboard: Some(leaderboard),
                            binary_threshold: None,
                        };
                        (outcome.model, report)
                    }
                    None => {
                        // Early stopping picks the round count on the 80/20 split,
                        // then the final model is refit on every row.
                        let (_, split_log) = train_gbm(&rows, &y, task, &config.gbm)?;
                        let (model, _) =
                            train_gbm_rounds(&rows, &y, task, &config.gbm, split_log.kept_rounds)?;
                        let report = GbmReport {
                            grain,
                            rows: idx.len(),
                            config: config.gbm.clone(),
                            log: split_log,
                            leaderboard: None,
                            binary_threshold: None,
                        };
                        (model, report)
                    }
                };
                let mut model = model;
                let mut report = report;
                if task == Task::Binary && config.tune_binary_threshold {
                    let t = tuned_threshold(&rows, &y, &report.config)?;
                    model.thresholds.binary = t;
                    report.binary_threshold = Some(t);
                }
                models.insert(grain, model);
                reports.push(report);
            }
            (
                TrainedModel::Gbm {
                    fine: models.remove(&Grain::Fine),
                    coarse: models.remove(&Grain::Coarse),
                },
                TrainReport::Gbm(reports),
            )
        }
    };
    Ok((
        ModelBundle {
            params: config.params,
            scalers,
            known_devices,
            device_tiers: config.device_tiers.clone(),
            model,
        },
        report,
    ))
}

/// Predicted distance for every event, keyed by file id.
pub fn predict_pipeline(
    bundle: &ModelBundle,
    events: &[Event],
) -> Result<BTreeMap<String, f64>, PipelineError> {
    let tiers = bundle.tiers()?;
    let remapped: Vec<Event> = events
        .iter()
        .map(|e| remap_devices(e, &bundle.known_devices))
        .collect();
    let fvs = features_for(&remapped, &bundle.params, &bundle.scalers, &tiers)?;
    let mut out = BTreeMap::new();
    for (event, fv) in remapped.iter().zip(&fvs) {
        let d = match &bundle.model {
            TrainedModel::Mlp(model) => model.predict(&fv.to_array())?,
            TrainedModel::Gbm { fine, coarse } => {
                let grain = event.grain();
                let model = match grain {
                    Grain::Fine => fine.as_ref(),
                    Grain::Coarse => coarse.as_ref(),
                }
                .ok_or(PipelineError::MissingSubmodel(grain))?;
                model.predict_distance(&gbm_row(&model.schema, event, fv))?
            }
        };
        out.insert(event.file_id().to_string(), d);
    }
    Ok(out)
}
