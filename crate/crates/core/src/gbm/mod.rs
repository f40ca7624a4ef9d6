//! Gradient-boosted decision trees: a binary model (P of the 1.8 m class) for
//! coarse-grain events and a four-class softmax model for fine-grain events.

mod boost;
mod tree;

pub use boost::{
    auc, grid_search_gbm, mean_per_class_error, train_gbm, train_gbm_rounds, GbmGrid, GridOutcome,
    LeaderboardRow, RoundLog, TrainingLog, validation_split,
};
pub use tree::{
    best_split, fit_tree, leaf_value, split_gain, Matrix, Node, RegressionTree, SplitCandidate,
    SplitKind, TreeParams, MAX_LEAF_VALUE, UNSEEN_LEVEL,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{COARSE_LABELS, FINE_LABELS};
use crate::mlp::{argmax_high, softmax};

pub const GBM_FORMAT: &str = "tc4tl-gbm";
pub const GBM_FORMAT_VERSION: u32 = 1;

/// Default cut on P(1.8 m) for the binary model.
pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.56;
/// Default P(4.5 m) above which the multiclass model predicts 4.5 m.
pub const DEFAULT_MULTICLASS_45_THRESHOLD: f64 = 0.28;

#[derive(Debug, Error, PartialEq)]
pub enum GbmError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("validation labels contain a single class")]
    SingleClassValidation,
    #[error("label {0} is not valid for this task")]
    BadLabel(f64),
    #[error("model task is {found:?}, operation needs {expected:?}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("row has {found} features, schema has {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model version {found} (expected {expected})")]
    UnknownModelVersion { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// 1.8 m vs 4.5 m.
    Binary,
    /// 1.2 / 1.8 / 3.0 / 4.5 m.
    MultiClass4,
}

impl Task {
    pub fn labels(self) -> &'static [f64] {
        match self {
            Task::Binary => &COARSE_LABELS,
            Task::MultiClass4 => &FINE_LABELS,
        }
    }

    /// Number of raw model outputs (trees per round).
    pub fn outputs(self) -> usize {
        match self {
            Task::Binary => 1,
            Task::MultiClass4 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                levels: levels.iter().map(|l| l.to_string()).collect(),
            },
        }
    }

    /// Index of `level`, or [`UNSEEN_LEVEL`] when it is not in the level map.
    pub fn encode_level(&self, level: &str) -> f64 {
        match &self.kind {
            FeatureKind::Categorical { levels } => levels
                .iter()
                .position(|l| l == level)
                .map_or(UNSEEN_LEVEL, |i| i as f64),
            FeatureKind::Numeric => UNSEEN_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmConfig {
    pub ntrees: usize,
    pub max_depth: usize,
    pub col_sample_rate: f64,
    pub sample_rate: f64,
    pub learning_rate: f64,
    /// Minimum rows in each child of a split.
    pub min_rows: usize,
    /// 0 disables early stopping.
    pub early_stopping_rounds: usize,
    pub early_stopping_tolerance: f64,
    /// Fraction of rows used for fitting; the rest drive early stopping.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            ntrees: 50,
            max_depth: 5,
            col_sample_rate: 1.0,
            sample_rate: 1.0,
            learning_rate: 0.1,
            min_rows: 10,
            early_stopping_rounds: 5,
            early_stopping_tolerance: 1e-3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl GbmConfig {
    pub fn check(&self) -> Result<(), GbmError> {
        let rate = |r: f64| r > 0.0 && r <= 1.0;
        if !rate(self.col_sample_rate) || !rate(self.sample_rate) {
            return Err(GbmError::InvalidConfig("sampling rates must be in (0, 1]".into()));
        }
        if self.ntrees == 0 || self.max_depth == 0 {
            return Err(GbmError::InvalidConfig("ntrees and max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GbmError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(GbmError::InvalidConfig("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_rows: self.min_rows,
            sample_rate: self.sample_rate,
            col_sample_rate: self.col_sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionThresholds {
    pub binary: f64,
    pub multiclass_45: f64,
}

impl Default for DecisionThresholds {
    fn default() -> Self {
        DecisionThresholds {
            binary: DEFAULT_BINARY_THRESHOLD,
            multiclass_45: DEFAULT_MULTICLASS_45_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub task: Task,
    pub schema: FeatureSchema,
    /// Initial raw score per output: log-odds (binary) or log-priors (multiclass).
    pub base_score: Vec<f64>,
    pub learning_rate: f64,
    /// `trees[round][output]`.
    pub trees: Vec<Vec<RegressionTree>>,
    pub thresholds: DecisionThresholds,
    pub config: GbmConfig,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary decision: strictly above the threshold means 1.8 m, otherwise 4.5 m.
pub fn decide_binary(p_close: f64, threshold: f64) -> f64 {
    if p_close > threshold {
        1.8
    } else {
        4.5
    }
}

/// Multiclass decision over `[p1.2, p1.8, p3.0, p4.5]`: 4.5 m whenever its
/// probability exceeds `threshold_45`, else the argmax with ties toward the
/// larger distance.
pub fn decide_multiclass(probs: &[f64], threshold_45: f64) -> f64 {
    if probs[3] > threshold_45 {
        return FINE_LABELS[3];
    }
    FINE_LABELS[argmax_high(probs)]
}

impl GbmModel {
    pub fn rounds(&self) -> usize {
        self.trees.len()
    }

    fn check_row(&self, row: &[f64]) -> Result<(), GbmError> {
        if row.len() != self.schema.features.len() {
            return Err(GbmError::ShapeMismatch {
                expected: self.schema.features.len(),
                found: row.len(),
            });
        }
        Ok(())
    }

    /// Raw additive scores: `base_score + learning_rate * sum(tree outputs)`.
    pub fn predict_raw(&self, row: &[f64]) -> Result<Vec<f64>, GbmError> {
        self.check_row(row)?;
        let mut raw = self.base_score.clone();
        for round in &self.trees {
            for (k, tree) in round.iter().enumerate() {
                raw[k] += self.learning_rate * tree.predict(row);
            }
        }
        Ok(raw)
    }

    /// `[P(1.8 m)]` for binary models, the four class probabilities otherwise.
    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>, GbmError> {
        let raw = self.predict_raw(row)?;
        Ok(match self.task {
            Task::Binary => vec![sigmoid(raw[0])],
            Task::MultiClass4 => softmax(&raw),
        })
    }

    fn expect(&self, task: Task) -> Result<(), GbmError> {
        if self.task != task {
            return Err(GbmError::TaskMismatch {
                expected: task,
                found: self.task,
            });
        }
        Ok(())
    }

    pub fn predict_binary(&self, row: &[f64]) -> Result<f64, GbmError> {
        self.expect(Task::Binary)?;
        Ok(decide_binary(self.predict_proba(row)?[0], self.thresholds.binary))
    }

    pub fn predict_multiclass(&self, row: &[f64]) -> Result<f64, GbmError> {
        self.expect(Task::MultiClass4)?;
        Ok(decide_multiclass(
            &self.predict_proba(row)?,
            self.thresholds.multiclass_45,
        ))
    }

    /// Distance prediction using whichever rule matches the model's task.
    pub fn predict_distance(&self, row: &[f64]) -> Result<f64, GbmError> {
        match self.task {
            Task::Binary => self.predict_binary(row),
            Task::MultiClass4 => self.predict_multiclass(row),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: GBM_FORMAT.to_string(),
            version: GBM_FORMAT_VERSION,
            model: self.clone(),
        })
        .expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, GbmError> {
        let header: FileHeader =
            serde_json::from_str(text).map_err(|e| GbmError::Format(e.to_string()))?;
        if header.format != GBM_FORMAT {
            return Err(GbmError::Format(format!("not a GBM model: `{}`", header.format)));
        }
        if header.version != GBM_FORMAT_VERSION {
            return Err(GbmError::UnknownModelVersion {
                found: header.version,
                expected: GBM_FORMAT_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| GbmError::Format(e.to_string()))?;
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: GbmModel,
}

#[derive(Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Picks the threshold maximising F1 of the positive (1.8 m) class.
///
/// Every distinct probability is a candidate; a row counts as positive when
/// its probability is at least the candidate. Ties go to the smaller
/// threshold. Returns `(threshold, f1)`.
pub fn tune_binary_threshold(probs: &[f64], positive: &[bool]) -> Result<(f64, f64), GbmError> {
    let positives = positive.iter().filter(|p| **p).count();
    if positives == 0 || positives == positive.len() {
        return Err(GbmError::SingleClassValidation);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    // Sweep thresholds from high to low, adding each block of equal probabilities.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::INFINITY, -1.0);
    let mut i = 0;
    while i < order.len() {
        let t = probs[order[i]];
        while i < order.len() && probs[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let score = f1(tp, fp, positives - tp);
        if score >= best.1 {
            best = (t, score);
        }
    }
    Ok(best)
}

/// Turns a tuned `p >= t` cut into an equivalent value for the strict
/// `p > threshold` decision on the same probabilities: the midpoint between
/// `t` and the next lower distinct probability.
pub fn strict_threshold(probs: &[f64], t: f64) -> f64 {
    let below = probs.iter().copied().filter(|&p| p < t).fold(None, |m: Option<f64>, p| {
        Some(m.map_or(p, |m| m.max(p)))
    });
    (t + below.unwrap_or(0.0)) / 2.0
}
