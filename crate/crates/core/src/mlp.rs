//! Feed-forward classifier: ReLU hidden layers, softmax output over the four
//! distance classes, trained with Adam on minibatches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::FINE_LABELS;

pub const MLP_FORMAT: &str = "tc4tl-mlp";
pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("input has {found} features, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("target class {0} out of range")]
    BadTarget(usize),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model version {found} (expected {expected})")]
    UnknownModelVersion { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean squared error between softmax output and one-hot target.
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: Loss,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![128, 128, 128],
            epochs: 4,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: Loss::Mse,
            validation_fraction: 0.10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<(), MlpError> {
        let bad = |m: &str| Err(MlpError::InvalidConfig(m.to_string()));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// `(train, validation)` row counts for `rows` examples.
    pub fn split_sizes(&self, rows: usize) -> (usize, usize) {
        let validation = ((rows as f64) * self.validation_fraction).round() as usize;
        let validation = validation.min(rows.saturating_sub(1));
        (rows - validation, validation)
    }
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform weights in `±sqrt(6 / fan_in)`, zero bias.
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
    /// Distance (m) for each output unit.
    pub class_labels: Vec<f64>,
    pub config: TrainConfig,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; exact ties go to the higher index.
pub(crate) fn argmax_high(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

/// Per-layer weight and bias gradients, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Randomly initialised network `inputs -> hidden... -> class_labels.len()`.
    pub fn new(inputs: usize, config: TrainConfig, class_labels: Vec<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![inputs];
        sizes.extend(&config.hidden);
        sizes.push(class_labels.len());
        let layers = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut rng))
            .collect();
        MlpModel {
            layers,
            class_labels,
            config,
        }
    }

    /// Network with every weight and bias zero.
    pub fn zeros(inputs: usize, hidden: &[usize], class_labels: Vec<f64>) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend(hidden);
        sizes.push(class_labels.len());
        MlpModel {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            class_labels,
            config: TrainConfig {
                hidden: hidden.to_vec(),
                ..TrainConfig::default()
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Pre-activations of every layer for one input.
    fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut activation = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(&activation, &mut z);
            if i + 1 < self.layers.len() {
                activation = z.iter().map(|v| v.max(0.0)).collect();
            }
            zs.push(z);
        }
        zs
    }

    /// Class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        if x.len() != self.input_dim() {
            return Err(MlpError::ShapeMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let zs = self.pre_activations(x);
        Ok(softmax(zs.last().expect("model has layers")))
    }

    /// Distance label of the most probable class (ties toward larger distance).
    pub fn predict(&self, x: &[f64]) -> Result<f64, MlpError> {
        Ok(self.class_labels[argmax_high(&self.forward(x)?)])
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, MlpError> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    fn sample_loss(&self, probs: &[f64], target: usize, loss: Loss) -> f64 {
        match loss {
            Loss::Mse => {
                probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (p - if k == target { 1.0 } else { 0.0 }).powi(2))
                    .sum::<f64>()
                    / probs.len() as f64
            }
            Loss::CrossEntropy => -probs[target].max(1e-300).ln(),
        }
    }

    /// Mean loss over the given rows.
    pub fn loss(&self, xs: &[Vec<f64>], targets: &[usize], loss: Loss) -> Result<f64, MlpError> {
        let mut total = 0.0;
        for (x, &t) in xs.iter().zip(targets) {
            total += self.sample_loss(&self.forward(x)?, t, loss);
        }
        Ok(total / xs.len().max(1) as f64)
    }

    /// Mean loss over the batch and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        xs: &[&[f64]],
        targets: &[usize],
        loss: Loss,
    ) -> Result<(f64, Gradients), MlpError> {
        let mut grads = Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        };
        let scale = 1.0 / xs.len().max(1) as f64;
        let mut total = 0.0;
        for (x, &target) in xs.iter().zip(targets) {
            if x.len() != self.input_dim() {
                return Err(MlpError::ShapeMismatch {
                    expected: self.input_dim(),
                    found: x.len(),
                });
            }
            if target >= self.class_labels.len() {
                return Err(MlpError::BadTarget(target));
            }
            let zs = self.pre_activations(x);
            let probs = softmax(zs.last().expect("model has layers"));
            total += self.sample_loss(&probs, target, loss);

            let k = probs.len() as f64;
            let mut delta: Vec<f64> = match loss {
                Loss::Mse => {
                    let g: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, p)| 2.0 * (p - if j == target { 1.0 } else { 0.0 }) / k)
                        .collect();
                    let dot: f64 = g.iter().zip(&probs).map(|(a, b)| a * b).sum();
                    probs.iter().zip(&g).map(|(p, gj)| p * (gj - dot)).collect()
                }
                Loss::CrossEntropy => probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| p - if j == target { 1.0 } else { 0.0 })
                    .collect(),
            };

            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input: Vec<f64> = if l == 0 {
                    x.to_vec()
                } else {
                    zs[l - 1].iter().map(|v| v.max(0.0)).collect()
                };
                let gw = &mut grads.weights[l];
                for (o, d) in delta.iter().enumerate() {
                    grads.bias[l][o] += d * scale;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(&input) {
                        *g += d * a * scale;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, z) in prev.iter_mut().zip(&zs[l - 1]) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        Ok((total * scale, grads))
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MLP_FORMAT.to_string(),
            version: MLP_FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, MlpError> {
        let header: FileHeader =
            serde_json::from_str(text).map_err(|e| MlpError::Format(e.to_string()))?;
        if header.format != MLP_FORMAT {
            return Err(MlpError::Format(format!("not an MLP model: `{}`", header.format)));
        }
        if header.version != MLP_FORMAT_VERSION {
            return Err(MlpError::UnknownModelVersion {
                found: header.version,
                expected: MLP_FORMAT_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| MlpError::Format(e.to_string()))?;
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: MlpModel,
}

#[derive(Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
}

struct Adam {
    step: i32,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let w: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
        let b: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
        Adam {
            step: 0,
            m_w: w.clone(),
            v_w: w,
            m_b: b.clone(),
            v_b: b,
        }
    }

    fn update(&mut self, model: &mut MlpModel, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let rule = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            rule(&mut layer.weights, &grads.weights[l], &mut self.m_w[l], &mut self.v_w[l]);
            rule(&mut layer.bias, &grads.bias[l], &mut self.m_b[l], &mut self.v_b[l]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_rows: usize,
    pub validation_rows: usize,
    /// Training-set loss before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochLog>,
}

/// Trains a classifier on `xs` with class indices `targets`.
///
/// A seeded shuffle holds out `validation_fraction` of the rows; the rest are
/// visited in reshuffled minibatches every epoch. Validation loss is logged
/// only. The returned model is the state after the last epoch.
pub fn train_mlp(
    xs: &[Vec<f64>],
    targets: &[usize],
    class_labels: Vec<f64>,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainingLog), MlpError> {
    config.check()?;
    if xs.is_empty() || xs.len() != targets.len() {
        return Err(MlpError::EmptyTrainingSet);
    }
    let inputs = xs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MlpModel::new(inputs, config.clone(), class_labels, rng.random());

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut rng);
    let (train_rows, validation_rows) = config.split_sizes(xs.len());
    let (validation_idx, train_idx) = order.split_at(validation_rows);
    let mut train_idx = train_idx.to_vec();
    let gather = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| xs[i].clone()).collect(),
            idx.iter().map(|&i| targets[i]).collect(),
        )
    };
    let (train_x, train_y) = gather(&train_idx);
    let (val_x, val_y) = gather(validation_idx);

    let initial_train_loss = model.loss(&train_x, &train_y, config.loss)?;
    let mut adam = Adam::new(&model);
    let mut log = TrainingLog {
        train_rows,
        validation_rows,
        initial_train_loss,
        epochs: Vec::with_capacity(config.epochs),
    };
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(config.batch_size) {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = model.loss_and_gradients(&bx, &by, config.loss)?;
            if !loss.is_finite() {
                return Err(MlpError::NonFiniteLoss { epoch });
            }
            adam.update(&mut model, &grads, config);
        }
        let train_loss = model.loss(&train_x, &train_y, config.loss)?;
        let validation_loss = if val_x.is_empty() {
            f64::NAN
        } else {
            model.loss(&val_x, &val_y, config.loss)?
        };
        if !train_loss.is_finite() {
            return Err(MlpError::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: train loss {train_loss:.6}, validation loss {validation_loss:.6}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
        });
    }
    Ok((model, log))
}

/// The four-class distance labels in output order.
pub fn distance_classes() -> Vec<f64> {
    FINE_LABELS.to_vec()
}
