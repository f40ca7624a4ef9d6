use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, Matrix, RegressionTree};
use super::{sigmoid, DecisionThresholds, GbmConfig, GbmError, GbmModel, Task};
use crate::mlp::{argmax_high, softmax};

/// Smallest probability used when turning class frequencies into log-priors.
const PRIOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: f64,
    /// AUC (binary) or mean per-class error (multiclass); `None` without a validation split.
    pub validation_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_rows: usize,
    pub validation_rows: usize,
    pub rounds: Vec<RoundLog>,
    pub kept_rounds: usize,
    pub best_metric: Option<f64>,
}

/// Area under the ROC curve, with tied scores counted as half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|p| **p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney: sum of midranks of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * order[i..j].iter().filter(|&&r| positive[r]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Mean over the classes present in `truth` of the fraction misclassified.
pub fn mean_per_class_error(predicted: &[usize], truth: &[usize], classes: usize) -> Option<f64> {
    let mut total = vec![0usize; classes];
    let mut wrong = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        total[t] += 1;
        if p != t {
            wrong[t] += 1;
        }
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&c| total[c] > 0)
        .map(|c| wrong[c] as f64 / total[c] as f64)
        .collect();
    if present.is_empty() {
        return None;
    }
    Some(present.iter().sum::<f64>() / present.len() as f64)
}

fn encode_labels(labels: &[f64], task: Task) -> Result<Vec<usize>, GbmError> {
    labels
        .iter()
        .map(|&d| {
            task.labels()
                .iter()
                .position(|&l| (l - d).abs() < 1e-9)
                .ok_or(GbmError::BadLabel(d))
        })
        .collect()
}

fn check_inputs(rows: &Matrix, labels: &[f64], task: Task) -> Result<Vec<usize>, GbmError> {
    if rows.rows.is_empty() {
        return Err(GbmError::EmptyTrainingSet);
    }
    if let Some(r) = rows.rows.iter().find(|r| r.len() != rows.schema.features.len()) {
        return Err(GbmError::ShapeMismatch {
            expected: rows.schema.features.len(),
            found: r.len(),
        });
    }
    let y = encode_labels(labels, task)?;
    if y.iter().all(|&c| c == y[0]) {
        return Err(GbmError::SingleClassTraining);
    }
    Ok(y)
}

/// The 80/20 (by default) split [`train_gbm`] uses for `labels`, as
/// `(train, validation)` row indices.
pub fn validation_split(labels: &[f64], task: Task, cfg: &GbmConfig) -> Result<(Vec<usize>, Vec<usize>), GbmError> {
    let y = encode_labels(labels, task)?;
    Ok(split_rows(&y, task.labels().len(), cfg.train_fraction, cfg.seed))
}

/// Seeded stratified split; returns (train, validation) row indices.
fn split_rows(y: &[usize], classes: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64) * (1.0 - train_fraction)).round() as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn base_score(y: &[usize], task: Task) -> Vec<f64> {
    let n = y.len() as f64;
    match task {
        Task::Binary => {
            // Class 0 (1.8 m) is the positive outcome.
            let p = (y.iter().filter(|&&c| c == 0).count() as f64 / n).clamp(PRIOR_FLOOR, 1.0 - PRIOR_FLOOR);
            vec![(p / (1.0 - p)).ln()]
        }
        Task::MultiClass4 => (0..4)
            .map(|c| {
                let p = y.iter().filter(|&&k| k == c).count() as f64 / n;
                p.max(PRIOR_FLOOR).ln()
            })
            .collect(),
    }
}

fn probabilities(raw: &[f64], task: Task) -> Vec<f64> {
    match task {
        Task::Binary => vec![sigmoid(raw[0])],
        Task::MultiClass4 => softmax(raw),
    }
}

/// Mean negative log-likelihood of the true classes.
fn log_loss(raw: &[Vec<f64>], y: &[usize], task: Task) -> f64 {
    let total: f64 = raw
        .iter()
        .zip(y)
        .map(|(r, &c)| {
            let p = probabilities(r, task);
            let pt = match task {
                Task::Binary if c == 0 => p[0],
                Task::Binary => 1.0 - p[0],
                Task::MultiClass4 => p[c],
            };
            -pt.max(1e-15).ln()
        })
        .sum();
    total / y.len() as f64
}

fn metric(raw: &[Vec<f64>], y: &[usize], task: Task) -> Option<f64> {
    match task {
        Task::Binary => {
            let scores: Vec<f64> = raw.iter().map(|r| r[0]).collect();
            let positive: Vec<bool> = y.iter().map(|&c| c == 0).collect();
            auc(&scores, &positive)
        }
        Task::MultiClass4 => {
            let predicted: Vec<usize> = raw.iter().map(|r| argmax_high(r)).collect();
            mean_per_class_error(&predicted, y, 4)
        }
    }
}

fn improves(task: Task, candidate: f64, best: f64, tolerance: f64) -> bool {
    match task {
        Task::Binary => candidate > best + tolerance,
        Task::MultiClass4 => candidate < best - tolerance,
    }
}

fn is_better(task: Task, a: f64, b: f64) -> bool {
    match task {
        Task::Binary => a > b,
        Task::MultiClass4 => a < b,
    }
}

/// Gradient and hessian of the loss for output `k` given raw scores.
fn grad_hess(raw: &[f64], class: usize, k: usize, task: Task) -> (f64, f64) {
    match task {
        Task::Binary => {
            let p = sigmoid(raw[0]);
            let y = if class == 0 { 1.0 } else { 0.0 };
            (p - y, (p * (1.0 - p)).max(1e-16))
        }
        Task::MultiClass4 => {
            let p = softmax(raw)[k];
            let y = if class == k { 1.0 } else { 0.0 };
            (p - y, (p * (1.0 - p)).max(1e-16))
        }
    }
}

struct Boosted {
    trees: Vec<Vec<RegressionTree>>,
    base: Vec<f64>,
    log: TrainingLog,
}

/// Core boosting loop. With a validation set, early stopping applies and
/// the returned trees are truncated to the best round.
fn boost(
    train: &Matrix,
    y: &[usize],
    val: Option<(&Matrix, &[usize])>,
    task: Task,
    cfg: &GbmConfig,
    max_rounds: usize,
) -> Boosted {
    let outputs = task.outputs();
    let base = base_score(y, task);
    let params = cfg.tree_params();
    let mut raw: Vec<Vec<f64>> = vec![base.clone(); train.len()];
    let mut val_raw: Vec<Vec<f64>> = val.map_or(Vec::new(), |(m, _)| vec![base.clone(); m.len()]);
    let mut trees: Vec<Vec<RegressionTree>> = Vec::new();
    let mut rounds = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stale = 0usize;

    for round in 0..max_rounds {
        let round_trees: Vec<RegressionTree> = (0..outputs)
            .map(|k| {
                let (grad, hess): (Vec<f64>, Vec<f64>) = raw
                    .iter()
                    .zip(y)
                    .map(|(r, &c)| grad_hess(r, c, k, task))
                    .unzip();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((round * outputs + k) as u64 + 1);
                fit_tree(&grad, &hess, train, &params, &mut rng)
            })
            .collect();
        for (r, row) in raw.iter_mut().zip(&train.rows) {
            for (k, t) in round_trees.iter().enumerate() {
                r[k] += cfg.learning_rate * t.predict(row);
            }
        }
        if let Some((m, _)) = val {
            for (r, row) in val_raw.iter_mut().zip(&m.rows) {
                for (k, t) in round_trees.iter().enumerate() {
                    r[k] += cfg.learning_rate * t.predict(row);
                }
            }
        }
        trees.push(round_trees);
        let validation_metric = val.and_then(|(_, vy)| metric(&val_raw, vy, task));
        rounds.push(RoundLog {
            round: round + 1,
            train_loss: log_loss(&raw, y, task),
            validation_metric,
        });
        if let Some(v) = validation_metric {
            // The kept round is the latest one matching the best metric so far;
            // only gains beyond the tolerance reset the patience counter.
            let (improved, at_least_as_good) = match best {
                None => (true, true),
                Some((_, b)) => (
                    improves(task, v, b, cfg.early_stopping_tolerance),
                    !is_better(task, b, v),
                ),
            };
            if at_least_as_good {
                best = Some((round + 1, v));
            }
            if improved {
                stale = 0;
            } else {
                stale += 1;
                if cfg.early_stopping_rounds > 0 && stale >= cfg.early_stopping_rounds {
                    break;
                }
            }
        }
    }
    let kept = best.map_or(trees.len(), |(r, _)| r);
    trees.truncate(kept);
    log::debug!("boosting {task:?}: {} rounds run, {kept} kept", rounds.len());
    Boosted {
        trees,
        base,
        log: TrainingLog {
            train_rows: train.len(),
            validation_rows: val.map_or(0, |(m, _)| m.len()),
            rounds,
            kept_rounds: kept,
            best_metric: best.map(|(_, v)| v),
        },
    }
}

fn assemble(task: Task, train: &Matrix, cfg: &GbmConfig, b: Boosted) -> GbmModel {
    GbmModel {
        task,
        schema: train.schema.clone(),
        base_score: b.base,
        learning_rate: cfg.learning_rate,
        trees: b.trees,
        thresholds: DecisionThresholds::default(),
        config: cfg.clone(),
    }
}

/// Trains on a seeded 80/20 split with early stopping on the held-out part.
pub fn train_gbm(
    rows: &Matrix,
    labels: &[f64],
    task: Task,
    cfg: &GbmConfig,
) -> Result<(GbmModel, TrainingLog), GbmError> {
    cfg.check()?;
    let y = check_inputs(rows, labels, task)?;
    let (tr, va) = split_rows(&y, task.labels().len(), cfg.train_fraction, cfg.seed);
    let train = rows.subset(&tr);
    let ty: Vec<usize> = tr.iter().map(|&i| y[i]).collect();
    if ty.iter().all(|&c| c == ty[0]) {
        return Err(GbmError::SingleClassTraining);
    }
    let val = rows.subset(&va);
    let vy: Vec<usize> = va.iter().map(|&i| y[i]).collect();
    let validation = (!va.is_empty()).then_some((&val, vy.as_slice()));
    let boosted = boost(&train, &ty, validation, task, cfg, cfg.ntrees);
    let log = boosted.log.clone();
    Ok((assemble(task, &train, cfg, boosted), log))
}

/// Trains on every row for exactly `rounds` rounds, without early stopping.
pub fn train_gbm_rounds(
    rows: &Matrix,
    labels: &[f64],
    task: Task,
    cfg: &GbmConfig,
    rounds: usize,
) -> Result<(GbmModel, TrainingLog), GbmError> {
    cfg.check()?;
    let y = check_inputs(rows, labels, task)?;
    let boosted = boost(rows, &y, None, task, cfg, rounds.max(1));
    let log = boosted.log.clone();
    Ok((assemble(task, rows, cfg, boosted), log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmGrid {
    pub ntrees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub col_sample_rate: Vec<f64>,
    pub sample_rate: Vec<f64>,
}

impl Default for GbmGrid {
    fn default() -> Self {
        GbmGrid {
            ntrees: vec![50, 100, 200],
            max_depth: vec![3, 5, 7],
            col_sample_rate: vec![0.8, 1.0],
            sample_rate: vec![0.8, 1.0],
        }
    }
}

impl GbmGrid {
    /// A grid holding only the values already in `cfg`.
    pub fn single(cfg: &GbmConfig) -> Self {
        GbmGrid {
            ntrees: vec![cfg.ntrees],
            max_depth: vec![cfg.max_depth],
            col_sample_rate: vec![cfg.col_sample_rate],
            sample_rate: vec![cfg.sample_rate],
        }
    }

    /// Cells in grid order (ntrees slowest, sample_rate fastest).
    pub fn cells(&self, base: &GbmConfig) -> Vec<GbmConfig> {
        let mut out = Vec::new();
        for &ntrees in &self.ntrees {
            for &max_depth in &self.max_depth {
                for &col_sample_rate in &self.col_sample_rate {
                    for &sample_rate in &self.sample_rate {
                        out.push(GbmConfig {
                            ntrees,
                            max_depth,
                            col_sample_rate,
                            sample_rate,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub grid_index: usize,
    pub config: GbmConfig,
    pub kept_rounds: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub best: GbmConfig,
    pub best_rounds: usize,
    /// Sorted best first; ties keep grid order.
    pub leaderboard: Vec<LeaderboardRow>,
    /// Retrained on every row with the winning config and round count.
    pub model: GbmModel,
    pub final_log: TrainingLog,
}

impl GridOutcome {
    pub fn leaderboard_tsv(&self, task: Task) -> String {
        let metric = match task {
            Task::Binary => "auc",
            Task::MultiClass4 => "mean_per_class_error",
        };
        let mut out = format!(
            "rank\tgrid_index\tntrees\tmax_depth\tcol_sample_rate\tsample_rate\tkept_rounds\t{metric}\n"
        );
        for (rank, row) in self.leaderboard.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\n",
                rank + 1,
                row.grid_index,
                row.config.ntrees,
                row.config.max_depth,
                row.config.col_sample_rate,
                row.config.sample_rate,
                row.kept_rounds,
                row.metric
            ));
        }
        out
    }
}

/// Fits every grid cell on the 80% split, ranks them by validation metric,
/// then retrains the winner on all rows.
pub fn grid_search_gbm(
    rows: &Matrix,
    labels: &[f64],
    task: Task,
    base: &GbmConfig,
    grid: &GbmGrid,
) -> Result<GridOutcome, GbmError> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(GbmError::EmptyGrid);
    }
    let results: Vec<Result<LeaderboardRow, GbmError>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let (_, log) = train_gbm(rows, labels, task, cfg)?;
            let metric = log.best_metric.ok_or(GbmError::SingleClassValidation)?;
            Ok(LeaderboardRow {
                grid_index: i,
                config: cfg.clone(),
                kept_rounds: log.kept_rounds,
                metric,
            })
        })
        .collect();
    let mut leaderboard = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    leaderboard.sort_by(|a, b| {
        if is_better(task, a.metric, b.metric) {
            std::cmp::Ordering::Less
        } else if is_better(task, b.metric, a.metric) {
            std::cmp::Ordering::Greater
        } else {
            a.grid_index.cmp(&b.grid_index)
        }
    });
    let winner = &leaderboard[0];
    let (model, final_log) = train_gbm_rounds(rows, labels, task, &winner.config, winner.kept_rounds)?;
    Ok(GridOutcome {
        best: winner.config.clone(),
        best_rounds: winner.kept_rounds,
        model,
        final_log,
        leaderboard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbm::{FeatureSchema, FeatureSpec};

    fn matrix(rows: Vec<Vec<f64>>, names: &[&str]) -> Matrix {
        Matrix {
            schema: FeatureSchema {
                features: names.iter().map(|n| FeatureSpec::numeric(n)).collect(),
            },
            rows,
        }
    }

    #[test]
    fn auc_matches_pair_count() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4];
        let p = [false, false, true, true, true];
        let mut wins = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if p[i] && !p[j] {
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auc(&s, &p).unwrap() - wins / 6.0).abs() < 1e-12);
        assert_eq!(auc(&[0.1], &[true]), None);
    }

    #[test]
    fn per_class_error_ignores_absent_classes() {
        assert_eq!(mean_per_class_error(&[0, 1, 1, 1], &[0, 0, 1, 1], 4), Some(0.25));
    }

    #[test]
    fn single_class_rejected() {
        let m = matrix(vec![vec![1.0], vec![2.0]], &["x"]);
        assert_eq!(
            train_gbm(&m, &[1.8, 1.8], Task::Binary, &GbmConfig::default()).unwrap_err(),
            GbmError::SingleClassTraining
        );
        let empty = matrix(vec![], &["x"]);
        assert_eq!(
            train_gbm(&empty, &[], Task::Binary, &GbmConfig::default()).unwrap_err(),
            GbmError::EmptyTrainingSet
        );
    }

    #[test]
    fn one_tree_means_one_round() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let labels: Vec<f64> = (0..40).map(|i| if i < 20 { 1.8 } else { 4.5 }).collect();
        let cfg = GbmConfig { ntrees: 1, min_rows: 1, ..GbmConfig::default() };
        let (model, _) = train_gbm(&matrix(rows, &["x"]), &labels, Task::Binary, &cfg).unwrap();
        assert_eq!(model.rounds(), 1);
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let y = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 3, 3];
        let (tr, va) = split_rows(&y, 4, 0.8, 3);
        assert_eq!(tr.len() + va.len(), y.len());
        for c in 0..4 {
            assert!(tr.iter().any(|&i| y[i] == c));
        }
    }
}
