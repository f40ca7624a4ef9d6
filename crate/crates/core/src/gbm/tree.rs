//! Depth-limited regression trees fit to boosting gradients.
//!
//! Splits maximise `G_L^2/H_L + G_R^2/H_R - G^2/H`, the reduction in
//! hessian-weighted squared error against the Newton targets `-g/h`.
//! Numeric features split at midpoints between adjacent distinct values.
//! Categorical features split on arbitrary level subsets: levels are ordered
//! by their mean target and only contiguous prefixes of that order are
//! scanned, which is exact for weighted squared error.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureSchema};

/// Bound on leaf values, guarding Newton steps against vanishing hessians.
pub const MAX_LEAF_VALUE: f64 = 19.0;

/// Smallest gain accepted for a split.
const MIN_GAIN: f64 = 1e-12;

/// Row-major feature matrix. Categorical cells hold the level index;
/// [`UNSEEN_LEVEL`] marks a level absent from the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub schema: FeatureSchema,
    pub rows: Vec<Vec<f64>>,
}

pub const UNSEEN_LEVEL: f64 = -1.0;

impl Matrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Matrix {
        Matrix {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitKind {
    /// Rows with `value < threshold` go left.
    NumericThreshold(f64),
    /// Rows whose level is in the set go left; every other level goes right.
    CategoricalSubset(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub feature: usize,
    pub kind: SplitKind,
    pub gain: f64,
}

impl SplitCandidate {
    pub fn goes_left(&self, row: &[f64]) -> bool {
        goes_left(&self.kind, row[self.feature])
    }
}

fn goes_left(kind: &SplitKind, value: f64) -> bool {
    match kind {
        SplitKind::NumericThreshold(t) => value < *t,
        SplitKind::CategoricalSubset(levels) => {
            value >= 0.0 && levels.binary_search(&(value as u32)).is_ok()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        kind: SplitKind,
        gain: f64,
        left: usize,
        right: usize,
    },
}

/// A fitted tree stored as a flat node array with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    kind,
                    left,
                    right,
                    ..
                } => at = if goes_left(kind, row[*feature]) { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn root_split(&self) -> Option<SplitCandidate> {
        match &self.nodes[0] {
            Node::Leaf { .. } => None,
            Node::Split {
                feature, kind, gain, ..
            } => Some(SplitCandidate {
                feature: *feature,
                kind: kind.clone(),
                gain: *gain,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_rows: usize,
    pub sample_rate: f64,
    pub col_sample_rate: f64,
}

pub fn leaf_value(g: f64, h: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    (-g / h).clamp(-MAX_LEAF_VALUE, MAX_LEAF_VALUE)
}

/// Split gain from left/right gradient and hessian sums.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64) -> f64 {
    let term = |g: f64, h: f64| if h > 0.0 { g * g / h } else { 0.0 };
    term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr)
}

fn better(candidate: f64, incumbent: Option<&SplitCandidate>) -> bool {
    candidate > MIN_GAIN && incumbent.is_none_or(|b| candidate > b.gain)
}

/// Best split over `features` for the rows in `rows`.
///
/// `sorted` holds, for each numeric feature in `features`, the node's rows
/// ordered by that feature (other entries may be empty). Ties keep the
/// earlier feature and, within a feature, the earlier candidate.
fn best_split_presorted(
    data: &Matrix,
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    sorted: &[Vec<usize>],
    features: &[usize],
    min_rows: usize,
) -> Option<SplitCandidate> {
    let min_rows = min_rows.max(1);
    if rows.len() < 2 * min_rows {
        return None;
    }
    let g_total: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_total: f64 = rows.iter().map(|&r| hess[r]).sum();
    let mut best: Option<SplitCandidate> = None;

    for &f in features {
        match &data.schema.features[f].kind {
            FeatureKind::Numeric => {
                let order = &sorted[f];
                let (mut gl, mut hl) = (0.0, 0.0);
                for i in 0..order.len() - 1 {
                    let r = order[i];
                    gl += grad[r];
                    hl += hess[r];
                    let here = data.rows[r][f];
                    let next = data.rows[order[i + 1]][f];
                    let left_count = i + 1;
                    if here == next || left_count < min_rows || order.len() - left_count < min_rows {
                        continue;
                    }
                    let gain = split_gain(gl, hl, g_total - gl, h_total - hl);
                    if better(gain, best.as_ref()) {
                        best = Some(SplitCandidate {
                            feature: f,
                            kind: SplitKind::NumericThreshold(here + (next - here) / 2.0),
                            gain,
                        });
                    }
                }
            }
            FeatureKind::Categorical { levels } => {
                // (level, G, H, count) for levels present at this node; unseen
                // levels are pooled under u32::MAX and always go right.
                let mut stats = vec![(0.0f64, 0.0f64, 0usize); levels.len() + 1];
                for &r in rows {
                    let v = data.rows[r][f];
                    let slot = if v >= 0.0 && (v as usize) < levels.len() {
                        v as usize
                    } else {
                        levels.len()
                    };
                    stats[slot].0 += grad[r];
                    stats[slot].1 += hess[r];
                    stats[slot].2 += 1;
                }
                let unseen = stats.pop().expect("unseen slot");
                let mut present: Vec<(u32, f64, f64, usize)> = stats
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.2 > 0)
                    .map(|(l, s)| (l as u32, s.0, s.1, s.2))
                    .collect();
                if present.len() < 2 {
                    continue;
                }
                let mean = |g: f64, h: f64| if h > 0.0 { g / h } else { 0.0 };
                present.sort_by(|a, b| {
                    mean(a.1, a.2)
                        .partial_cmp(&mean(b.1, b.2))
                        .unwrap_or(Ordering::Equal)
                });
                // Merge levels with identical mean target into one block so the
                // chosen partition cannot depend on level numbering.
                let mut blocks: Vec<(Vec<u32>, f64, f64, usize)> = Vec::new();
                for (level, g, h, n) in present {
                    match blocks.last_mut() {
                        Some(b) if b.1 * h == g * b.2 => {
                            b.0.push(level);
                            b.1 += g;
                            b.2 += h;
                            b.3 += n;
                        }
                        _ => blocks.push((vec![level], g, h, n)),
                    }
                }
                let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
                let n_total = rows.len() - unseen.2;
                for k in 0..blocks.len().saturating_sub(1) {
                    gl += blocks[k].1;
                    hl += blocks[k].2;
                    nl += blocks[k].3;
                    let nr = n_total - nl + unseen.2;
                    if nl < min_rows || nr < min_rows {
                        continue;
                    }
                    let gain = split_gain(gl, hl, g_total - gl, h_total - hl);
                    if better(gain, best.as_ref()) {
                        let mut left: Vec<u32> =
                            blocks[..=k].iter().flat_map(|b| b.0.iter().copied()).collect();
                        left.sort_unstable();
                        best = Some(SplitCandidate {
                            feature: f,
                            kind: SplitKind::CategoricalSubset(left),
                            gain,
                        });
                    }
                }
            }
        }
    }
    best
}

fn sort_rows(data: &Matrix, rows: &[usize], feature: usize) -> Vec<usize> {
    let mut order = rows.to_vec();
    order.sort_by(|&a, &b| data.rows[a][feature].total_cmp(&data.rows[b][feature]));
    order
}

fn presort(data: &Matrix, rows: &[usize], features: &[usize]) -> Vec<Vec<usize>> {
    let mut sorted = vec![Vec::new(); data.schema.features.len()];
    for &f in features {
        if data.schema.features[f].kind == FeatureKind::Numeric {
            sorted[f] = sort_rows(data, rows, f);
        }
    }
    sorted
}

/// Best split at a single node over all features.
pub fn best_split(
    data: &Matrix,
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    min_rows: usize,
) -> Option<SplitCandidate> {
    let features: Vec<usize> = (0..data.schema.features.len()).collect();
    let sorted = presort(data, rows, &features);
    best_split_presorted(data, grad, hess, rows, &sorted, &features, min_rows)
}

/// Fits one tree. Rows are subsampled without replacement at `sample_rate`
/// and features at `col_sample_rate`, both once per tree from `rng`.
pub fn fit_tree(
    grad: &[f64],
    hess: &[f64],
    data: &Matrix,
    params: &TreeParams,
    rng: &mut impl Rng,
) -> RegressionTree {
    let n = data.rows.len();
    let p = data.schema.features.len();
    let take = |total: usize, rate: f64| ((total as f64 * rate).round() as usize).clamp(1, total.max(1));
    let mut rows: Vec<usize> = if params.sample_rate < 1.0 && n > 0 {
        sample(rng, n, take(n, params.sample_rate)).into_vec()
    } else {
        (0..n).collect()
    };
    rows.sort_unstable();
    let mut features: Vec<usize> = if params.col_sample_rate < 1.0 && p > 0 {
        sample(rng, p, take(p, params.col_sample_rate)).into_vec()
    } else {
        (0..p).collect()
    };
    features.sort_unstable();

    let sorted = presort(data, &rows, &features);
    let mut tree = RegressionTree { nodes: Vec::new() };
    grow(&mut tree, data, grad, hess, rows, sorted, &features, params, 0);
    tree
}

#[allow(clippy::too_many_arguments)]
fn grow(
    tree: &mut RegressionTree,
    data: &Matrix,
    grad: &[f64],
    hess: &[f64],
    rows: Vec<usize>,
    sorted: Vec<Vec<usize>>,
    features: &[usize],
    params: &TreeParams,
    depth: usize,
) -> usize {
    let id = tree.nodes.len();
    let g: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h: f64 = rows.iter().map(|&r| hess[r]).sum();
    tree.nodes.push(Node::Leaf {
        value: leaf_value(g, h),
    });
    if depth >= params.max_depth {
        return id;
    }
    let Some(split) =
        best_split_presorted(data, grad, hess, &rows, &sorted, features, params.min_rows)
    else {
        return id;
    };

    let mut side = vec![false; data.rows.len()];
    for &r in &rows {
        side[r] = split.goes_left(&data.rows[r]);
    }
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| side[r]);
    let mut left_sorted = vec![Vec::new(); sorted.len()];
    let mut right_sorted = vec![Vec::new(); sorted.len()];
    for (f, order) in sorted.into_iter().enumerate() {
        if !order.is_empty() {
            (left_sorted[f], right_sorted[f]) = order.into_iter().partition(|&r| side[r]);
        }
    }
    let left = grow(tree, data, grad, hess, left_rows, left_sorted, features, params, depth + 1);
    let right = grow(tree, data, grad, hess, right_rows, right_sorted, features, params, depth + 1);
    tree.nodes[id] = Node::Split {
        feature: split.feature,
        kind: split.kind,
        gain: split.gain,
        left,
        right,
    };
    id
}
