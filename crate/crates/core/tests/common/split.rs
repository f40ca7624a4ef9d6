use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tc4tl::gbm::{best_split, fit_tree, FeatureSchema, FeatureSpec, Matrix, TreeParams};

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FixtureFeature {
    Numeric,
    Categorical { levels: usize },
}

#[derive(Deserialize)]
pub struct SplitInstance {
    pub features: Vec<FixtureFeature>,
    pub rows: Vec<Vec<f64>>,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl SplitInstance {
    pub fn matrix(&self) -> Matrix {
        let features = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| match f {
                FixtureFeature::Numeric => FeatureSpec::numeric(&format!("x{i}")),
                FixtureFeature::Categorical { levels } => {
                    let names: Vec<String> = (0..*levels).map(|l| format!("L{l}")).collect();
                    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                    FeatureSpec::categorical(&format!("c{i}"), &refs)
                }
            })
            .collect();
        Matrix {
            schema: FeatureSchema { features },
            rows: self.rows.clone(),
        }
    }
}

fn term(g: f64, h: f64) -> f64 {
    if h > 0.0 {
        g * g / h
    } else {
        0.0
    }
}

fn gain_of(inst: &SplitInstance, left: impl Fn(&[f64]) -> bool) -> Option<f64> {
    let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
    let (mut nl, mut nr) = (0, 0);
    for (i, row) in inst.rows.iter().enumerate() {
        if left(row) {
            gl += inst.grad[i];
            hl += inst.hess[i];
            nl += 1;
        } else {
            gr += inst.grad[i];
            hr += inst.hess[i];
            nr += 1;
        }
    }
    (nl > 0 && nr > 0).then(|| term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr))
}

/// Best gain over every threshold of every numeric feature and every
/// two-way partition of the levels of every categorical feature.
pub fn exhaustive_gain(inst: &SplitInstance) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut offer = |g: Option<f64>| {
        if let Some(g) = g {
            best = Some(best.map_or(g, |b: f64| b.max(g)));
        }
    };
    for (f, kind) in inst.features.iter().enumerate() {
        match kind {
            FixtureFeature::Numeric => {
                let mut sorted: Vec<f64> = inst.rows.iter().map(|r| r[f]).collect();
                sorted.sort_by(f64::total_cmp);
                sorted.dedup();
                for &cut in &sorted {
                    offer(gain_of(inst, |r| r[f] <= cut));
                }
            }
            FixtureFeature::Categorical { .. } => {
                let present: Vec<u32> = inst
                    .rows
                    .iter()
                    .map(|r| r[f] as u32)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                for mask in 1u32..(1 << present.len()) {
                    let left: BTreeSet<u32> = present
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask >> i & 1 == 1)
                        .map(|(_, &l)| l)
                        .collect();
                    offer(gain_of(inst, |r| left.contains(&(r[f] as u32))));
                }
            }
        }
    }
    best.filter(|&g| g > 1e-12)
}

pub fn instances() -> Vec<SplitInstance> {
    serde_json::from_str(include_str!("../fixtures/split_instances.json")).unwrap()
}

/// Checks both the depth-1 tree and the direct split search against the
/// exhaustive optimum. Returns whether any split was made.
pub fn check_instance(index: usize, inst: &SplitInstance) -> Result<bool, String> {
    if inst.rows.len() > 12 {
        return Err(format!("instance {index} has more than 12 rows"));
    }
    let params = TreeParams {
        max_depth: 1,
        min_rows: 1,
        sample_rate: 1.0,
        col_sample_rate: 1.0,
    };
    let data = inst.matrix();
    let want = exhaustive_gain(inst);
    let tree = fit_tree(&inst.grad, &inst.hess, &data, &params, &mut ChaCha8Rng::seed_from_u64(0));
    let got = tree.root_split().map(|s| s.gain);
    let rows: Vec<usize> = (0..data.len()).collect();
    let direct = best_split(&data, &inst.grad, &inst.hess, &rows, 1).map(|s| s.gain);
    if got != want || direct != want {
        return Err(format!("instance {index}: tree {got:?}, search {direct:?}, exhaustive {want:?}"));
    }
    Ok(want.is_some())
}
