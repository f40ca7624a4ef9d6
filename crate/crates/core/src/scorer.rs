//! Detection-cost scoring: miss and false-alarm probabilities per subset
//! distance, their normalized decision cost, and run-level totals.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Grain, GroundTruthLabel};

/// Slack applied to the inclusive `distance <= D` test so that continuous
/// estimates landing on a subset distance up to float round-off still count
/// as contact.
pub const TC4TL_TOLERANCE_M: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no reference positives at D = {0} m")]
    NoPositives(f64),
    #[error("no reference negatives at D = {0} m")]
    NoNegatives(f64),
    #[error("no prediction for `{0}`")]
    MissingPrediction(String),
    #[error("cost weights must be positive and finite")]
    InvalidWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub w_miss: f64,
    pub w_fa: f64,
    pub fine_subsets: Vec<f64>,
    pub coarse_subsets: Vec<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            w_miss: 1.0,
            w_fa: 1.0,
            fine_subsets: vec![1.2, 1.8, 3.0],
            coarse_subsets: vec![1.8],
        }
    }
}

impl ScoreConfig {
    pub fn subsets(&self, grain: Grain) -> &[f64] {
        match grain {
            Grain::Fine => &self.fine_subsets,
            Grain::Coarse => &self.coarse_subsets,
        }
    }

    fn check(&self) -> Result<(), ScoreError> {
        let ok = |w: f64| w.is_finite() && w > 0.0;
        if ok(self.w_miss) && ok(self.w_fa) {
            Ok(())
        } else {
            Err(ScoreError::InvalidWeights)
        }
    }
}

/// True when `distance_m` counts as a contact at subset distance `subset_m`.
pub fn decide_tc4tl(distance_m: f64, subset_m: f64) -> bool {
    distance_m <= subset_m + TC4TL_TOLERANCE_M
}

/// Fraction of reference contacts the hypothesis misses. Pairs are `(ref, hyp)`.
pub fn compute_pmiss(pairs: &[(f64, f64)], subset_m: f64) -> Result<f64, ScoreError> {
    let mut positives = 0usize;
    let mut missed = 0usize;
    for &(reference, hypothesis) in pairs {
        if decide_tc4tl(reference, subset_m) {
            positives += 1;
            if !decide_tc4tl(hypothesis, subset_m) {
                missed += 1;
            }
        }
    }
    if positives == 0 {
        return Err(ScoreError::NoPositives(subset_m));
    }
    Ok(missed as f64 / positives as f64)
}

/// Fraction of reference non-contacts the hypothesis flags as contact.
pub fn compute_pfa(pairs: &[(f64, f64)], subset_m: f64) -> Result<f64, ScoreError> {
    let mut negatives = 0usize;
    let mut flagged = 0usize;
    for &(reference, hypothesis) in pairs {
        if !decide_tc4tl(reference, subset_m) {
            negatives += 1;
            if decide_tc4tl(hypothesis, subset_m) {
                flagged += 1;
            }
        }
    }
    if negatives == 0 {
        return Err(ScoreError::NoNegatives(subset_m));
    }
    Ok(flagged as f64 / negatives as f64)
}

pub fn compute_ndcf(p_miss: f64, p_fa: f64, config: &ScoreConfig) -> f64 {
    (config.w_miss * p_miss + config.w_fa * p_fa) / config.w_miss.min(config.w_fa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub grain: Grain,
    pub subset_m: f64,
    pub p_miss: Option<f64>,
    pub p_fa: Option<f64>,
    /// `None` when the subset has no reference positives or no negatives.
    pub ndcf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub total_p_miss: f64,
    pub total_p_fa: f64,
    pub total_ndcf: f64,
    pub average_ndcf: f64,
}

/// Scores the `(ref, hyp)` pairs of one grain at each of its subset distances.
pub fn score_grain(grain: Grain, pairs: &[(f64, f64)], config: &ScoreConfig) -> Vec<ScoreRow> {
    config
        .subsets(grain)
        .iter()
        .map(|&subset_m| {
            let p_miss = compute_pmiss(pairs, subset_m).ok();
            let p_fa = compute_pfa(pairs, subset_m).ok();
            let ndcf = match (p_miss, p_fa) {
                (Some(m), Some(f)) => Some(compute_ndcf(m, f, config)),
                _ => None,
            };
            ScoreRow {
                grain,
                subset_m,
                p_miss,
                p_fa,
                ndcf,
            }
        })
        .collect()
}

impl ScoreReport {
    /// Sums defined rows; undefined rows are kept in `rows` but excluded.
    pub fn from_rows(rows: Vec<ScoreRow>) -> Self {
        let mut total_p_miss = 0.0;
        let mut total_p_fa = 0.0;
        let mut total_ndcf = 0.0;
        let mut defined = 0usize;
        for row in &rows {
            match (row.p_miss, row.p_fa, row.ndcf) {
                (Some(m), Some(f), Some(n)) => {
                    total_p_miss += m;
                    total_p_fa += f;
                    total_ndcf += n;
                    defined += 1;
                }
                _ => log::warn!(
                    "{} grain row at D = {} m is undefined (no positives or no negatives); excluded from totals",
                    row.grain,
                    row.subset_m
                ),
            }
        }
        let average_ndcf = if defined == 0 {
            0.0
        } else {
            total_ndcf / defined as f64
        };
        ScoreReport {
            rows,
            total_p_miss,
            total_p_fa,
            total_ndcf,
            average_ndcf,
        }
    }

    /// Machine-readable `key=value` lines at full precision.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        for row in &self.rows {
            let prefix = format!("{}_grain@{:.2}", row.grain, row.subset_m);
            let _ = writeln!(out, "{prefix}.p_miss={}", opt(row.p_miss));
            let _ = writeln!(out, "{prefix}.p_fa={}", opt(row.p_fa));
            let _ = writeln!(out, "{prefix}.ndcf={}", opt(row.ndcf));
        }
        let _ = writeln!(out, "total_p_miss={}", self.total_p_miss);
        let _ = writeln!(out, "total_p_fa={}", self.total_p_fa);
        let _ = writeln!(out, "total_ndcf={}", self.total_ndcf);
        let _ = writeln!(out, "average_ndcf={}", self.average_ndcf);
        out
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        writeln!(f, "{:<14}{:>6}{:>8}{:>8}{:>8}", "Subset", "D", "P_miss", "P_fa", "nDCF")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<14}{:>6.2}{:>8}{:>8}{:>8}",
                format!("{}_grain", row.grain),
                row.subset_m,
                opt(row.p_miss),
                opt(row.p_fa),
                opt(row.ndcf)
            )?;
        }
        writeln!(
            f,
            "{:<14}{:>6}{:>8.2}{:>8.2}{:>8.2}",
            "total_error", "", self.total_p_miss, self.total_p_fa, self.total_ndcf
        )?;
        writeln!(f, "{:<14}{:>6}{:>8}{:>8}{:>8.4}", "average_ndcf", "", "", "", self.average_ndcf)
    }
}

/// Scores a full run: fine events at each fine subset, then coarse events.
///
/// Every keyed file must have a prediction; predictions for ids absent from
/// the key are ignored.
pub fn score_run(
    system_output: &BTreeMap<String, f64>,
    key: &BTreeMap<String, GroundTruthLabel>,
    config: &ScoreConfig,
) -> Result<ScoreReport, ScoreError> {
    config.check()?;
    let extra = system_output.keys().filter(|id| !key.contains_key(*id)).count();
    if extra > 0 {
        log::warn!("ignoring {extra} predictions with no matching key entry");
    }
    let mut pairs: BTreeMap<Grain, Vec<(f64, f64)>> = BTreeMap::new();
    for (id, label) in key {
        let hyp = system_output
            .get(id)
            .ok_or_else(|| ScoreError::MissingPrediction(id.clone()))?;
        pairs
            .entry(label.grain)
            .or_default()
            .push((label.max_distance_m, *hyp));
    }
    let mut rows = Vec::new();
    for grain in Grain::BOTH {
        let grain_pairs = pairs.get(&grain).map(Vec::as_slice).unwrap_or_default();
        rows.extend(score_grain(grain, grain_pairs, config));
    }
    Ok(ScoreReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_boundary_is_inclusive() {
        assert!(decide_tc4tl(1.2, 1.8));
        assert!(!decide_tc4tl(4.5, 3.0));
        assert!(decide_tc4tl(1.8, 1.8));
        assert!(decide_tc4tl(1.8 + 1e-12, 1.8));
        assert!(!decide_tc4tl(1.8 + 1e-6, 1.8));
    }

    #[test]
    fn pmiss_counts() {
        let all_hit = [(1.2, 1.2), (1.8, 1.2)];
        assert_eq!(compute_pmiss(&all_hit, 1.8).unwrap(), 0.0);
        let one_missed = [(1.2, 1.2), (1.8, 1.8), (1.2, 3.0), (1.8, 1.2), (4.5, 4.5)];
        assert_eq!(compute_pmiss(&one_missed, 1.8).unwrap(), 0.25);
        assert_eq!(
            compute_pmiss(&[(4.5, 1.2)], 1.8),
            Err(ScoreError::NoPositives(1.8))
        );
    }

    #[test]
    fn pfa_counts() {
        let clean = [(4.5, 4.5), (3.0, 4.5), (1.2, 1.2)];
        assert_eq!(compute_pfa(&clean, 1.8).unwrap(), 0.0);
        let mut pairs: Vec<(f64, f64)> = (0..7).map(|_| (4.5, 4.5)).collect();
        pairs.extend((0..3).map(|_| (4.5, 1.2)));
        assert!((compute_pfa(&pairs, 1.8).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(compute_pfa(&[(1.2, 4.5)], 1.8), Err(ScoreError::NoNegatives(1.8)));
    }

    #[test]
    fn ndcf_arithmetic() {
        let unit = ScoreConfig::default();
        assert!((compute_ndcf(0.29, 0.45, &unit) - 0.74).abs() < 1e-12);
        assert!((compute_ndcf(0.33, 0.14, &unit) - 0.48).abs() <= 0.01 + 1e-12);
        let weighted = ScoreConfig {
            w_miss: 3.0,
            w_fa: 0.5,
            ..ScoreConfig::default()
        };
        assert_eq!(compute_ndcf(0.0, 0.0, &weighted), 0.0);
        assert!((compute_ndcf(0.1, 0.2, &weighted) - (0.3 + 0.1) / 0.5).abs() < 1e-12);
    }

    fn key(entries: &[(&str, Grain, f64)]) -> BTreeMap<String, GroundTruthLabel> {
        entries
            .iter()
            .map(|&(id, g, d)| (id.to_string(), GroundTruthLabel::new(g, d).unwrap()))
            .collect()
    }

    #[test]
    fn perfect_run_scores_zero() {
        let k = key(&[
            ("a", Grain::Fine, 1.2),
            ("b", Grain::Fine, 1.8),
            ("c", Grain::Fine, 3.0),
            ("d", Grain::Fine, 4.5),
            ("e", Grain::Coarse, 1.8),
            ("f", Grain::Coarse, 4.5),
        ]);
        let out: BTreeMap<String, f64> =
            k.iter().map(|(id, l)| (id.clone(), l.max_distance_m)).collect();
        let report = score_run(&out, &k, &ScoreConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.iter().all(|r| r.ndcf == Some(0.0)));
        assert_eq!(report.total_ndcf, 0.0);
        assert_eq!(report.average_ndcf, 0.0);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let k = key(&[("a", Grain::Fine, 1.2)]);
        let out = BTreeMap::from([("b".to_string(), 1.2)]);
        assert_eq!(
            score_run(&out, &k, &ScoreConfig::default()),
            Err(ScoreError::MissingPrediction("a".to_string()))
        );
    }

    #[test]
    fn undefined_rows_are_excluded() {
        let k = key(&[("a", Grain::Fine, 1.2), ("b", Grain::Fine, 4.5)]);
        let out = BTreeMap::from([("a".to_string(), 4.5), ("b".to_string(), 4.5)]);
        let report = score_run(&out, &k, &ScoreConfig::default()).unwrap();
        // coarse row has no events at all
        assert_eq!(report.rows[3].ndcf, None);
        assert_eq!(report.rows[0].ndcf, Some(1.0));
        assert!((report.total_ndcf - 3.0).abs() < 1e-12);
        assert!((report.average_ndcf - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let report = ScoreReport::from_rows(vec![ScoreRow {
            grain: Grain::Coarse,
            subset_m: 1.8,
            p_miss: Some(0.25),
            p_fa: Some(0.63),
            ndcf: Some(0.88),
        }]);
        let text = report.to_string();
        assert!(text.contains("coarse_grain    1.80    0.25    0.63    0.88"), "{text}");
        assert!(text.contains("total_error"));
        assert!(report.to_key_values().contains("average_ndcf=0.88"));
    }
}
