//! Log-distance path-loss distance estimate and its grid-search calibration.
//!
//! A receiver observing mean RSSI `r` from a transmitter whose 1 m RSSI is
//! `tx` estimates the separation as `10^((tx - r) / (10 n))`, where `n` is the
//! environment's path-loss exponent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, Grain};
use crate::ingest::Dataset;
use crate::scorer::{score_grain, ScoreConfig};

pub const TX_RANGE_DBM: (f64, f64) = (-80.0, -30.0);
pub const N_RANGE: (f64, f64) = (2.0, 4.0);

/// Grain-agnostic constants used before calibration.
pub const GLOBAL_TX_REF_DBM: f64 = -61.02;
pub const GLOBAL_N_EXPONENT: f64 = 2.187;

/// Calibrated constants shipped as defaults, `(tx_ref_dbm, n_exponent)`.
pub const FINE_DEFAULT: (f64, f64) = (-54.0, 2.1);
pub const COARSE_DEFAULT: (f64, f64) = (-52.0, 2.6);

#[derive(Debug, Error, PartialEq)]
pub enum PathLossError {
    #[error("event `{0}` has no Bluetooth samples")]
    NoBluetoothSamples(String),
    #[error("training data has no labelled {0} grain events")]
    EmptyGrain(Grain),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("tx_ref_dbm {tx} / n_exponent {n} outside [-80, -30] x [2, 4]")]
    OutOfRange { tx: f64, n: f64 },
    #[error("event `{0}` has no label")]
    MissingLabel(String),
    #[error("calibration file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub tx_ref_dbm: f64,
    pub n_exponent: f64,
    pub grain: Grain,
}

impl CalibrationParams {
    pub fn new(tx_ref_dbm: f64, n_exponent: f64, grain: Grain) -> Result<Self, PathLossError> {
        let in_range = (TX_RANGE_DBM.0..=TX_RANGE_DBM.1).contains(&tx_ref_dbm)
            && (N_RANGE.0..=N_RANGE.1).contains(&n_exponent);
        if !in_range {
            return Err(PathLossError::OutOfRange {
                tx: tx_ref_dbm,
                n: n_exponent,
            });
        }
        Ok(CalibrationParams {
            tx_ref_dbm,
            n_exponent,
            grain,
        })
    }

    pub fn global(grain: Grain) -> Self {
        CalibrationParams {
            tx_ref_dbm: GLOBAL_TX_REF_DBM,
            n_exponent: GLOBAL_N_EXPONENT,
            grain,
        }
    }

    pub fn shipped_default(grain: Grain) -> Self {
        let (tx_ref_dbm, n_exponent) = match grain {
            Grain::Fine => FINE_DEFAULT,
            Grain::Coarse => COARSE_DEFAULT,
        };
        CalibrationParams {
            tx_ref_dbm,
            n_exponent,
            grain,
        }
    }
}

/// One parameter set per grain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamsByGrain {
    pub fine: CalibrationParams,
    pub coarse: CalibrationParams,
}

impl ParamsByGrain {
    /// The same global constants for both grains.
    pub fn global() -> Self {
        ParamsByGrain {
            fine: CalibrationParams::global(Grain::Fine),
            coarse: CalibrationParams::global(Grain::Coarse),
        }
    }

    pub fn shipped_default() -> Self {
        ParamsByGrain {
            fine: CalibrationParams::shipped_default(Grain::Fine),
            coarse: CalibrationParams::shipped_default(Grain::Coarse),
        }
    }

    pub fn get(&self, grain: Grain) -> &CalibrationParams {
        match grain {
            Grain::Fine => &self.fine,
            Grain::Coarse => &self.coarse,
        }
    }
}

/// Arithmetic mean of every Bluetooth RSSI in the event.
pub fn mean_rssi(event: &Event) -> Result<f64, PathLossError> {
    let (sum, count) = event
        .rssi_values()
        .fold((0.0, 0usize), |(s, c), r| (s + r, c + 1));
    if count == 0 {
        return Err(PathLossError::NoBluetoothSamples(event.file_id().to_string()));
    }
    Ok(sum / count as f64)
}

/// `10^((tx - rssi) / (10 n))`.
pub fn log_distance(tx_ref_dbm: f64, n_exponent: f64, rssi_dbm: f64) -> f64 {
    10f64.powf((tx_ref_dbm - rssi_dbm) / (10.0 * n_exponent))
}

pub fn estimate_distance(params: &CalibrationParams, mean_rssi_dbm: f64) -> f64 {
    log_distance(params.tx_ref_dbm, params.n_exponent, mean_rssi_dbm)
}

/// Continuous distance estimate for every event, keyed by file id.
pub fn formula_predict(
    params: &ParamsByGrain,
    dataset: &Dataset,
) -> Result<BTreeMap<String, f64>, PathLossError> {
    dataset
        .events
        .iter()
        .map(|e| {
            let rssi = mean_rssi(e)?;
            Ok((
                e.file_id().to_string(),
                estimate_distance(params.get(e.grain()), rssi),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub tx_min: f64,
    pub tx_max: f64,
    pub tx_step: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub n_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            tx_min: TX_RANGE_DBM.0,
            tx_max: TX_RANGE_DBM.1,
            tx_step: 1.0,
            n_min: N_RANGE.0,
            n_max: N_RANGE.1,
            n_step: 0.1,
        }
    }
}

/// Rounds to 9 decimals so that `min + i * step` lands on the decimal grid value.
fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn axis(name: &str, min: f64, max: f64, step: f64) -> Result<Vec<f64>, PathLossError> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) || step <= 0.0 || max < min {
        return Err(PathLossError::DegenerateGrid(format!(
            "{name} axis [{min}, {max}] step {step}"
        )));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| snap(min + i as f64 * step)).collect())
}

impl GridSpec {
    /// A grid holding the single point `(tx, n)`.
    pub fn single(tx: f64, n: f64) -> Self {
        GridSpec {
            tx_min: tx,
            tx_max: tx,
            tx_step: 1.0,
            n_min: n,
            n_max: n,
            n_step: 0.1,
        }
    }

    /// Grid points in `(tx, n)` row-major order, tx ascending then n ascending.
    pub fn points(&self) -> Result<Vec<(f64, f64)>, PathLossError> {
        let txs = axis("tx", self.tx_min, self.tx_max, self.tx_step)?;
        let ns = axis("n", self.n_min, self.n_max, self.n_step)?;
        let out_of_range = |v: f64, (lo, hi): (f64, f64)| v < lo || v > hi;
        if txs.iter().any(|&t| out_of_range(t, TX_RANGE_DBM))
            || ns.iter().any(|&n| out_of_range(n, N_RANGE))
        {
            return Err(PathLossError::OutOfRange {
                tx: self.tx_min,
                n: self.n_min,
            });
        }
        Ok(txs
            .iter()
            .flat_map(|&t| ns.iter().map(move |&n| (t, n)))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tx_ref_dbm: f64,
    pub n_exponent: f64,
    /// Total nDCF over the grain's subset distances.
    pub objective: f64,
    /// Mean squared log10 ratio between estimate and labelled distance.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: CalibrationParams,
    pub objective: f64,
    pub surface: Vec<GridCell>,
}

impl GridSearchResult {
    /// Surface as TSV (`tx_ref_dbm  n_exponent  objective`), for plotting.
    pub fn surface_tsv(&self) -> String {
        let mut out = String::from("tx_ref_dbm\tn_exponent\tobjective\n");
        for c in &self.surface {
            let _ = writeln!(out, "{}\t{}\t{}", c.tx_ref_dbm, c.n_exponent, c.objective);
        }
        out
    }
}

/// Ordering used to select the best cell: objective, then residual, then tx, then n.
fn cell_order(a: &GridCell, b: &GridCell) -> std::cmp::Ordering {
    a.objective
        .total_cmp(&b.objective)
        .then(a.residual.total_cmp(&b.residual))
        .then(a.tx_ref_dbm.total_cmp(&b.tx_ref_dbm))
        .then(a.n_exponent.total_cmp(&b.n_exponent))
}

/// Exhaustive search for the `(tx, n)` pair minimising total nDCF of the
/// formula estimate over the labelled training events of one grain.
///
/// nDCF is piecewise constant in `(tx, n)`, so equal-objective cells are
/// common; they are separated by the log-distance residual against the
/// labels, then by smallest tx and smallest n. Cells are evaluated in
/// parallel on the current rayon pool; the result does not depend on
/// evaluation order.
pub fn calibrate_grid(
    train: &Dataset,
    grain: Grain,
    grid: &GridSpec,
    score_config: &ScoreConfig,
) -> Result<GridSearchResult, PathLossError> {
    let points = grid.points()?;
    let mut observations = Vec::new();
    for event in train.events.iter().filter(|e| e.grain() == grain) {
        let label = train
            .label(event.file_id())
            .ok_or_else(|| PathLossError::MissingLabel(event.file_id().to_string()))?;
        observations.push((mean_rssi(event)?, label.max_distance_m));
    }
    if observations.is_empty() {
        return Err(PathLossError::EmptyGrain(grain));
    }

    let surface: Vec<GridCell> = points
        .par_iter()
        .map(|&(tx, n)| {
            let mut residual = 0.0;
            let pairs: Vec<(f64, f64)> = observations
                .iter()
                .map(|&(rssi, label)| {
                    let estimate = log_distance(tx, n, rssi);
                    residual += (estimate / label).log10().powi(2);
                    (label, estimate)
                })
                .collect();
            let objective = score_grain(grain, &pairs, score_config)
                .iter()
                .filter_map(|row| row.ndcf)
                .sum();
            GridCell {
                tx_ref_dbm: tx,
                n_exponent: n,
                objective,
                residual: residual / observations.len() as f64,
            }
        })
        .collect();

    let best = *surface
        .iter()
        .min_by(|a, b| cell_order(a, b))
        .expect("grid has at least one point");
    Ok(GridSearchResult {
        best: CalibrationParams {
            tx_ref_dbm: best.tx_ref_dbm,
            n_exponent: best.n_exponent,
            grain,
        },
        objective: best.objective,
        surface,
    })
}

/// Key-value calibration file.
pub fn write_calibration(params: &CalibrationParams, objective: Option<f64>) -> String {
    let mut out = format!(
        "grain={}\ntx_ref_dbm={}\nn_exponent={}\n",
        params.grain, params.tx_ref_dbm, params.n_exponent
    );
    if let Some(objective) = objective {
        let _ = writeln!(out, "objective={objective}");
    }
    out
}

pub fn parse_calibration(text: &str) -> Result<CalibrationParams, PathLossError> {
    let mut fields = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PathLossError::Parse(format!("expected key=value, got `{line}`")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| PathLossError::Parse(format!("missing `{k}`")))
    };
    let number = |k: &str| -> Result<f64, PathLossError> {
        get(k)?
            .parse()
            .map_err(|_| PathLossError::Parse(format!("`{k}` is not a number")))
    };
    let grain: Grain = get("grain")?.parse().map_err(PathLossError::Parse)?;
    CalibrationParams::new(number("tx_ref_dbm")?, number("n_exponent")?, grain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventMetadata, GroundTruthLabel, SensorSample};

    fn event(id: &str, grain: Grain, rssi: &[f64]) -> Event {
        Event::new(
            EventMetadata::unknown(id, grain),
            rssi.iter()
                .enumerate()
                .map(|(i, &r)| SensorSample::bluetooth(i as f64 * 0.1, r))
                .collect(),
        )
    }

    #[test]
    fn mean_of_rssi() {
        assert_eq!(mean_rssi(&event("a", Grain::Fine, &[-60.0])).unwrap(), -60.0);
        assert_eq!(mean_rssi(&event("a", Grain::Fine, &[-50.0, -70.0])).unwrap(), -60.0);
        assert_eq!(
            mean_rssi(&event("a", Grain::Fine, &[])),
            Err(PathLossError::NoBluetoothSamples("a".to_string()))
        );
    }

    #[test]
    fn analytic_estimates() {
        let p = |tx, n| CalibrationParams::new(tx, n, Grain::Fine).unwrap();
        assert_eq!(estimate_distance(&p(-61.02, 2.187), -61.02), 1.0);
        assert!((estimate_distance(&p(-54.0, 2.1), -75.0) - 10.0).abs() < 1e-12);
        assert!((estimate_distance(&p(-52.0, 2.6), -65.0) - 3.1622776601683795).abs() < 1e-12);
    }

    #[test]
    fn params_range_is_enforced() {
        assert!(CalibrationParams::new(-81.0, 2.0, Grain::Fine).is_err());
        assert!(CalibrationParams::new(-50.0, 4.5, Grain::Fine).is_err());
        assert!(CalibrationParams::new(-80.0, 4.0, Grain::Coarse).is_ok());
    }

    #[test]
    fn formula_uses_grain_params() {
        let ds = Dataset::new(
            vec![
                event("f", Grain::Fine, &[-54.0]),
                event("c", Grain::Coarse, &[-78.0]),
            ],
            None,
        )
        .unwrap();
        let out = formula_predict(&ParamsByGrain::shipped_default(), &ds).unwrap();
        assert_eq!(out["f"], 1.0);
        assert!((out["c"] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn grid_axes() {
        let pts = GridSpec::default().points().unwrap();
        assert_eq!(pts.len(), 51 * 21);
        assert_eq!(pts[0], (-80.0, 2.0));
        assert_eq!(*pts.last().unwrap(), (-30.0, 4.0));
        assert!(pts.contains(&(-54.0, 2.1)));
        assert!(pts.contains(&(-52.0, 2.6)));
        let zero_step = GridSpec {
            n_step: 0.0,
            ..GridSpec::default()
        };
        assert!(matches!(zero_step.points(), Err(PathLossError::DegenerateGrid(_))));
    }

    #[test]
    fn empty_grain_and_single_cell() {
        let labels = BTreeMap::from([(
            "f".to_string(),
            GroundTruthLabel::new(Grain::Fine, 1.2).unwrap(),
        )]);
        let ds = Dataset::new(vec![event("f", Grain::Fine, &[-60.0])], Some(labels)).unwrap();
        let cfg = ScoreConfig::default();
        assert_eq!(
            calibrate_grid(&ds, Grain::Coarse, &GridSpec::default(), &cfg),
            Err(PathLossError::EmptyGrain(Grain::Coarse))
        );
        let r = calibrate_grid(&ds, Grain::Fine, &GridSpec::single(-40.0, 3.3), &cfg).unwrap();
        assert_eq!((r.best.tx_ref_dbm, r.best.n_exponent), (-40.0, 3.3));
        assert_eq!(r.surface.len(), 1);
    }

    #[test]
    fn calibration_file_round_trip() {
        let p = CalibrationParams::new(-52.0, 2.6, Grain::Coarse).unwrap();
        let text = write_calibration(&p, Some(0.5));
        assert_eq!(text, "grain=coarse\ntx_ref_dbm=-52\nn_exponent=2.6\nobjective=0.5\n");
        assert_eq!(parse_calibration(&text).unwrap(), p);
        assert!(parse_calibration("grain=fine\n").is_err());
    }
}
