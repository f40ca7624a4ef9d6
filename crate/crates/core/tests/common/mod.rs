#![allow(dead_code)]

pub mod mlp;
pub mod split;

use tc4tl::ingest::Dataset;
use tc4tl::synthgen::{generate, SynthSpec};

/// Reference per-row (P_miss, P_fa, nDCF) for the fine 1.2, 1.8, 3.0 and
/// coarse 1.8 rows, with the printed total nDCF.
pub struct ReferenceTable {
    pub name: &'static str,
    pub rows: [(f64, f64, f64); 4],
    pub total: f64,
}

pub const GLOBAL_FORMULA: ReferenceTable = ReferenceTable {
    name: "global formula",
    rows: [(0.29, 0.45, 0.74), (0.22, 0.62, 0.84), (0.14, 0.64, 0.78), (0.25, 0.63, 0.88)],
    total: 3.24,
};

pub const CALIBRATED_FORMULA: ReferenceTable = ReferenceTable {
    name: "calibrated formula",
    rows: [(0.56, 0.10, 0.66), (0.47, 0.15, 0.62), (0.29, 0.25, 0.54), (0.53, 0.11, 0.64)],
    total: 2.46,
};

pub const GBM: ReferenceTable = ReferenceTable {
    name: "gbm",
    rows: [(0.43, 0.19, 0.61), (0.33, 0.14, 0.48), (0.35, 0.20, 0.55), (0.30, 0.14, 0.44)],
    total: 2.08,
};

pub const TABLES: [ReferenceTable; 3] = [GLOBAL_FORMULA, CALIBRATED_FORMULA, GBM];

/// Printed precision of the reference tables.
pub const TABLE_TOLERANCE: f64 = 0.01 + 1e-9;

pub fn dataset(spec: &SynthSpec) -> Dataset {
    let synth = generate(spec).unwrap();
    let events = synth.events.into_iter().map(|g| g.event).collect();
    Dataset::new(events, Some(synth.labels)).unwrap()
}
