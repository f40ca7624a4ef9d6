use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tc4tl::gbm::{GbmConfig, GbmGrid};
use tc4tl::mlp::TrainConfig;
use tc4tl::pathloss::GridSpec;
use tc4tl::scorer::ScoreConfig;
use tc4tl::synthgen::SynthSpec;

/// Contents of `--config`. Every section is optional; missing values keep
/// their built-in defaults and command-line flags override both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub synth: SynthSpec,
    pub calibration: GridSpec,
    pub score: ScoreConfig,
    pub mlp: TrainConfig,
    pub gbm: GbmConfig,
    pub gbm_grid: GbmGrid,
    pub tune_binary_threshold: Option<bool>,
    /// Path to a replacement device tier table.
    pub device_tiers: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
