//! Synthetic labelled datasets in the canonical event and key formats.
//!
//! Each look is a static 4 s window at one distance. RSSI follows the
//! log-distance model with Gaussian noise; the other sensor channels are
//! stationary noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{
    Carry, Channel, Event, EventMetadata, Grain, GroundTruthLabel, Pose, SensorSample,
    LOOK_SECONDS, RSSI_MAX_DBM, RSSI_MIN_DBM, UNKNOWN,
};
use crate::ingest::{write_event_file, write_key_file, EVENT_FILE_EXT};

/// Advertised power that `tx_true_dbm` refers to.
pub const REFERENCE_TX_POWER_DBM: i32 = 7;

/// Closest a look may be, in metres.
pub const MIN_LOOK_DISTANCE_M: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("label {distance} m is not a {grain} label")]
    InconsistentLabel { grain: Grain, distance: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("I/O failure at {path}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weighted {
    pub value: String,
    pub weight: f64,
}

fn uniform(values: &[&str]) -> Vec<Weighted> {
    values
        .iter()
        .map(|v| Weighted {
            value: v.to_string(),
            weight: 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_events: usize,
    /// Fraction of coarse-grain events.
    pub grain_mix: f64,
    /// Weights over 1.2, 1.8, 3.0, 4.5 m.
    pub fine_label_weights: [f64; 4],
    /// Weights over 1.8, 4.5 m.
    pub coarse_label_weights: [f64; 2],
    /// Inclusive range.
    pub looks_per_event: [usize; 2],
    /// Bluetooth samples per look, inclusive range.
    pub samples_per_look: [usize; 2],
    /// Samples per look for each non-Bluetooth channel.
    pub imu_samples_per_look: usize,
    pub tx_true_dbm: f64,
    pub n_true: f64,
    pub noise_sigma_db: f64,
    /// dB of received power per dB of advertised transmit power above
    /// [`REFERENCE_TX_POWER_DBM`]; unknown power counts as the reference.
    pub tx_power_gain: f64,
    pub imu_noise_sigma: f64,
    pub tx_devices: Vec<Weighted>,
    pub rx_devices: Vec<Weighted>,
    /// `"7"`, `"8"`, `"12"` or `"UNKNOWN"`.
    pub tx_powers: Vec<Weighted>,
    pub carries: Vec<Weighted>,
    pub poses: Vec<Weighted>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let devices = uniform(&[
            "iPhone6s", "iPhone7", "iPhone8", "iPhoneX", "iPhoneXR", "iPhone11", "iPhone11Pro",
            "Pixel3",
        ]);
        SynthSpec {
            n_events: 2500,
            grain_mix: 0.5,
            fine_label_weights: [1.0; 4],
            coarse_label_weights: [1.0; 2],
            looks_per_event: [1, 3],
            samples_per_look: [8, 16],
            imu_samples_per_look: 1,
            tx_true_dbm: -54.0,
            n_true: 2.1,
            noise_sigma_db: 4.0,
            tx_power_gain: 0.0,
            imu_noise_sigma: 0.05,
            tx_devices: devices.clone(),
            rx_devices: devices,
            tx_powers: uniform(&["7", "8", "12", UNKNOWN]),
            carries: uniform(&["hand", "pocket", UNKNOWN]),
            poses: uniform(&["sitting", "standing", UNKNOWN]),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// 2500 events (2000 train + 500 test) whose RSSI also rises with the
    /// advertised transmit power.
    pub fn benchmark() -> Self {
        SynthSpec {
            n_events: 2500,
            tx_power_gain: 1.0,
            ..SynthSpec::default()
        }
    }
}

/// Maximum look-to-look drop below the label distance.
pub fn variation_bound(grain: Grain) -> f64 {
    match grain {
        Grain::Fine => 0.9,
        Grain::Coarse => 2.1,
    }
}

/// Noise-free RSSI at distance `d`.
pub fn model_rssi(tx_dbm: f64, n: f64, d: f64) -> f64 {
    tx_dbm - 10.0 * n * d.log10()
}

fn check_range(name: &str, r: [usize; 2]) -> Result<(), SynthError> {
    if r[0] == 0 || r[0] > r[1] {
        return Err(SynthError::InvalidSpec(format!("{name} range {r:?} is empty or zero")));
    }
    Ok(())
}

fn check_weights(name: &str, w: &[f64]) -> Result<(), SynthError> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(SynthError::InvalidSpec(format!("{name} weights must be >= 0 with a positive sum")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.grain_mix) {
            return Err(SynthError::InvalidSpec("grain_mix must be in [0, 1]".into()));
        }
        if !(self.noise_sigma_db >= 0.0) || !(self.imu_noise_sigma >= 0.0) {
            return Err(SynthError::InvalidSpec("noise sigmas must be >= 0".into()));
        }
        check_range("looks_per_event", self.looks_per_event)?;
        check_range("samples_per_look", self.samples_per_look)?;
        check_weights("fine_label", &self.fine_label_weights)?;
        check_weights("coarse_label", &self.coarse_label_weights)?;
        for (name, vocab) in [
            ("tx_devices", &self.tx_devices),
            ("rx_devices", &self.rx_devices),
            ("tx_powers", &self.tx_powers),
            ("carries", &self.carries),
            ("poses", &self.poses),
        ] {
            let w: Vec<f64> = vocab.iter().map(|v| v.weight).collect();
            check_weights(name, &w)?;
        }
        for v in &self.tx_powers {
            if v.value != UNKNOWN && v.value.parse::<i32>().is_err() {
                return Err(SynthError::InvalidSpec(format!("tx power `{}`", v.value)));
            }
        }
        for v in &self.carries {
            Carry::parse(&v.value).ok_or_else(|| SynthError::InvalidSpec(format!("carry `{}`", v.value)))?;
        }
        for v in &self.poses {
            Pose::parse(&v.value).ok_or_else(|| SynthError::InvalidSpec(format!("pose `{}`", v.value)))?;
        }
        Ok(())
    }
}

/// Largest-remainder split of `n` into integer counts proportional to `weights`.
pub fn allocate_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps index order among equal remainders.
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn pick<'a, R: Rng>(vocab: &'a [Weighted], rng: &mut R) -> &'a str {
    let dist = WeightedIndex::new(vocab.iter().map(|v| v.weight)).expect("validated weights");
    &vocab[dist.sample(rng)].value
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedEvent {
    pub event: Event,
    pub look_distances: Vec<f64>,
}

/// One event whose largest look distance is exactly the label distance.
pub fn generate_event<R: Rng>(
    spec: &SynthSpec,
    file_id: &str,
    label: GroundTruthLabel,
    rng: &mut R,
) -> Result<GeneratedEvent, SynthError> {
    let grain = label.grain;
    let max_d = label.max_distance_m;
    if !grain.labels().iter().any(|&l| l == max_d) {
        return Err(SynthError::InconsistentLabel { grain, distance: max_d });
    }
    let looks = rng.random_range(spec.looks_per_event[0]..=spec.looks_per_event[1]);
    let low = (max_d - variation_bound(grain)).max(MIN_LOOK_DISTANCE_M);
    let pinned = rng.random_range(0..looks);
    let look_distances: Vec<f64> = (0..looks)
        .map(|i| if i == pinned || low >= max_d { max_d } else { rng.random_range(low..=max_d) })
        .collect();

    let metadata = EventMetadata {
        file_id: file_id.to_string(),
        tx_device: pick(&spec.tx_devices, rng).to_string(),
        rx_device: pick(&spec.rx_devices, rng).to_string(),
        tx_power_dbm: pick(&spec.tx_powers, rng).parse().ok(),
        tx_carry: Carry::parse(pick(&spec.carries, rng)).unwrap_or(Carry::Unknown),
        rx_carry: Carry::parse(pick(&spec.carries, rng)).unwrap_or(Carry::Unknown),
        tx_pose: Pose::parse(pick(&spec.poses, rng)).unwrap_or(Pose::Unknown),
        rx_pose: Pose::parse(pick(&spec.poses, rng)).unwrap_or(Pose::Unknown),
        grain,
    };

    let power = metadata.tx_power_dbm.unwrap_or(REFERENCE_TX_POWER_DBM);
    let power_offset = spec.tx_power_gain * (power - REFERENCE_TX_POWER_DBM) as f64;
    let rssi_noise = Normal::new(0.0, spec.noise_sigma_db).expect("sigma >= 0");
    let imu_noise = Normal::new(0.0, spec.imu_noise_sigma).expect("sigma >= 0");
    let mut samples = Vec::new();
    for (look, &d) in look_distances.iter().enumerate() {
        let start = look as f64 * LOOK_SECONDS;
        let mean = model_rssi(spec.tx_true_dbm, spec.n_true, d) + power_offset;
        let n_bt = rng.random_range(spec.samples_per_look[0]..=spec.samples_per_look[1]);
        for j in 0..n_bt {
            let t = start + LOOK_SECONDS * j as f64 / n_bt as f64;
            let rssi = (mean + rssi_noise.sample(rng)).clamp(RSSI_MIN_DBM, RSSI_MAX_DBM);
            samples.push(SensorSample::bluetooth(round_ms(t), rssi));
        }
        let n_imu = spec.imu_samples_per_look;
        for j in 0..n_imu {
            let t = start + LOOK_SECONDS * (j as f64 + 0.5) / n_imu as f64;
            for channel in Channel::ALL.into_iter().filter(|c| *c != Channel::Bluetooth) {
                let values = imu_values(channel, &imu_noise, rng);
                samples.push(SensorSample::new(round_ms(t), channel, values));
            }
        }
    }
    samples.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    Ok(GeneratedEvent {
        event: Event::new(metadata, samples),
        look_distances,
    })
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

fn imu_values<R: Rng>(channel: Channel, noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..channel.arity()).map(|_| noise.sample(rng)).collect();
    match channel {
        // Phone at rest: gravity on z, heading and altitude noise around fixed values.
        Channel::Accelerometer => v[2] += 1.0,
        Channel::Gravity => v[2] += 1.0,
        Channel::Heading => {
            for x in v.iter_mut() {
                *x = x.abs();
            }
        }
        _ => {}
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub events: Vec<GeneratedEvent>,
    pub labels: BTreeMap<String, GroundTruthLabel>,
}

impl SynthDataset {
    /// `file_id<TAB>d1,d2,...` per event, in file-id order.
    pub fn debug_tsv(&self) -> String {
        let mut out = String::from("file_id\tlook_distances_m\n");
        for g in &self.events {
            let joined: Vec<String> = g.look_distances.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "{}\t{}", g.event.file_id(), joined.join(","));
        }
        out
    }
}

pub fn file_id(index: usize) -> String {
    format!("ev{index:06}")
}

/// Builds every event in memory. Event `i` draws from its own stream
/// derived from `(seed, i)`, so generation order does not matter.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let n_coarse = (spec.n_events as f64 * spec.grain_mix).round() as usize;
    let n_fine = spec.n_events - n_coarse;
    let mut labels = Vec::with_capacity(spec.n_events);
    for (grain, n, weights) in [
        (Grain::Fine, n_fine, &spec.fine_label_weights[..]),
        (Grain::Coarse, n_coarse, &spec.coarse_label_weights[..]),
    ] {
        for (count, &d) in allocate_counts(n, weights).into_iter().zip(grain.labels()) {
            labels.extend(std::iter::repeat_n(GroundTruthLabel { grain, max_distance_m: d }, count));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);

    let events = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            generate_event(spec, &file_id(i), label, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labels = events
        .iter()
        .zip(&labels)
        .map(|(g, &l)| (g.event.file_id().to_string(), l))
        .collect();
    Ok(SynthDataset { events, labels })
}

/// Paths written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub events_dir: PathBuf,
    pub key: PathBuf,
    pub debug: PathBuf,
}

impl DatasetLayout {
    pub fn under(root: &Path) -> Self {
        DatasetLayout {
            events_dir: root.join("events"),
            key: root.join("key.tsv"),
            debug: root.join("debug_looks.tsv"),
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, SynthError> {
    r.map_err(|source| SynthError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// Generates and writes `events/*.csv`, `key.tsv` and `debug_looks.tsv` under `root`.
pub fn generate_dataset(spec: &SynthSpec, root: &Path) -> Result<DatasetLayout, SynthError> {
    let data = generate(spec)?;
    let layout = DatasetLayout::under(root);
    io(&layout.events_dir, fs::create_dir_all(&layout.events_dir))?;
    data.events.par_iter().try_for_each(|g| {
        let path = layout
            .events_dir
            .join(format!("{}.{EVENT_FILE_EXT}", g.event.file_id()));
        io(&path, fs::write(&path, write_event_file(&g.event)))
    })?;
    io(&layout.key, fs::write(&layout.key, write_key_file(&data.labels)))?;
    io(&layout.debug, fs::write(&layout.debug, data.debug_tsv()))?;
    log::info!("wrote {} events under {}", data.events.len(), root.display());
    Ok(layout)
}
