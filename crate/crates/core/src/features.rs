//! The 11-value per-event feature vector: path-loss distance estimate,
//! min-max normalized RSSI and attenuation, and small categorical codes for
//! grain, transmit power, carry state, pose and device tier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Carry, Event, EventMetadata, Grain, Pose, UNKNOWN};
use crate::pathloss::{estimate_distance, mean_rssi, ParamsByGrain, PathLossError};

/// Offset subtracted from transmit power in the attenuation feature (dB).
pub const ATTENUATION_OFFSET_DB: f64 = 41.0;

/// Transmit power assumed when the advertised power is unknown; it shares a
/// code with 7 dBm.
pub const UNKNOWN_TX_POWER_DBM: i32 = 7;

/// Range the distance feature is clamped to, in meters.
pub const DISTANCE_FEATURE_RANGE: (f64, f64) = (1.2, 4.5);

pub const FEATURE_NAMES: [&str; 11] = [
    "predicted_distance_m",
    "norm_mean_rssi",
    "norm_path_loss",
    "grain",
    "tx_power",
    "tx_carry",
    "rx_carry",
    "tx_pose",
    "rx_pose",
    "tx_device",
    "rx_device",
];

pub const DEFAULT_DEVICE_TIERS: &str = include_str!("../data/device_tiers.tsv");

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    PathLoss(#[from] PathLossError),
    #[error("cannot fit a scaler on zero events")]
    EmptyTrainingSet,
    #[error("device tier table line {line}: {reason}")]
    TierTable { line: usize, reason: String },
}

/// Transmit power minus the 41 dB offset minus mean RSSI.
pub fn path_loss_attenuation(tx_power_dbm: f64, mean_rssi_dbm: f64) -> f64 {
    tx_power_dbm - ATTENUATION_OFFSET_DB - mean_rssi_dbm
}

fn normalize_device(name: &str) -> String {
    name.chars()
        .filter(|c| !matches!(c, ' ' | '-' | '_'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Device name to hardware tier (0, 1 or 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTiers {
    tiers: BTreeMap<String, u8>,
}

impl Default for DeviceTiers {
    fn default() -> Self {
        DeviceTiers::parse(DEFAULT_DEVICE_TIERS).expect("bundled tier table is valid")
    }
}

impl DeviceTiers {
    /// Parses `device<TAB>tier` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let mut tiers = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| FeatureError::TierTable { line: i + 1, reason };
            let (device, tier) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `device<TAB>tier`".to_string()))?;
            let tier: u8 = tier
                .trim()
                .parse()
                .ok()
                .filter(|t| *t <= 2)
                .ok_or_else(|| err(format!("tier must be 0, 1 or 2, got `{tier}`")))?;
            tiers.insert(normalize_device(device), tier);
        }
        Ok(DeviceTiers { tiers })
    }

    pub fn tier(&self, device: &str) -> u8 {
        if device == UNKNOWN {
            return 0;
        }
        match self.tiers.get(&normalize_device(device)) {
            Some(&t) => t,
            None => {
                log::warn!("device `{device}` not in tier table, using tier 0");
                0
            }
        }
    }
}

/// The seven categorical codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalCodes {
    pub tx_power: u8,
    pub tx_carry: u8,
    pub rx_carry: u8,
    pub tx_pose: u8,
    pub rx_pose: u8,
    pub tx_device: u8,
    pub rx_device: u8,
}

pub fn tx_power_code(tx_power_dbm: Option<i32>) -> u8 {
    match tx_power_dbm {
        Some(8) => 1,
        Some(12) => 2,
        None | Some(7) => 0,
        Some(other) => {
            log::warn!("transmit power {other} dBm has no code, using 0");
            0
        }
    }
}

pub fn carry_code(carry: Carry) -> u8 {
    match carry {
        Carry::Unknown => 0,
        Carry::Hand => 1,
        Carry::Pocket => 2,
    }
}

pub fn pose_code(pose: Pose) -> u8 {
    match pose {
        Pose::Unknown => 0,
        Pose::Sitting => 1,
        Pose::Standing => 2,
    }
}

pub fn grain_code(grain: Grain) -> u8 {
    match grain {
        Grain::Fine => 0,
        Grain::Coarse => 1,
    }
}

pub fn encode_categorical(metadata: &EventMetadata, tiers: &DeviceTiers) -> CategoricalCodes {
    CategoricalCodes {
        tx_power: tx_power_code(metadata.tx_power_dbm),
        tx_carry: carry_code(metadata.tx_carry),
        rx_carry: carry_code(metadata.rx_carry),
        tx_pose: pose_code(metadata.tx_pose),
        rx_pose: pose_code(metadata.rx_pose),
        tx_device: tiers.tier(&metadata.tx_device),
        rx_device: tiers.tier(&metadata.rx_device),
    }
}

/// Hardware-equivalent stand-ins for devices that may be absent from training.
const DEVICE_SUBSTITUTES: [(&str, &[&str]); 4] = [
    ("iPhone6s", &["iPhone7"]),
    ("iPhone6sPlus", &["iPhone7Plus", "iPhone7"]),
    ("iPhone11Pro", &["iPhoneXS", "iPhoneX", "iPhone11"]),
    ("iPhone11ProMax", &["iPhoneXSMax", "iPhoneXS", "iPhoneX"]),
];

/// Maps a device that never appeared in training onto a known device with the
/// same Bluetooth hardware, or onto the unknown sentinel.
pub fn remap_unseen_device(device: &str, known: &BTreeSet<String>) -> String {
    let lookup: BTreeMap<String, &String> = known.iter().map(|k| (normalize_device(k), k)).collect();
    let key = normalize_device(device);
    if let Some(k) = lookup.get(&key) {
        return (*k).clone();
    }
    DEVICE_SUBSTITUTES
        .iter()
        .find(|(from, _)| normalize_device(from) == key)
        .and_then(|(_, to)| to.iter().find_map(|t| lookup.get(&normalize_device(t))))
        .map_or_else(|| UNKNOWN.to_string(), |k| (*k).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min_value: f64,
    pub max_value: f64,
}

impl MinMaxScaler {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self, FeatureError> {
        let (min_value, max_value) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if min_value > max_value {
            return Err(FeatureError::EmptyTrainingSet);
        }
        Ok(MinMaxScaler {
            min_value,
            max_value,
        })
    }

    /// Scales into `[0, 1]`, clipping out-of-range values. A zero-width range maps to 0.5.
    pub fn transform(&self, value: f64) -> f64 {
        let range = self.max_value - self.min_value;
        if range <= 0.0 {
            return 0.5;
        }
        ((value - self.min_value) / range).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub rssi: MinMaxScaler,
    pub attenuation: MinMaxScaler,
}

fn raw_signal(event: &Event) -> Result<(f64, f64), PathLossError> {
    let rssi = mean_rssi(event)?;
    let power = event.metadata.tx_power_dbm.unwrap_or(UNKNOWN_TX_POWER_DBM);
    Ok((rssi, path_loss_attenuation(power as f64, rssi)))
}

/// Fits both scalers on the given (training) events only.
pub fn fit_scalers<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Scalers, FeatureError> {
    let signals = events
        .into_iter()
        .map(raw_signal)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scalers {
        rssi: MinMaxScaler::fit(signals.iter().map(|s| s.0))?,
        attenuation: MinMaxScaler::fit(signals.iter().map(|s| s.1))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub predicted_distance_m: f64,
    pub norm_mean_rssi: f64,
    pub norm_path_loss: f64,
    pub grain_code: u8,
    pub codes: CategoricalCodes,
}

impl FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; 11] {
        let c = &self.codes;
        [
            self.predicted_distance_m,
            self.norm_mean_rssi,
            self.norm_path_loss,
            self.grain_code as f64,
            c.tx_power as f64,
            c.tx_carry as f64,
            c.rx_carry as f64,
            c.tx_pose as f64,
            c.rx_pose as f64,
            c.tx_device as f64,
            c.rx_device as f64,
        ]
    }
}

/// Path-loss distance estimate for the event's grain, clamped to the label range.
pub fn distance_feature(event: &Event, params: &ParamsByGrain) -> Result<f64, PathLossError> {
    let d = estimate_distance(params.get(event.grain()), mean_rssi(event)?);
    Ok(d.clamp(DISTANCE_FEATURE_RANGE.0, DISTANCE_FEATURE_RANGE.1))
}

pub fn extract_features(
    event: &Event,
    params: &ParamsByGrain,
    scalers: &Scalers,
    tiers: &DeviceTiers,
) -> Result<FeatureVector, FeatureError> {
    let (rssi, attenuation) = raw_signal(event)?;
    Ok(FeatureVector {
        predicted_distance_m: distance_feature(event, params)?,
        norm_mean_rssi: scalers.rssi.transform(rssi),
        norm_path_loss: scalers.attenuation.transform(attenuation),
        grain_code: grain_code(event.grain()),
        codes: encode_categorical(&event.metadata, tiers),
    })
}

/// Feature matrix as TSV with a header row.
pub fn write_feature_tsv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a FeatureVector)>) -> String {
    let mut out = String::from("file_id");
    for name in FEATURE_NAMES {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (id, fv) in rows {
        out.push_str(id);
        for v in fv.to_array() {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::SensorSample;
    use proptest::prelude::*;

    #[test]
    fn attenuation_arithmetic() {
        assert_eq!(path_loss_attenuation(12.0, -60.0), 31.0);
        assert_eq!(path_loss_attenuation(7.0, -34.0), 0.0);
        assert_eq!(path_loss_attenuation(8.0, -75.5), 42.5);
    }

    #[test]
    fn table_codes() {
        assert_eq!(tx_power_code(Some(7)), 0);
        assert_eq!(tx_power_code(None), 0);
        assert_eq!(tx_power_code(Some(8)), 1);
        assert_eq!(tx_power_code(Some(12)), 2);
        assert_eq!(carry_code(Carry::Pocket), 2);
        assert_eq!(carry_code(Carry::Hand), 1);
        assert_eq!(pose_code(Pose::Sitting), 1);
        assert_eq!(pose_code(Pose::Standing), 2);
        let tiers = DeviceTiers::default();
        assert_eq!(tiers.tier("iPhoneX"), 2);
        assert_eq!(tiers.tier("iPhone7"), 1);
        assert_eq!(tiers.tier("iPhone5"), 0);
        assert_eq!(tiers.tier("iPhone 11 Pro Max"), 2);
        assert_eq!(tiers.tier("Nokia3310"), 0);
        assert_eq!(tiers.tier(UNKNOWN), 0);
    }

    #[test]
    fn tier_table_errors() {
        assert!(DeviceTiers::parse("iPhone7\t3\n").is_err());
        assert!(DeviceTiers::parse("iPhone7 1\n").is_err());
    }

    fn known(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unseen_device_remapping() {
        let k = known(&["iPhone7", "iPhoneX", "iPhone8"]);
        assert_eq!(remap_unseen_device("iPhone6s", &k), "iPhone7");
        assert_eq!(remap_unseen_device("iPhone7", &k), "iPhone7");
        assert_eq!(remap_unseen_device("iPhone 11 Pro", &k), "iPhoneX");
        assert_eq!(remap_unseen_device("PixelUnknown", &k), UNKNOWN);
        assert_eq!(remap_unseen_device("iPhone6s", &known(&["iPhoneX"])), UNKNOWN);
    }

    #[test]
    fn scaler_behaviour() {
        let s = MinMaxScaler::fit([-80.0, -40.0]).unwrap();
        assert_eq!((s.min_value, s.max_value), (-80.0, -40.0));
        assert_eq!(s.transform(-60.0), 0.5);
        assert_eq!(s.transform(-100.0), 0.0);
        assert_eq!(s.transform(0.0), 1.0);
        let flat = MinMaxScaler::fit([3.0, 3.0]).unwrap();
        assert_eq!(flat.transform(-7.0), 0.5);
        assert!(MinMaxScaler::fit(std::iter::empty()).is_err());
    }

    fn event(grain: Grain, rssi: f64) -> Event {
        Event::new(
            EventMetadata::unknown("e", grain),
            vec![SensorSample::bluetooth(0.0, rssi)],
        )
    }

    #[test]
    fn fine_event_at_reference_power() {
        let e = event(Grain::Fine, -54.0);
        let scalers = fit_scalers([&e]).unwrap();
        let fv = extract_features(
            &e,
            &ParamsByGrain::shipped_default(),
            &scalers,
            &DeviceTiers::default(),
        )
        .unwrap();
        assert_eq!(fv.predicted_distance_m, 1.2);
        assert_eq!(fv.grain_code, 0);
        assert_eq!(fv.norm_mean_rssi, 0.5);
    }

    #[test]
    fn coarse_unknown_metadata_codes() {
        let e = event(Grain::Coarse, -70.0);
        let scalers = fit_scalers([&e]).unwrap();
        let fv = extract_features(
            &e,
            &ParamsByGrain::shipped_default(),
            &scalers,
            &DeviceTiers::default(),
        )
        .unwrap();
        assert_eq!(fv.grain_code, 1);
        assert_eq!(&fv.to_array()[4..], &[0.0; 7]);
    }

    fn vocabulary() -> impl Strategy<Value = EventMetadata> {
        let device = prop::sample::select(vec![
            "iPhone5", "iPhone6s", "iPhone7", "iPhone8Plus", "iPhoneX", "iPhone11Pro", UNKNOWN,
            "Pixel3",
        ]);
        let power = prop::sample::select(vec![None, Some(7), Some(8), Some(12)]);
        (
            device.clone(),
            device,
            power,
            prop::sample::select(Carry::ALL.to_vec()),
            prop::sample::select(Carry::ALL.to_vec()),
            prop::sample::select(Pose::ALL.to_vec()),
            prop::sample::select(Pose::ALL.to_vec()),
        )
            .prop_map(|(txd, rxd, p, tc, rc, tp, rp)| EventMetadata {
                file_id: "x".into(),
                tx_device: txd.into(),
                rx_device: rxd.into(),
                tx_power_dbm: p,
                tx_carry: tc,
                rx_carry: rc,
                tx_pose: tp,
                rx_pose: rp,
                grain: Grain::Fine,
            })
    }

    proptest! {
        #[test]
        fn codes_are_total_and_in_range(m in vocabulary()) {
            let tiers = DeviceTiers::default();
            let a = encode_categorical(&m, &tiers);
            prop_assert_eq!(a, encode_categorical(&m, &tiers));
            for code in [a.tx_power, a.tx_carry, a.rx_carry, a.tx_pose, a.rx_pose, a.tx_device, a.rx_device] {
                prop_assert!(code <= 2);
            }
        }

        #[test]
        fn remap_is_idempotent(
            device in prop::sample::select(vec!["iPhone6s", "iPhone6sPlus", "iPhone11Pro", "iPhone11ProMax", "iPhone7", "Galaxy", UNKNOWN]),
            mask in 0u8..32,
        ) {
            let pool = ["iPhone7", "iPhone7Plus", "iPhoneX", "iPhoneXS", UNKNOWN];
            let known: BTreeSet<String> = pool.iter().enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| s.to_string())
                .collect();
            let once = remap_unseen_device(device, &known);
            prop_assert_eq!(remap_unseen_device(&once, &known), once);
        }

        #[test]
        fn scaler_maps_training_extremes(values in prop::collection::vec(-120.0f64..0.0, 2..60)) {
            let s = MinMaxScaler::fit(values.iter().copied()).unwrap();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!((s.min_value, s.max_value), (lo, hi));
            for v in &values {
                let t = s.transform(*v);
                prop_assert!((0.0..=1.0).contains(&t));
            }
            if hi > lo {
                prop_assert_eq!(s.transform(lo), 0.0);
                prop_assert_eq!(s.transform(hi), 1.0);
            }
        }
    }
}
