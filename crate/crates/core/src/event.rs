//! In-memory model of recorded events: sensor samples, metadata vocabularies,
//! look windows and ground-truth labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Duration of one look, in seconds.
pub const LOOK_SECONDS: f64 = 4.0;

/// Plausible BLE RSSI range in dBm.
pub const RSSI_MIN_DBM: f64 = -120.0;
pub const RSSI_MAX_DBM: f64 = 0.0;

/// Sentinel used for every missing or unrecognised metadata value.
pub const UNKNOWN: &str = "UNKNOWN";

/// Distance labels in meters, ordered ascending.
pub const FINE_LABELS: [f64; 4] = [1.2, 1.8, 3.0, 4.5];
pub const COARSE_LABELS: [f64; 2] = [1.8, 4.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Bluetooth,
    Accelerometer,
    Gyroscope,
    Attitude,
    Gravity,
    MagneticField,
    Heading,
    Altitude,
}

impl Channel {
    pub const ALL: [Channel; 8] = [
        Channel::Bluetooth,
        Channel::Accelerometer,
        Channel::Gyroscope,
        Channel::Attitude,
        Channel::Gravity,
        Channel::MagneticField,
        Channel::Heading,
        Channel::Altitude,
    ];

    /// Number of values a sample of this channel carries.
    pub fn arity(self) -> usize {
        match self {
            Channel::Bluetooth => 1,
            Channel::Accelerometer
            | Channel::Gyroscope
            | Channel::Attitude
            | Channel::Gravity
            | Channel::Heading => 3,
            Channel::MagneticField => 4,
            Channel::Altitude => 2,
        }
    }

    /// Tag used in event files.
    pub fn tag(self) -> &'static str {
        match self {
            Channel::Bluetooth => "Bluetooth",
            Channel::Accelerometer => "Accelerometer",
            Channel::Gyroscope => "Gyroscope",
            Channel::Attitude => "Attitude",
            Channel::Gravity => "Gravity",
            Channel::MagneticField => "Magnetic-field",
            Channel::Heading => "Heading",
            Channel::Altitude => "Altitude",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.tag() == tag)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    /// Seconds from event start.
    pub time_s: f64,
    pub channel: Channel,
    pub values: Vec<f64>,
}

impl SensorSample {
    pub fn new(time_s: f64, channel: Channel, values: Vec<f64>) -> Self {
        SensorSample {
            time_s,
            channel,
            values,
        }
    }

    pub fn bluetooth(time_s: f64, rssi_dbm: f64) -> Self {
        SensorSample::new(time_s, Channel::Bluetooth, vec![rssi_dbm])
    }

    /// RSSI in dBm if this is a Bluetooth sample.
    pub fn rssi(&self) -> Option<f64> {
        match self.channel {
            Channel::Bluetooth => self.values.first().copied(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grain {
    Fine,
    Coarse,
}

impl Grain {
    pub const BOTH: [Grain; 2] = [Grain::Fine, Grain::Coarse];

    /// Label set for this grain, ascending.
    pub fn labels(self) -> &'static [f64] {
        match self {
            Grain::Fine => &FINE_LABELS,
            Grain::Coarse => &COARSE_LABELS,
        }
    }

    /// Single-letter code used by key files.
    pub fn key_code(self) -> &'static str {
        match self {
            Grain::Fine => "F",
            Grain::Coarse => "C",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grain::Fine => "fine",
            Grain::Coarse => "coarse",
        }
    }
}

impl fmt::Display for Grain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "fine" | "fine_grain" => Ok(Grain::Fine),
            "c" | "coarse" | "coarse_grain" => Ok(Grain::Coarse),
            other => Err(format!("unrecognised grain `{other}`")),
        }
    }
}

/// How a phone is carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Carry {
    Unknown,
    Hand,
    Pocket,
}

impl Carry {
    pub const ALL: [Carry; 3] = [Carry::Unknown, Carry::Hand, Carry::Pocket];

    pub fn as_str(self) -> &'static str {
        match self {
            Carry::Unknown => UNKNOWN,
            Carry::Hand => "hand",
            Carry::Pocket => "pocket",
        }
    }

    /// Parses a vocabulary string; `None` when it is not part of the vocabulary.
    pub fn parse(s: &str) -> Option<Carry> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hand" => Some(Carry::Hand),
            "pocket" => Some(Carry::Pocket),
            "unknown" => Some(Carry::Unknown),
            _ => None,
        }
    }
}

/// Pose of the phone's user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pose {
    Unknown,
    Sitting,
    Standing,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::Unknown, Pose::Sitting, Pose::Standing];

    pub fn as_str(self) -> &'static str {
        match self {
            Pose::Unknown => UNKNOWN,
            Pose::Sitting => "sitting",
            Pose::Standing => "standing",
        }
    }

    pub fn parse(s: &str) -> Option<Pose> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sitting" => Some(Pose::Sitting),
            "standing" => Some(Pose::Standing),
            "unknown" => Some(Pose::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMetadata {
    pub file_id: String,
    /// Device model name, or [`UNKNOWN`].
    pub tx_device: String,
    pub rx_device: String,
    /// Advertised transmit power; `None` when unknown.
    pub tx_power_dbm: Option<i32>,
    pub tx_carry: Carry,
    pub rx_carry: Carry,
    pub tx_pose: Pose,
    pub rx_pose: Pose,
    pub grain: Grain,
}

impl EventMetadata {
    /// Metadata with every optional field set to unknown.
    pub fn unknown(file_id: impl Into<String>, grain: Grain) -> Self {
        EventMetadata {
            file_id: file_id.into(),
            tx_device: UNKNOWN.to_string(),
            rx_device: UNKNOWN.to_string(),
            tx_power_dbm: None,
            tx_carry: Carry::Unknown,
            rx_carry: Carry::Unknown,
            tx_pose: Pose::Unknown,
            rx_pose: Pose::Unknown,
            grain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub metadata: EventMetadata,
    pub samples: Vec<SensorSample>,
}

impl Event {
    pub fn new(metadata: EventMetadata, samples: Vec<SensorSample>) -> Self {
        Event { metadata, samples }
    }

    pub fn file_id(&self) -> &str {
        &self.metadata.file_id
    }

    pub fn grain(&self) -> Grain {
        self.metadata.grain
    }

    pub fn rssi_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().filter_map(SensorSample::rssi)
    }

    /// Splits the event into contiguous 4-second looks.
    ///
    /// Windows run `[0,4), [4,8), ...` through the last sample. Empty windows
    /// in the middle of an event are kept so that indices stay aligned with
    /// time. Requires samples sorted by time (see [`validate_event`]).
    pub fn looks(&self) -> Vec<LookWindow<'_>> {
        let Some(last) = self.samples.last() else {
            return Vec::new();
        };
        let count = (last.time_s / LOOK_SECONDS).floor().max(0.0) as usize + 1;
        let spacing = median_spacing(&self.samples);
        let mut windows = Vec::with_capacity(count);
        let mut cursor = 0;
        for index in 0..count {
            let start_s = index as f64 * LOOK_SECONDS;
            let end_s = start_s + LOOK_SECONDS;
            let begin = cursor;
            while cursor < self.samples.len() && self.samples[cursor].time_s < end_s {
                cursor += 1;
            }
            let samples = &self.samples[begin..cursor];
            let partial = index + 1 == count && {
                let covered = samples.last().map_or(0.0, |s| s.time_s - start_s) + spacing;
                covered < LOOK_SECONDS - 1e-9
            };
            windows.push(LookWindow {
                index,
                start_s,
                end_s,
                samples,
                partial,
            });
        }
        windows
    }
}

/// Median positive gap between consecutive sample times; 0 for fewer than two distinct times.
fn median_spacing(samples: &[SensorSample]) -> f64 {
    let mut gaps: Vec<f64> = samples
        .windows(2)
        .map(|w| w[1].time_s - w[0].time_s)
        .filter(|g| *g > 0.0)
        .collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2]
}

/// A 4-second window of an event.
#[derive(Debug, Clone, PartialEq)]
pub struct LookWindow<'a> {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub samples: &'a [SensorSample],
    /// Set on a trailing window whose samples (each credited with the event's
    /// median sample spacing) cover less than the full four seconds.
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub grain: Grain,
    pub max_distance_m: f64,
}

impl GroundTruthLabel {
    /// Builds a label, snapping `distance` to the grain's label set.
    ///
    /// Returns `None` when the distance is not a label of that grain.
    pub fn new(grain: Grain, distance: f64) -> Option<Self> {
        grain
            .labels()
            .iter()
            .find(|&&l| (l - distance).abs() < 1e-9)
            .map(|&max_distance_m| GroundTruthLabel {
                grain,
                max_distance_m,
            })
    }

    /// Index of the label within [`FINE_LABELS`].
    pub fn class_index(&self) -> usize {
        class_index(self.max_distance_m).expect("label distance is always a known class")
    }
}

/// Index of `distance` in [`FINE_LABELS`], if it is one of the four labels.
pub fn class_index(distance: f64) -> Option<usize> {
    FINE_LABELS.iter().position(|&l| (l - distance).abs() < 1e-9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Arity { expected: usize, found: usize },
    RssiRange,
    AccuracyCode,
    TimeOrder,
    NegativeTime,
    NonFinite,
    NoBluetooth,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Arity { expected, found } => {
                write!(f, "arity: expected {expected} values, found {found}")
            }
            Rule::RssiRange => write!(f, "rssi outside [{RSSI_MIN_DBM}, {RSSI_MAX_DBM}] dBm"),
            Rule::AccuracyCode => write!(f, "magnetic-field accuracy code not in {{0,1,2,3}}"),
            Rule::TimeOrder => write!(f, "ordering: time earlier than previous sample"),
            Rule::NegativeTime => write!(f, "negative time"),
            Rule::NonFinite => write!(f, "non-finite value"),
            Rule::NoBluetooth => write!(f, "event has no Bluetooth samples"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending sample, or `None` for event-level rules.
    pub sample_index: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sample_index {
            Some(i) => write!(f, "sample {i}: {}", self.rule),
            None => write!(f, "event: {}", self.rule),
        }
    }
}

/// Checks every sample and event invariant; an empty report means the event is valid.
pub fn validate_event(event: &Event) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |sample_index, rule| report.push(Violation { sample_index, rule });
    let mut has_bluetooth = false;
    let mut prev_time = f64::NEG_INFINITY;
    for (i, sample) in event.samples.iter().enumerate() {
        let at = Some(i);
        if !sample.time_s.is_finite() || sample.values.iter().any(|v| !v.is_finite()) {
            push(at, Rule::NonFinite);
        }
        if sample.time_s < 0.0 {
            push(at, Rule::NegativeTime);
        }
        if sample.time_s < prev_time {
            push(at, Rule::TimeOrder);
        }
        prev_time = prev_time.max(sample.time_s);
        let expected = sample.channel.arity();
        if sample.values.len() != expected {
            push(
                at,
                Rule::Arity {
                    expected,
                    found: sample.values.len(),
                },
            );
            continue;
        }
        match sample.channel {
            Channel::Bluetooth => {
                has_bluetooth = true;
                let rssi = sample.values[0];
                if !(RSSI_MIN_DBM..=RSSI_MAX_DBM).contains(&rssi) {
                    push(at, Rule::RssiRange);
                }
            }
            Channel::MagneticField => {
                let code = sample.values[3];
                if !(code.fract() == 0.0 && (0.0..=3.0).contains(&code)) {
                    push(at, Rule::AccuracyCode);
                }
            }
            _ => {}
        }
    }
    if !has_bluetooth {
        push(None, Rule::NoBluetooth);
    }
    report
}
