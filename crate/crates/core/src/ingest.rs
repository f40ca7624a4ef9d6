//! Reading and writing event files, key files and system-output files.
//!
//! Event files are UTF-8 text. Header lines have the form `#Key,value`, data
//! lines the form `time_s,Channel,v1[,v2...]`:
//!
//! ```text
//! #fileID,ev000001
//! #TXDevice,iPhone7
//! #RXDevice,iPhoneX
//! #TXPower,12
//! #TXCarry,hand
//! #RXCarry,pocket
//! #TXPose,sitting
//! #RXPose,UNKNOWN
//! #Grain,fine
//! 0.25,Bluetooth,-61.5
//! 0.3,Accelerometer,0.01,-0.02,0.98
//! ```
//!
//! [`write_event_file`] emits this canonical form: headers in the order above,
//! numbers in shortest round-trip notation, LF line endings.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::event::{
    Carry, Channel, Event, EventMetadata, Grain, GroundTruthLabel, LookWindow, Pose, SensorSample,
    UNKNOWN,
};

/// Extension of event files inside a dataset directory.
pub const EVENT_FILE_EXT: &str = "csv";

const HEADER_KEYS: [&str; 9] = [
    "fileID", "TXDevice", "RXDevice", "TXPower", "TXCarry", "RXCarry", "TXPose", "RXPose", "Grain",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("missing required header `#{0}`")]
    MissingHeader(&'static str),
    #[error("line {line}: unknown channel tag `{tag}`")]
    UnknownChannelTag { line: usize, tag: String },
    #[error("line {line}: {channel} expects {expected} values, found {found}")]
    ArityMismatch {
        line: usize,
        channel: Channel,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: invalid number `{text}`")]
    InvalidNumber { line: usize, text: String },
    #[error("event has no Bluetooth samples")]
    NoBluetoothSamples,
    #[error("line {line}: malformed line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: distance {distance} is not a {grain} grain label")]
    InvalidDistanceForGrain {
        line: usize,
        grain: Grain,
        distance: f64,
    },
    #[error("duplicate file id `{0}`")]
    DuplicateFileId(String),
    #[error("label for `{0}` has no matching event")]
    LabelWithoutEvent(String),
    #[error("event `{0}` has no label")]
    MissingLabel(String),
    #[error("event `{file_id}` is {event} grain but its label says {label}")]
    GrainMismatch {
        file_id: String,
        event: Grain,
        label: Grain,
    },
    #[error("{path}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    fn in_file(self, path: &Path) -> IngestError {
        IngestError::File {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}

fn parse_number(text: &str, line: usize) -> Result<f64, IngestError> {
    let text = text.trim();
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::InvalidNumber {
            line,
            text: text.to_string(),
        })
}

fn metadata_string(value: &str) -> String {
    let value = value.trim();
    if value.is_empty() || value.eq_ignore_ascii_case("unknown") {
        UNKNOWN.to_string()
    } else {
        value.to_string()
    }
}

/// Parses one event file.
///
/// Unrecognised metadata values become the unknown sentinel. Samples that are
/// out of time order are stably re-sorted.
pub fn parse_event_file(content: &[u8]) -> Result<Event, IngestError> {
    let text = std::str::from_utf8(content).map_err(|_| IngestError::NotUtf8)?;
    let mut headers: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut samples = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        if let Some(header) = raw.strip_prefix('#') {
            let (key, value) = header.split_once(',').ok_or_else(|| {
                IngestError::MalformedHeader {
                    line,
                    reason: format!("expected `#key,value`, got `{raw}`"),
                }
            })?;
            let key = key.trim();
            let Some(&known) = HEADER_KEYS.iter().find(|k| **k == key) else {
                log::warn!("line {line}: ignoring unrecognised header `{key}`");
                continue;
            };
            if headers.insert(known, value.trim().to_string()).is_some() {
                return Err(IngestError::MalformedHeader {
                    line,
                    reason: format!("duplicate header `{key}`"),
                });
            }
            continue;
        }

        let mut fields = raw.split(',');
        let time = fields.next().unwrap_or_default();
        let tag = fields.next().ok_or_else(|| IngestError::MalformedLine {
            line,
            reason: "expected `time,Channel,values...`".to_string(),
        })?;
        let time_s = parse_number(time, line)?;
        let channel =
            Channel::from_tag(tag.trim()).ok_or_else(|| IngestError::UnknownChannelTag {
                line,
                tag: tag.trim().to_string(),
            })?;
        let values = fields
            .map(|f| parse_number(f, line))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != channel.arity() {
            return Err(IngestError::ArityMismatch {
                line,
                channel,
                expected: channel.arity(),
                found: values.len(),
            });
        }
        samples.push(SensorSample::new(time_s, channel, values));
    }

    let mut take = |key: &'static str| headers.remove(key).ok_or(IngestError::MissingHeader(key));
    let file_id = take("fileID")?;
    if file_id.is_empty() {
        return Err(IngestError::MalformedHeader {
            line: 0,
            reason: "empty fileID".to_string(),
        });
    }
    let tx_device = metadata_string(&take("TXDevice")?);
    let rx_device = metadata_string(&take("RXDevice")?);
    let tx_power_dbm = {
        let raw = take("TXPower")?;
        match raw.parse::<i32>() {
            Ok(p) => Some(p),
            Err(_) => {
                if !raw.eq_ignore_ascii_case("unknown") {
                    log::warn!("{file_id}: TXPower `{raw}` treated as unknown");
                }
                None
            }
        }
    };
    let carry = |raw: String| {
        Carry::parse(&raw).unwrap_or_else(|| {
            log::warn!("{file_id}: carry state `{raw}` treated as unknown");
            Carry::Unknown
        })
    };
    let tx_carry = carry(take("TXCarry")?);
    let rx_carry = carry(take("RXCarry")?);
    let pose = |raw: String| {
        Pose::parse(&raw).unwrap_or_else(|| {
            log::warn!("{file_id}: pose `{raw}` treated as unknown");
            Pose::Unknown
        })
    };
    let tx_pose = pose(take("TXPose")?);
    let rx_pose = pose(take("RXPose")?);
    let grain = take("Grain")?
        .parse::<Grain>()
        .map_err(|reason| IngestError::MalformedHeader { line: 0, reason })?;

    if !samples.iter().any(|s| s.channel == Channel::Bluetooth) {
        return Err(IngestError::NoBluetoothSamples);
    }
    if samples.windows(2).any(|w| w[1].time_s < w[0].time_s) {
        log::warn!("{file_id}: samples out of time order, re-sorting");
        samples.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    }

    Ok(Event::new(
        EventMetadata {
            file_id,
            tx_device,
            rx_device,
            tx_power_dbm,
            tx_carry,
            rx_carry,
            tx_pose,
            rx_pose,
            grain,
        },
        samples,
    ))
}

/// Serialises an event in canonical form.
pub fn write_event_file(event: &Event) -> String {
    let m = &event.metadata;
    let mut out = String::new();
    let power = m
        .tx_power_dbm
        .map_or_else(|| UNKNOWN.to_string(), |p| p.to_string());
    for (key, value) in [
        ("fileID", m.file_id.as_str()),
        ("TXDevice", m.tx_device.as_str()),
        ("RXDevice", m.rx_device.as_str()),
        ("TXPower", power.as_str()),
        ("TXCarry", m.tx_carry.as_str()),
        ("RXCarry", m.rx_carry.as_str()),
        ("TXPose", m.tx_pose.as_str()),
        ("RXPose", m.rx_pose.as_str()),
        ("Grain", m.grain.name()),
    ] {
        let _ = writeln!(out, "#{key},{value}");
    }
    for s in &event.samples {
        let _ = write!(out, "{},{}", s.time_s, s.channel.tag());
        for v in &s.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a key file of `file_id<TAB>F|C<TAB>distance_m` lines.
pub fn parse_key_file(content: &[u8]) -> Result<BTreeMap<String, GroundTruthLabel>, IngestError> {
    let text = std::str::from_utf8(content).map_err(|_| IngestError::NotUtf8)?;
    let mut labels = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let [file_id, grain, distance] = fields[..] else {
            return Err(IngestError::MalformedLine {
                line,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let grain = match grain.trim() {
            "F" => Grain::Fine,
            "C" => Grain::Coarse,
            other => {
                return Err(IngestError::MalformedLine {
                    line,
                    reason: format!("grain must be F or C, got `{other}`"),
                })
            }
        };
        let distance = parse_number(distance, line)?;
        let label = GroundTruthLabel::new(grain, distance).ok_or(
            IngestError::InvalidDistanceForGrain {
                line,
                grain,
                distance,
            },
        )?;
        let file_id = file_id.trim().to_string();
        if labels.insert(file_id.clone(), label).is_some() {
            return Err(IngestError::DuplicateFileId(file_id));
        }
    }
    Ok(labels)
}

pub fn write_key_file(labels: &BTreeMap<String, GroundTruthLabel>) -> String {
    let mut out = String::new();
    for (id, label) in labels {
        let _ = writeln!(
            out,
            "{id}\t{}\t{:.1}",
            label.grain.key_code(),
            label.max_distance_m
        );
    }
    out
}

/// Parses a system-output file of `file_id<TAB>predicted_distance_m` lines.
pub fn parse_system_output(content: &[u8]) -> Result<BTreeMap<String, f64>, IngestError> {
    let text = std::str::from_utf8(content).map_err(|_| IngestError::NotUtf8)?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let Some((id, distance)) = raw.split_once('\t') else {
            return Err(IngestError::MalformedLine {
                line,
                reason: "expected `file_id<TAB>distance`".to_string(),
            });
        };
        let distance = parse_number(distance, line)?;
        if distance <= 0.0 {
            return Err(IngestError::MalformedLine {
                line,
                reason: format!("distance must be positive, got {distance}"),
            });
        }
        let id = id.trim().to_string();
        if out.insert(id.clone(), distance).is_some() {
            return Err(IngestError::DuplicateFileId(id));
        }
    }
    Ok(out)
}

pub fn write_system_output(predictions: &BTreeMap<String, f64>) -> String {
    let mut out = String::new();
    for (id, d) in predictions {
        let _ = writeln!(out, "{id}\t{d}");
    }
    out
}

/// Splits an event into 4-second looks. See [`Event::looks`].
pub fn segment_looks(event: &Event) -> Vec<LookWindow<'_>> {
    event.looks()
}

/// A set of events plus optional ground truth.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub labels: Option<BTreeMap<String, GroundTruthLabel>>,
}

impl Dataset {
    /// Assembles a dataset, checking that event ids are unique and that every
    /// label belongs to exactly one event of the same grain.
    pub fn new(
        events: Vec<Event>,
        labels: Option<BTreeMap<String, GroundTruthLabel>>,
    ) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for e in &events {
            if !seen.insert(e.file_id()) {
                return Err(IngestError::DuplicateFileId(e.file_id().to_string()));
            }
        }
        if let Some(labels) = &labels {
            let by_id: BTreeMap<&str, &Event> = events.iter().map(|e| (e.file_id(), e)).collect();
            for (id, label) in labels {
                let event = by_id
                    .get(id.as_str())
                    .ok_or_else(|| IngestError::LabelWithoutEvent(id.clone()))?;
                if event.grain() != label.grain {
                    return Err(IngestError::GrainMismatch {
                        file_id: id.clone(),
                        event: event.grain(),
                        label: label.grain,
                    });
                }
            }
        }
        Ok(Dataset { events, labels })
    }

    pub fn label(&self, file_id: &str) -> Option<&GroundTruthLabel> {
        self.labels.as_ref()?.get(file_id)
    }

    /// Every event paired with its label; fails if any event is unlabelled.
    pub fn labeled(&self) -> Result<Vec<(&Event, GroundTruthLabel)>, IngestError> {
        self.events
            .iter()
            .map(|e| {
                self.label(e.file_id())
                    .map(|l| (e, *l))
                    .ok_or_else(|| IngestError::MissingLabel(e.file_id().to_string()))
            })
            .collect()
    }

    /// Sub-dataset holding only events (and labels) of one grain.
    pub fn of_grain(&self, grain: Grain) -> Dataset {
        let events: Vec<Event> = self
            .events
            .iter()
            .filter(|e| e.grain() == grain)
            .cloned()
            .collect();
        let labels = self.labels.as_ref().map(|labels| {
            labels
                .iter()
                .filter(|(_, l)| l.grain == grain)
                .map(|(id, l)| (id.clone(), *l))
                .collect()
        });
        Dataset { events, labels }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Event files in `dir`, sorted by name.
pub fn event_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == EVENT_FILE_EXT) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Parses every event file in `dir` (in parallel on the current rayon pool),
/// returning events in file-name order.
pub fn load_events(dir: &Path) -> Result<Vec<Event>, IngestError> {
    event_files(dir)?
        .par_iter()
        .map(|path| parse_event_file(&read(path)?).map_err(|e| e.in_file(path)))
        .collect()
}

pub fn load_key(path: &Path) -> Result<BTreeMap<String, GroundTruthLabel>, IngestError> {
    parse_key_file(&read(path)?).map_err(|e| e.in_file(path))
}

pub fn load_system_output(path: &Path) -> Result<BTreeMap<String, f64>, IngestError> {
    parse_system_output(&read(path)?).map_err(|e| e.in_file(path))
}

pub fn load_dataset(dir: &Path, key: Option<&Path>) -> Result<Dataset, IngestError> {
    let events = load_events(dir)?;
    let labels = key.map(load_key).transpose()?;
    Dataset::new(events, labels)
}
