use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use proptest::prelude::*;
use tc4tl::event::{validate_event, Carry, Channel, Event, EventMetadata, Grain, Pose, SensorSample};
use tc4tl::ingest::{
    event_files, load_dataset, parse_event_file, parse_key_file, segment_looks, write_event_file,
    write_key_file,
};
use tc4tl::GroundTruthLabel;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn corpus() -> Vec<(PathBuf, Vec<u8>)> {
    event_files(&fixtures().join("events"))
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect()
}

#[test]
fn corpus_is_byte_stable() {
    let files = corpus();
    assert!(files.len() >= 20);
    for (path, bytes) in &files {
        let event = parse_event_file(bytes).unwrap();
        let written = write_event_file(&event);
        assert_eq!(written.as_bytes(), &bytes[..], "{}", path.display());
        assert_eq!(parse_event_file(written.as_bytes()).unwrap(), event);
        assert!(validate_event(&event).is_empty(), "{}", path.display());
    }
}

#[test]
fn corpus_coverage() {
    let events: Vec<Event> = corpus()
        .iter()
        .map(|(_, b)| parse_event_file(b).unwrap())
        .collect();
    let channels: BTreeSet<&str> = events
        .iter()
        .flat_map(|e| e.samples.iter().map(|s| s.channel.tag()))
        .collect();
    assert_eq!(channels.len(), Channel::ALL.len());

    let unknown = events
        .iter()
        .filter(|e| e.metadata == EventMetadata::unknown(e.file_id(), e.grain()))
        .count();
    assert!(unknown >= 2);
    assert!(events.iter().any(|e| e.metadata.tx_power_dbm.is_some()));

    let partial = events
        .iter()
        .filter(|e| segment_looks(e).last().is_some_and(|w| w.partial))
        .count();
    assert!(partial >= 2);
    let gapped = events
        .iter()
        .filter(|e| segment_looks(e).iter().any(|w| w.samples.is_empty()))
        .count();
    assert!(gapped >= 1);
    assert!(events.iter().any(|e| e.grain() == Grain::Coarse));
}

#[test]
fn corpus_key_round_trips_and_matches_events() {
    let key_bytes = std::fs::read(fixtures().join("key.tsv")).unwrap();
    let key = parse_key_file(&key_bytes).unwrap();
    assert_eq!(write_key_file(&key).as_bytes(), &key_bytes[..]);
    let data = load_dataset(&fixtures().join("events"), Some(&fixtures().join("key.tsv"))).unwrap();
    assert_eq!(data.labeled().unwrap().len(), 24);
    for label in key.values() {
        if label.grain == Grain::Coarse {
            assert!([1.8, 4.5].contains(&label.max_distance_m));
        }
    }
}

#[test]
fn corpus_looks_partition_samples() {
    for (_, bytes) in corpus() {
        let event = parse_event_file(&bytes).unwrap();
        let joined: Vec<&SensorSample> = segment_looks(&event)
            .iter()
            .flat_map(|w| w.samples.iter())
            .collect();
        let all: Vec<&SensorSample> = event.samples.iter().collect();
        assert_eq!(joined, all);
    }
}

#[test]
fn out_of_order_input_is_sorted_not_canonical() {
    let text = "#fileID,a\n#TXDevice,UNKNOWN\n#RXDevice,UNKNOWN\n#TXPower,UNKNOWN\n\
                #TXCarry,UNKNOWN\n#RXCarry,UNKNOWN\n#TXPose,UNKNOWN\n#RXPose,UNKNOWN\n#Grain,fine\n\
                2,Bluetooth,-60\n1,Bluetooth,-61\n";
    let event = parse_event_file(text.as_bytes()).unwrap();
    assert_eq!(event.samples[0].time_s, 1.0);
    let canonical = write_event_file(&event);
    assert_ne!(canonical, text);
    assert_eq!(write_event_file(&parse_event_file(canonical.as_bytes()).unwrap()), canonical);
}

fn arb_channel() -> impl Strategy<Value = Channel> {
    proptest::sample::select(Channel::ALL.to_vec())
}

fn arb_sample() -> impl Strategy<Value = SensorSample> {
    (0.0..40.0f64, arb_channel(), -100.0..-20.0f64, proptest::collection::vec(-1e3..1e3f64, 3), 0..4u8)
        .prop_map(|(t, channel, rssi, xs, code)| {
            let values = match channel {
                Channel::Bluetooth => vec![rssi],
                Channel::MagneticField => vec![xs[0], xs[1], xs[2], f64::from(code)],
                Channel::Altitude => xs[..2].to_vec(),
                _ => xs,
            };
            SensorSample::new(t, channel, values)
        })
}

fn arb_event() -> impl Strategy<Value = Event> {
    (
        proptest::collection::vec(arb_sample(), 0..40),
        -100.0..-20.0f64,
        proptest::option::of(-20..20i32),
        proptest::sample::select(vec![Carry::Hand, Carry::Pocket, Carry::Unknown]),
        proptest::sample::select(vec![Pose::Sitting, Pose::Standing, Pose::Unknown]),
        any::<bool>(),
    )
        .prop_map(|(mut samples, rssi, power, carry, pose, fine)| {
            samples.push(SensorSample::bluetooth(0.5, rssi));
            samples.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
            let grain = if fine { Grain::Fine } else { Grain::Coarse };
            let mut metadata = EventMetadata::unknown("p1", grain);
            metadata.tx_device = "Pixel3".into();
            metadata.tx_power_dbm = power;
            metadata.rx_carry = carry;
            metadata.tx_pose = pose;
            Event::new(metadata, samples)
        })
}

fn arb_labels() -> impl Strategy<Value = BTreeMap<String, GroundTruthLabel>> {
    proptest::collection::btree_map(
        "[a-z0-9_]{1,8}",
        (any::<bool>(), 0..4usize).prop_map(|(fine, i)| {
            let grain = if fine { Grain::Fine } else { Grain::Coarse };
            let labels = grain.labels();
            GroundTruthLabel::new(grain, labels[i % labels.len()]).unwrap()
        }),
        0..20,
    )
}

proptest! {
    #[test]
    fn written_events_parse_back_identically(event in arb_event()) {
        let text = write_event_file(&event);
        let parsed = parse_event_file(text.as_bytes()).unwrap();
        prop_assert_eq!(&parsed, &event);
        prop_assert_eq!(write_event_file(&parsed), text);
    }

    #[test]
    fn looks_are_disjoint_and_cover(event in arb_event()) {
        let windows = segment_looks(&event);
        let mut joined = Vec::new();
        for w in &windows {
            for s in w.samples {
                prop_assert!(s.time_s >= w.start_s && s.time_s < w.end_s);
                joined.push(s.clone());
            }
        }
        prop_assert_eq!(joined, event.samples.clone());
    }

    #[test]
    fn key_files_round_trip(labels in arb_labels()) {
        let text = write_key_file(&labels);
        prop_assert_eq!(parse_key_file(text.as_bytes()).unwrap(), labels);
    }
}
