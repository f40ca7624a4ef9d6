use std::path::PathBuf;

use tc4tl::event::{Carry, Event, EventMetadata, Grain, Pose, SensorSample};
use tc4tl::features::{extract_features, fit_scalers, DeviceTiers};
use tc4tl::ingest::load_events;
use tc4tl::pathloss::ParamsByGrain;

fn event(id: &str, power: Option<i32>, rssi: &[f64]) -> Event {
    let samples = rssi
        .iter()
        .enumerate()
        .map(|(i, &r)| SensorSample::bluetooth(0.25 * i as f64, r))
        .collect();
    let mut m = EventMetadata::unknown(id, Grain::Fine);
    m.tx_power_dbm = power;
    Event::new(m, samples)
}

#[test]
fn hand_computed_vector() {
    let mut a = event("a", Some(8), &[-60.0, -62.0, -64.0]);
    a.metadata.tx_device = "iPhoneX".into();
    a.metadata.rx_device = "iPhone 7".into();
    a.metadata.tx_carry = Carry::Pocket;
    a.metadata.rx_carry = Carry::Hand;
    a.metadata.tx_pose = Pose::Sitting;
    a.metadata.rx_pose = Pose::Standing;
    let b = event("b", Some(12), &[-50.0]);
    let c = event("c", None, &[-71.0, -69.0]);

    let scalers = fit_scalers([&a, &b, &c]).unwrap();
    let fv = extract_features(&a, &ParamsByGrain::shipped_default(), &scalers, &DeviceTiers::default()).unwrap();
    // mean rssi -62 against fine (-54, 2.1): 10^(8/21) m
    // rssi range [-70, -50]; attenuation 8-41+62 = 29 in range [21, 36]
    let want = [2.4040991835099716, 0.4, 8.0 / 15.0, 0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0];
    let got = fv.to_array();
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() < 1e-12, "feature {i}: {g} vs {w}");
    }

    let fc = extract_features(&c, &ParamsByGrain::shipped_default(), &scalers, &DeviceTiers::default()).unwrap();
    assert_eq!(fc.to_array()[..3], [4.5, 0.0, 1.0]);
    assert_eq!(fc.to_array()[3..], [0.0; 8]);
}

#[test]
fn scalers_span_the_training_set() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/events");
    let events = load_events(&dir).unwrap();
    let scalers = fit_scalers(&events).unwrap();
    let params = ParamsByGrain::shipped_default();
    let tiers = DeviceTiers::default();
    let rows: Vec<[f64; 11]> = events
        .iter()
        .map(|e| extract_features(e, &params, &scalers, &tiers).unwrap().to_array())
        .collect();
    for col in [1, 2] {
        let values: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(values.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(values.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }
    for (e, r) in events.iter().zip(&rows) {
        let again = extract_features(e, &params, &scalers, &tiers).unwrap().to_array();
        assert_eq!(&again, r);
        assert!((1.2..=4.5).contains(&r[0]));
    }
}
