//! BLE proximity detection for exposure notification.
//!
//! Events are short recordings of received Bluetooth signal strength (plus
//! motion sensors) between two phones. The crate estimates whether the
//! phones were within a given distance, either with a calibrated log-distance
//! path-loss formula or with a trained classifier (MLP or gradient-boosted
//! trees), and scores decisions with the normalized detection cost function.

pub mod event;
pub mod features;
pub mod gbm;
pub mod ingest;
pub mod mlp;
pub mod pathloss;
pub mod pipeline;
pub mod scorer;
pub mod synthgen;

pub use event::{Event, EventMetadata, Grain, GroundTruthLabel};
pub use ingest::Dataset;
