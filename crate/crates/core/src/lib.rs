//! IoT device fingerprinting from TCP session payloads.
//!
//! Each TCP session seen in a packet capture is reduced to the first 784
//! bytes of its payload, viewed as a 28×28 grayscale image, and classified
//! by a small dense network. The modules follow the data:
//!
//! - [`capture`]: pcap parsing, bidirectional session grouping, MAC buckets
//! - [`transform`]: payload extraction, fixed-length vectors, IDX files
//! - [`dataset`]: device corpora, stratified splits, labeling schemes, k-fold
//! - [`nn`]: the two-layer network, Adam, training and model files
//! - [`eval`]: confusion matrices, metrics, unknown-device thresholds
//! - [`pipeline`] and [`fixtures`]: end-to-end preprocessing and synthetic captures

pub mod capture;
pub mod dataset;
pub mod eval;
pub mod fixtures;
pub mod nn;
pub mod pipeline;
pub mod transform;

pub use capture::{MacAddr, RawPacket, SessionKey, SessionRecord};
pub use dataset::{DeviceCorpus, DeviceKind, DeviceSplit, ExperimentSpec, Scheme, SplitDataset};
pub use eval::{EvalReport, ThresholdResult, Verdict};
pub use nn::{ModelParams, TrainConfig, TrainHistory};
pub use transform::{IdxDataset, PayloadImage, PayloadVector};

/// Crate version recorded in manifests and model files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
