//! Per-device corpora, the stratified train/validation/test split, the five
//! labeling schemes and k-fold assignment.
//!
//! Splitting draws 10% of the whole corpus for validation and then 10% of
//! what is left for test. Each draw size is rounded up, then apportioned to
//! devices by largest remainder (ties go to the earlier device), so every
//! device contributes its proportional share. Which sessions a device gives
//! up is decided by a seeded ChaCha8 shuffle, one stream per device.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::transform::{write_idx, IdxDataset, PayloadVector, TransformError};

/// Minimum session count used for the published corpus (strictly more than this).
pub const DEFAULT_MIN_SESSIONS: usize = 1000;
/// Fraction numerator/denominator of each held-out draw.
const HOLDOUT_NUM: usize = 1;
const HOLDOUT_DEN: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no device survives filtering (need more than {min} sessions)")]
    EmptyCorpus { min: usize },
    #[error("device {name:?} is not in the corpus")]
    UnknownDevice { name: String },
    #[error("device {name:?} is not an IoT device")]
    NotIot { name: String },
    #[error("scheme {scheme} cannot be labeled: {reason}")]
    DegenerateLabels { scheme: String, reason: String },
    #[error("scheme {scheme} does not support k-fold cross-validation")]
    SchemeNotSupported { scheme: String },
    #[error("k-fold needs k >= 2, got {k}")]
    InvalidFoldCount { k: usize },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    Iot,
    NonIot,
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceKind::Iot => "iot",
            DeviceKind::NonIot => "non-iot",
        })
    }
}

impl FromStr for DeviceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "iot" => Ok(DeviceKind::Iot),
            "non-iot" | "noniot" => Ok(DeviceKind::NonIot),
            other => Err(format!("unknown device kind {other:?} (expected iot or non-iot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Device {
    pub name: String,
    pub kind: DeviceKind,
    pub sessions: Vec<PayloadVector>,
}

/// Devices in a fixed order; that order defines multiclass label numbering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceCorpus {
    pub devices: Vec<Device>,
}

impl DeviceCorpus {
    pub fn total_sessions(&self) -> usize {
        self.devices.iter().map(|d| d.sessions.len()).sum()
    }

    pub fn device(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name == name)
    }
}

/// Keeps devices with strictly more than `min` sessions.
pub fn filter_min_sessions(corpus: DeviceCorpus, min: usize) -> Result<DeviceCorpus, DatasetError> {
    let devices: Vec<Device> = corpus
        .devices
        .into_iter()
        .filter(|d| d.sessions.len() > min)
        .collect();
    if devices.is_empty() {
        return Err(DatasetError::EmptyCorpus { min });
    }
    Ok(DeviceCorpus { devices })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Splits `draw` items across groups of the given sizes in proportion to
/// size: floors first, leftovers to the largest fractional parts.
fn apportion(sizes: &[usize], draw: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut shares: Vec<usize> = sizes.iter().map(|&s| s * draw / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Remainders share the denominator `total`, so comparing numerators is exact.
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i] * draw % total));
    let missing = draw - shares.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        shares[i] += 1;
    }
    shares
}

fn holdout_size(n: usize) -> usize {
    (n * HOLDOUT_NUM).div_ceil(HOLDOUT_DEN)
}

/// Per-device train/validation/test sizes for a corpus with the given
/// per-device session counts.
pub fn allocate_split(counts: &[usize]) -> Vec<SplitCounts> {
    let total: usize = counts.iter().sum();
    let validation = apportion(counts, holdout_size(total));
    let remaining: Vec<usize> = counts.iter().zip(&validation).map(|(c, v)| c - v).collect();
    let test = apportion(&remaining, holdout_size(total - validation.iter().sum::<usize>()));
    counts
        .iter()
        .zip(validation.iter().zip(&test))
        .map(|(&c, (&validation, &test))| SplitCounts {
            train: c - validation - test,
            validation,
            test,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevicePools {
    pub name: String,
    pub kind: DeviceKind,
    pub train: Vec<PayloadVector>,
    pub validation: Vec<PayloadVector>,
    pub test: Vec<PayloadVector>,
}

impl DevicePools {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
        }
    }
}

/// Unlabeled per-device pools; the input to [`label_for_experiment`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSplit {
    pub seed: u64,
    pub devices: Vec<DevicePools>,
}

fn device_rng(seed: u64, device_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(device_index as u64);
    rng
}

/// Shuffled positions `0..n`, drawn from the device's own stream.
fn shuffled_positions(n: usize, seed: u64, device_index: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut device_rng(seed, device_index));
    idx
}

fn gather(sessions: &[PayloadVector], positions: &[usize]) -> Vec<PayloadVector> {
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&i| sessions[i].clone()).collect()
}

/// Stratified split. Pools keep the corpus order of their sessions.
pub fn split(corpus: &DeviceCorpus, seed: u64) -> DeviceSplit {
    let counts: Vec<usize> = corpus.devices.iter().map(|d| d.sessions.len()).collect();
    let plan = allocate_split(&counts);
    let devices = corpus
        .devices
        .iter()
        .zip(plan)
        .enumerate()
        .map(|(i, (device, sizes))| {
            let order = shuffled_positions(device.sessions.len(), seed, i);
            let (validation, rest) = order.split_at(sizes.validation);
            let (test, train) = rest.split_at(sizes.test);
            DevicePools {
                name: device.name.clone(),
                kind: device.kind,
                train: gather(&device.sessions, train),
                validation: gather(&device.sessions, validation),
                test: gather(&device.sessions, test),
            }
        })
        .collect();
    DeviceSplit { seed, devices }
}

/// The five identification scenarios.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// 1: every IoT device vs every non-IoT device.
    IotVsNonIot,
    /// 2: one IoT device vs the other IoT devices; non-IoT traffic left out.
    OneVsRestIot { target: String },
    /// 3: one IoT device vs all other traffic.
    OneVsAll { target: String },
    /// 4: one label per IoT device plus one shared non-IoT label.
    Multiclass,
    /// 5: multiclass over IoT devices with one device withheld as unknown.
    UnknownDetection { excluded: String },
}

impl Scheme {
    pub fn number(&self) -> u8 {
        match self {
            Scheme::IotVsNonIot => 1,
            Scheme::OneVsRestIot { .. } => 2,
            Scheme::OneVsAll { .. } => 3,
            Scheme::Multiclass => 4,
            Scheme::UnknownDetection { .. } => 5,
        }
    }

    /// The device singled out by schemes 2, 3 and 5.
    pub fn device(&self) -> Option<&str> {
        match self {
            Scheme::OneVsRestIot { target } | Scheme::OneVsAll { target } => Some(target),
            Scheme::UnknownDetection { excluded } => Some(excluded),
            _ => None,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(
            self,
            Scheme::IotVsNonIot | Scheme::OneVsRestIot { .. } | Scheme::OneVsAll { .. }
        )
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::IotVsNonIot => write!(f, "1 (IoT vs non-IoT)"),
            Scheme::OneVsRestIot { target } => write!(f, "2 ({target} vs other IoT)"),
            Scheme::OneVsAll { target } => write!(f, "3 ({target} vs all traffic)"),
            Scheme::Multiclass => write!(f, "4 (multiclass)"),
            Scheme::UnknownDetection { excluded } => write!(f, "5 (unknown: {excluded})"),
        }
    }
}

/// A scheme bound to a concrete label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentSpec {
    pub scheme: Scheme,
    /// Output neurons: 1 for the binary schemes, else the number of labels.
    pub output_width: usize,
    pub label_names: Vec<String>,
}

/// Labeled datasets for one scheme. For scheme 5 the withheld device's
/// validation and test pools are kept aside, unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub train: IdxDataset,
    pub validation: IdxDataset,
    pub test: IdxDataset,
    pub unknown_validation: Vec<PayloadVector>,
    pub unknown_test: Vec<PayloadVector>,
}

fn degenerate(scheme: &Scheme, reason: impl Into<String>) -> DatasetError {
    DatasetError::DegenerateLabels {
        scheme: scheme.to_string(),
        reason: reason.into(),
    }
}

/// Resolves the label for each device (`None` = left out of the scheme)
/// and the label names.
fn label_plan(devices: &[(&str, DeviceKind)], scheme: &Scheme) -> Result<(Vec<Option<u8>>, Vec<String>), DatasetError> {
    if let Some(name) = scheme.device() {
        match devices.iter().find(|(n, _)| *n == name) {
            None => return Err(DatasetError::UnknownDevice { name: name.to_string() }),
            Some((_, DeviceKind::NonIot)) => return Err(DatasetError::NotIot { name: name.to_string() }),
            Some(_) => {}
        }
    }
    let iot_count = devices.iter().filter(|(_, k)| *k == DeviceKind::Iot).count();
    let non_iot: Vec<&str> = devices
        .iter()
        .filter(|(_, k)| *k == DeviceKind::NonIot)
        .map(|(n, _)| *n)
        .collect();
    let non_iot_name = match non_iot.as_slice() {
        [single] => single.to_string(),
        _ => "Non-IoT devices".to_string(),
    };

    let plan: (Vec<Option<u8>>, Vec<String>) = match scheme {
        Scheme::IotVsNonIot => {
            if iot_count == 0 || non_iot.is_empty() {
                return Err(degenerate(scheme, "needs at least one IoT and one non-IoT device"));
            }
            let labels = devices
                .iter()
                .map(|(_, k)| Some(u8::from(*k == DeviceKind::Iot)))
                .collect();
            (labels, vec![non_iot_name, "IoT devices".to_string()])
        }
        Scheme::OneVsRestIot { target } => {
            if iot_count < 2 {
                return Err(degenerate(scheme, "needs at least two IoT devices"));
            }
            let labels = devices
                .iter()
                .map(|(n, k)| match k {
                    DeviceKind::NonIot => None,
                    DeviceKind::Iot => Some(u8::from(n == target)),
                })
                .collect();
            (labels, vec!["Other IoT devices".to_string(), target.clone()])
        }
        Scheme::OneVsAll { target } => {
            if devices.len() < 2 {
                return Err(degenerate(scheme, "needs at least two devices"));
            }
            let labels = devices.iter().map(|(n, _)| Some(u8::from(n == target))).collect();
            (labels, vec!["Other devices".to_string(), target.clone()])
        }
        Scheme::Multiclass => {
            if non_iot.is_empty() || iot_count == 0 {
                return Err(degenerate(scheme, "needs a non-IoT class and at least one IoT device"));
            }
            if iot_count > 255 {
                return Err(degenerate(scheme, "more than 255 IoT devices"));
            }
            let mut names = vec![non_iot_name];
            let mut labels = Vec::with_capacity(devices.len());
            for (n, k) in devices {
                match k {
                    DeviceKind::NonIot => labels.push(Some(0)),
                    DeviceKind::Iot => {
                        labels.push(Some(names.len() as u8));
                        names.push(n.to_string());
                    }
                }
            }
            (labels, names)
        }
        Scheme::UnknownDetection { excluded } => {
            if iot_count < 3 {
                return Err(degenerate(scheme, "needs at least two known IoT devices besides the withheld one"));
            }
            if iot_count > 257 {
                return Err(degenerate(scheme, "more than 256 known IoT devices"));
            }
            let mut names = Vec::new();
            let mut labels = Vec::with_capacity(devices.len());
            for (n, k) in devices {
                if *k == DeviceKind::Iot && n != excluded {
                    labels.push(Some(names.len() as u8));
                    names.push(n.to_string());
                } else {
                    labels.push(None);
                }
            }
            (labels, names)
        }
    };
    Ok(plan)
}

/// Applies a labeling scheme to split pools.
pub fn label_for_experiment(split: &DeviceSplit, scheme: &Scheme) -> Result<SplitDataset, DatasetError> {
    let devices: Vec<(&str, DeviceKind)> = split.devices.iter().map(|d| (d.name.as_str(), d.kind)).collect();
    let (labels, label_names) = label_plan(&devices, scheme)?;
    let output_width = if scheme.is_binary() { 1 } else { label_names.len() };

    let mut train = IdxDataset::new(label_names.clone());
    let mut validation = IdxDataset::new(label_names.clone());
    let mut test = IdxDataset::new(label_names.clone());
    let mut unknown_validation = Vec::new();
    let mut unknown_test = Vec::new();
    for (pools, label) in split.devices.iter().zip(&labels) {
        match label {
            Some(label) => {
                for (ds, pool) in [(&mut train, &pools.train), (&mut validation, &pools.validation), (&mut test, &pools.test)] {
                    for v in pool {
                        ds.push(v.clone(), *label);
                    }
                }
            }
            None => {
                if scheme.device() == Some(pools.name.as_str()) {
                    unknown_validation.extend(pools.validation.iter().cloned());
                    unknown_test.extend(pools.test.iter().cloned());
                }
            }
        }
    }
    if train.is_empty() {
        return Err(degenerate(scheme, "no training instances"));
    }
    Ok(SplitDataset {
        spec: ExperimentSpec {
            scheme: scheme.clone(),
            output_width,
            label_names,
        },
        seed: split.seed,
        train,
        validation,
        test,
        unknown_validation,
        unknown_test,
    })
}

impl SplitDataset {
    /// `key=value` lines describing the split.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("scheme".to_string(), self.spec.scheme.number().to_string()),
            ("scheme_description".to_string(), self.spec.scheme.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("output_width".to_string(), self.spec.output_width.to_string()),
            ("labels".to_string(), self.spec.label_names.len().to_string()),
        ];
        for (i, name) in self.spec.label_names.iter().enumerate() {
            out.push((format!("label.{i}"), name.clone()));
        }
        for (part, ds) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            out.push((format!("count.{part}"), ds.len().to_string()));
            for (i, c) in ds.class_counts().iter().enumerate() {
                out.push((format!("count.{part}.{i}"), c.to_string()));
            }
        }
        out.push(("count.unknown_validation".to_string(), self.unknown_validation.len().to_string()));
        out.push(("count.unknown_test".to_string(), self.unknown_test.len().to_string()));
        out
    }

    /// Writes `{train,validation,test}-{images-idx3,labels-idx1}-ubyte`, the
    /// withheld pools (scheme 5) and `split.manifest`.
    pub fn write_to(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (part, ds) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            write_idx(
                ds,
                &dir.join(format!("{part}-images-idx3-ubyte")),
                &dir.join(format!("{part}-labels-idx1-ubyte")),
            )?;
        }
        if matches!(self.spec.scheme, Scheme::UnknownDetection { .. }) {
            for (part, pool) in [("unknown-validation", &self.unknown_validation), ("unknown-test", &self.unknown_test)] {
                let ds = IdxDataset {
                    images: pool.clone(),
                    labels: vec![0; pool.len()],
                    label_names: vec!["Unknown".to_string()],
                };
                write_idx(
                    &ds,
                    &dir.join(format!("{part}-images-idx3-ubyte")),
                    &dir.join(format!("{part}-labels-idx1-ubyte")),
                )?;
            }
        }
        let path = dir.join("split.manifest");
        fs::write(&path, render_manifest(&self.manifest_entries()))
            .map_err(|source| DatasetError::Io { path, source })
    }
}

pub fn render_manifest(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Fold index for every session of every device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KFold {
    pub k: usize,
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
}

/// Stratified k-fold assignment. Within a device, sessions are dealt to
/// folds round-robin after a seeded shuffle; the starting fold rotates by
/// the running session count so fold sizes also balance across devices.
pub fn kfold_split(corpus: &DeviceCorpus, scheme: &Scheme, k: usize, seed: u64) -> Result<KFold, DatasetError> {
    if matches!(scheme, Scheme::UnknownDetection { .. }) {
        return Err(DatasetError::SchemeNotSupported {
            scheme: scheme.to_string(),
        });
    }
    if k < 2 {
        return Err(DatasetError::InvalidFoldCount { k });
    }
    let mut offset = 0usize;
    let assignments = corpus
        .devices
        .iter()
        .enumerate()
        .map(|(i, device)| {
            let order = shuffled_positions(device.sessions.len(), seed, i);
            let mut folds = vec![0usize; order.len()];
            for (rank, &pos) in order.iter().enumerate() {
                folds[pos] = (offset + rank) % k;
            }
            offset += order.len();
            folds
        })
        .collect();
    Ok(KFold { k, seed, assignments })
}

impl KFold {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.iter().flatten() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Pools for fold `fold`: the fold itself is both the validation and the
    /// test pool, everything else trains.
    pub fn pools(&self, corpus: &DeviceCorpus, fold: usize) -> DeviceSplit {
        let devices = corpus
            .devices
            .iter()
            .zip(&self.assignments)
            .map(|(device, folds)| {
                let (held, train): (Vec<_>, Vec<_>) = device
                    .sessions
                    .iter()
                    .zip(folds)
                    .partition(|(_, &f)| f == fold);
                let held: Vec<PayloadVector> = held.into_iter().map(|(v, _)| v.clone()).collect();
                DevicePools {
                    name: device.name.clone(),
                    kind: device.kind,
                    train: train.into_iter().map(|(v, _)| v.clone()).collect(),
                    validation: held.clone(),
                    test: held,
                }
            })
            .collect();
        DeviceSplit {
            seed: self.seed,
            devices,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Device name, kind and session total as published for the reference corpus.
    pub(crate) const REFERENCE_DEVICES: [(&str, DeviceKind, usize); 10] = [
        ("Non-IoT devices", DeviceKind::NonIot, 24_735),
        ("Samsung SmartCam", DeviceKind::Iot, 9_029),
        ("Withings Aura smart sleep sensor", DeviceKind::Iot, 3_584),
        ("Insteon camera", DeviceKind::Iot, 4_055),
        ("Amazon Echo", DeviceKind::Iot, 3_407),
        ("Netatmo weather station", DeviceKind::Iot, 2_338),
        ("Netatmo Welcome", DeviceKind::Iot, 2_688),
        ("Pix-Star photo frame", DeviceKind::Iot, 1_118),
        ("Belkin Wemo light switch", DeviceKind::Iot, 7_031),
        ("Belkin Wemo motion sensor", DeviceKind::Iot, 38_518),
    ];

    fn vector(tag: u32) -> PayloadVector {
        let mut b = [0u8; 784];
        b[..4].copy_from_slice(&tag.to_be_bytes());
        b[4] = 1;
        PayloadVector::from_array(b)
    }

    fn corpus(spec: &[(&str, DeviceKind, usize)]) -> DeviceCorpus {
        let mut tag = 0u32;
        DeviceCorpus {
            devices: spec
                .iter()
                .map(|&(name, kind, n)| Device {
                    name: name.to_string(),
                    kind,
                    sessions: (0..n)
                        .map(|_| {
                            tag += 1;
                            vector(tag)
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn reference_table_counts() {
        // (train, validation, test) per device, in REFERENCE_DEVICES order.
        let expected = [
            (20_035, 2_474, 2_226),
            (7_313, 903, 813),
            (2_903, 358, 323),
            (3_285, 405, 365),
            (2_759, 341, 307),
            (1_894, 234, 210),
            (2_177, 269, 242),
            (906, 112, 100),
            (5_695, 703, 633),
            (31_199, 3_852, 3_467),
        ];
        let counts: Vec<usize> = REFERENCE_DEVICES.iter().map(|d| d.2).collect();
        let plan = allocate_split(&counts);
        for ((name, _, _), (got, want)) in REFERENCE_DEVICES.iter().zip(plan.iter().zip(expected)) {
            assert_eq!((got.train, got.validation, got.test), want, "{name}");
        }
    }

    #[test]
    fn single_device_split() {
        let plan = allocate_split(&[9_029]);
        assert_eq!(plan[0], SplitCounts { train: 7_313, validation: 903, test: 813 });
    }

    #[test]
    fn filter_is_strict() {
        let c = corpus(&[("a", DeviceKind::Iot, 1000), ("b", DeviceKind::Iot, 1001)]);
        let kept = filter_min_sessions(c.clone(), 1000).unwrap();
        assert_eq!(kept.devices.len(), 1);
        assert_eq!(kept.devices[0].name, "b");
        assert_eq!(filter_min_sessions(c.clone(), 0).unwrap(), c);
        assert!(matches!(filter_min_sessions(c, 5000), Err(DatasetError::EmptyCorpus { min: 5000 })));
    }

    #[test]
    fn pix_star_survives_filter() {
        let c = corpus(&[("Pix-Star photo frame", DeviceKind::Iot, 1_118)]);
        assert_eq!(filter_min_sessions(c, DEFAULT_MIN_SESSIONS).unwrap().devices.len(), 1);
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let c = corpus(&[("n", DeviceKind::NonIot, 137), ("a", DeviceKind::Iot, 55), ("b", DeviceKind::Iot, 9)]);
        let s = split(&c, 42);
        assert_eq!(s, split(&c, 42));
        assert_ne!(s, split(&c, 43));
        for (pools, device) in s.devices.iter().zip(&c.devices) {
            let mut all: Vec<&PayloadVector> = pools.train.iter().chain(&pools.validation).chain(&pools.test).collect();
            assert_eq!(all.len(), device.sessions.len());
            all.sort_by(|x, y| x.as_ref().cmp(y.as_ref()));
            all.dedup();
            assert_eq!(all.len(), device.sessions.len());
        }
    }

    #[test]
    fn scheme_one_on_reference_counts() {
        let c = corpus(&REFERENCE_DEVICES);
        let s = split(&c, 1);
        let ds = label_for_experiment(&s, &Scheme::IotVsNonIot).unwrap();
        assert_eq!(ds.spec.output_width, 1);
        assert_eq!(ds.test.class_counts(), vec![2_226, 6_460]);
    }

    #[test]
    fn scheme_four_uses_table_order() {
        let c = corpus(&REFERENCE_DEVICES);
        let ds = label_for_experiment(&split(&c, 1), &Scheme::Multiclass).unwrap();
        assert_eq!(ds.spec.output_width, 10);
        assert_eq!(ds.spec.label_names[1], "Samsung SmartCam");
        assert_eq!(
            ds.test.class_counts(),
            vec![2_226, 813, 323, 365, 307, 210, 242, 100, 633, 3_467]
        );
    }

    #[test]
    fn scheme_two_three_five_labels() {
        let c = corpus(&[
            ("pc", DeviceKind::NonIot, 40),
            ("cam", DeviceKind::Iot, 30),
            ("plug", DeviceKind::Iot, 20),
            ("hub", DeviceKind::Iot, 10),
        ]);
        let s = split(&c, 3);
        let two = label_for_experiment(&s, &Scheme::OneVsRestIot { target: "plug".into() }).unwrap();
        assert_eq!(two.train.len() + two.validation.len() + two.test.len(), 60);
        assert_eq!(two.train.class_counts()[1] + two.validation.class_counts()[1] + two.test.class_counts()[1], 20);

        let three = label_for_experiment(&s, &Scheme::OneVsAll { target: "plug".into() }).unwrap();
        assert_eq!(three.train.len() + three.validation.len() + three.test.len(), 100);

        let five = label_for_experiment(&s, &Scheme::UnknownDetection { excluded: "cam".into() }).unwrap();
        assert_eq!(five.spec.output_width, 2);
        assert_eq!(five.spec.label_names, vec!["plug".to_string(), "hub".to_string()]);
        assert_eq!(five.unknown_validation.len(), s.devices[1].validation.len());
        assert_eq!(five.unknown_test.len(), s.devices[1].test.len());
        assert_eq!(five.train.len() + five.validation.len() + five.test.len(), 30);
    }

    #[test]
    fn reference_scheme_five_has_eight_outputs() {
        let c = corpus(&REFERENCE_DEVICES);
        let ds = label_for_experiment(&split(&c, 1), &Scheme::UnknownDetection { excluded: "Insteon camera".into() }).unwrap();
        assert_eq!(ds.spec.output_width, 8);
        assert_eq!(ds.unknown_test.len(), 365);
    }

    #[test]
    fn labeling_errors() {
        let c = corpus(&[("pc", DeviceKind::NonIot, 20), ("cam", DeviceKind::Iot, 20)]);
        let s = split(&c, 0);
        assert!(matches!(
            label_for_experiment(&s, &Scheme::OneVsAll { target: "NoSuchDevice".into() }),
            Err(DatasetError::UnknownDevice { .. })
        ));
        assert!(matches!(
            label_for_experiment(&s, &Scheme::OneVsRestIot { target: "cam".into() }),
            Err(DatasetError::DegenerateLabels { .. })
        ));
        assert!(matches!(
            label_for_experiment(&s, &Scheme::OneVsAll { target: "pc".into() }),
            Err(DatasetError::NotIot { .. })
        ));
    }

    #[test]
    fn kfold_examples() {
        let c = corpus(&[("a", DeviceKind::Iot, 100)]);
        let kf = kfold_split(&c, &Scheme::Multiclass, 5, 9).unwrap();
        assert_eq!(kf.fold_sizes(), vec![20; 5]);
        assert!(matches!(
            kfold_split(&c, &Scheme::UnknownDetection { excluded: "a".into() }, 5, 9),
            Err(DatasetError::SchemeNotSupported { .. })
        ));
        assert!(matches!(kfold_split(&c, &Scheme::Multiclass, 1, 9), Err(DatasetError::InvalidFoldCount { k: 1 })));
    }

    #[test]
    fn kfold_pools_partition() {
        let c = corpus(&[("n", DeviceKind::NonIot, 23), ("a", DeviceKind::Iot, 17)]);
        let kf = kfold_split(&c, &Scheme::IotVsNonIot, 4, 1).unwrap();
        let sizes = kf.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut held = 0;
        for fold in 0..4 {
            let pools = kf.pools(&c, fold);
            for (p, d) in pools.devices.iter().zip(&c.devices) {
                assert_eq!(p.train.len() + p.test.len(), d.sessions.len());
                held += p.test.len();
            }
        }
        assert_eq!(held, c.total_sessions());
    }

    proptest! {
        #[test]
        fn allocation_partitions_and_is_proportional(counts in proptest::collection::vec(0usize..5_000, 1..12)) {
            let plan = allocate_split(&counts);
            let total: usize = counts.iter().sum();
            let val: usize = plan.iter().map(|p| p.validation).sum();
            let test: usize = plan.iter().map(|p| p.test).sum();
            prop_assert_eq!(val, total.div_ceil(10));
            prop_assert_eq!(test, (total - val).div_ceil(10));
            for (p, &c) in plan.iter().zip(&counts) {
                prop_assert_eq!(p.total(), c);
                // Within one session of the exact proportional share.
                let exact_v = c as f64 * val as f64 / total.max(1) as f64;
                prop_assert!((p.validation as f64 - exact_v).abs() < 1.0 + 1e-9);
                let rem = (total - val) as f64;
                let exact_t = if rem > 0.0 { (c - p.validation) as f64 * test as f64 / rem } else { 0.0 };
                prop_assert!((p.test as f64 - exact_t).abs() < 1.0 + 1e-9);
            }
        }
    }
}
