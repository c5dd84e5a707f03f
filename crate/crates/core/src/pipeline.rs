//! Capture files → per-device payload vectors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use thiserror::Error;

use crate::capture::{group_by_mac, parse_pcap_file, split_sessions, CaptureError, MacAddr, SkipCounts};
use crate::dataset::{Device, DeviceCorpus, DeviceKind};
use crate::transform::{dedupe_and_filter, extract_payload, fix_length, write_bin, Direction, TransformError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no capture files to process")]
    EmptyCorpus,
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("{path}: {source}")]
    CaptureFile {
        path: PathBuf,
        #[source]
        source: CaptureError,
    },
    #[error("{path}:{line}: {reason}")]
    BadMacMap { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacEntry {
    pub mac: MacAddr,
    pub device: String,
    pub kind: DeviceKind,
}

/// MAC address → device assignment. Several MACs may share one device
/// name; device order is the order names first appear.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacMap {
    entries: Vec<MacEntry>,
}

impl MacMap {
    pub fn insert(&mut self, mac: MacAddr, device: &str, kind: DeviceKind) {
        self.entries.retain(|e| e.mac != mac);
        self.entries.push(MacEntry {
            mac,
            device: device.to_string(),
            kind,
        });
    }

    pub fn entries(&self) -> &[MacEntry] {
        &self.entries
    }

    /// Device names with their kind, in first-appearance order.
    pub fn devices(&self) -> Vec<(String, DeviceKind)> {
        let mut out: Vec<(String, DeviceKind)> = Vec::new();
        for e in &self.entries {
            if !out.iter().any(|(n, _)| *n == e.device) {
                out.push((e.device.clone(), e.kind));
            }
        }
        out
    }

    pub fn lookup(&self, mac: &MacAddr) -> Option<&MacEntry> {
        self.entries.iter().find(|e| e.mac == *mac)
    }

    /// Parses `MAC<TAB>device name<TAB>iot|non-iot` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self, PipelineError> {
        let mut map = MacMap::default();
        let mut kinds: HashMap<String, DeviceKind> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| PipelineError::BadMacMap {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let mac: MacAddr = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
            let kind: DeviceKind = fields[2].parse().map_err(bad)?;
            if fields[1].is_empty() {
                return Err(bad("empty device name".into()));
            }
            if let Some(prev) = kinds.insert(fields[1].to_string(), kind) {
                if prev != kind {
                    return Err(bad(format!("device {:?} listed as both {prev} and {kind}", fields[1])));
                }
            }
            if map.lookup(&mac).is_some() {
                return Err(bad(format!("MAC {mac} listed twice")));
            }
            map.insert(mac, fields[1], kind);
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# mac\tdevice\tkind\n");
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.mac, e.device, e.kind);
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessOptions {
    pub direction: Direction,
    /// When set, kept payloads are also written as raw `.bin` files under
    /// `<dir>/<device index>/`.
    pub dump_bins: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceStats {
    pub name: String,
    pub kind: DeviceKind,
    /// TCP sessions opened by the device's MACs.
    pub sessions: usize,
    pub empty: usize,
    pub duplicates: usize,
    /// Sessions left after dropping empty and duplicate payloads.
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub corpus: DeviceCorpus,
    pub stats: Vec<DeviceStats>,
    /// Sessions whose initiating MAC is not in the map.
    pub unmapped: Vec<(MacAddr, usize)>,
    pub skipped: SkipCounts,
    pub packets: u64,
    pub files: usize,
}

struct FileSessions {
    payloads: IndexMap<MacAddr, Vec<Vec<u8>>>,
    skipped: SkipCounts,
    packets: u64,
}

fn process_file(path: &Path, direction: Direction) -> Result<FileSessions, PipelineError> {
    let capture = parse_pcap_file(path).map_err(|source| match source {
        CaptureError::Io { .. } => PipelineError::Capture(source),
        source => PipelineError::CaptureFile {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let packets = capture.packets.len() as u64;
    let sessions = split_sessions(capture.packets);
    let payloads = group_by_mac(sessions.into_values())
        .into_iter()
        .map(|(mac, sessions)| (mac, sessions.iter().map(|s| extract_payload(s, direction)).collect()))
        .collect();
    Ok(FileSessions {
        payloads,
        skipped: capture.skipped,
        packets,
    })
}

/// Runs parse → sessions → MAC buckets → payload → dedupe → 784 bytes.
/// Files are parsed in parallel and merged in the order given.
pub fn preprocess(paths: &[PathBuf], map: &MacMap, opts: &PreprocessOptions) -> Result<Preprocessed, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let per_file: Vec<FileSessions> = paths
        .par_iter()
        .map(|p| process_file(p, opts.direction))
        .collect::<Result<_, _>>()?;

    let mut skipped = SkipCounts::default();
    let mut packets = 0;
    let mut by_mac: IndexMap<MacAddr, Vec<Vec<u8>>> = IndexMap::new();
    for file in per_file {
        skipped.merge(&file.skipped);
        packets += file.packets;
        for (mac, payloads) in file.payloads {
            by_mac.entry(mac).or_default().extend(payloads);
        }
    }

    let mut corpus = DeviceCorpus::default();
    let mut stats = Vec::new();
    for (index, (name, kind)) in map.devices().into_iter().enumerate() {
        let raw: Vec<Vec<u8>> = map
            .entries()
            .iter()
            .filter(|e| e.device == name)
            .flat_map(|e| by_mac.get(&e.mac).cloned().unwrap_or_default())
            .collect();
        let sessions = raw.len();
        let empty = raw.iter().filter(|p| p.is_empty()).count();
        let kept = dedupe_and_filter(raw);
        if let Some(dir) = &opts.dump_bins {
            let device_dir = dir.join(format!("{index:02}"));
            fs::create_dir_all(&device_dir).map_err(|source| PipelineError::Io {
                path: device_dir.clone(),
                source,
            })?;
            for (i, p) in kept.iter().enumerate() {
                write_bin(&device_dir.join(format!("{i:06}.bin")), p)?;
            }
        }
        let vectors = kept.iter().map(|p| fix_length(p)).collect::<Result<Vec<_>, _>>()?;
        stats.push(DeviceStats {
            name: name.clone(),
            kind,
            sessions,
            empty,
            duplicates: sessions - empty - kept.len(),
            kept: kept.len(),
        });
        corpus.devices.push(Device {
            name,
            kind,
            sessions: vectors,
        });
    }
    let unmapped = by_mac
        .iter()
        .filter(|(mac, _)| map.lookup(mac).is_none())
        .map(|(mac, p)| (*mac, p.len()))
        .collect();
    Ok(Preprocessed {
        corpus,
        stats,
        unmapped,
        skipped,
        packets,
        files: paths.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{write_fixtures, FixtureSpec};

    #[test]
    fn mac_map_parse() {
        let text = "# comment\n02:00:00:00:00:01\tLaptop\tnon-iot\n02:00:00:00:00:02\tCam\tiot # trailing\n02:00:00:00:00:03\tLaptop\tnon-iot\n";
        let map = MacMap::parse(text, Path::new("m")).unwrap();
        assert_eq!(map.entries().len(), 3);
        assert_eq!(
            map.devices(),
            vec![("Laptop".to_string(), DeviceKind::NonIot), ("Cam".to_string(), DeviceKind::Iot)]
        );
        assert_eq!(MacMap::parse(&map.render(), Path::new("m")).unwrap(), map);
    }

    #[test]
    fn mac_map_errors() {
        for bad in [
            "02:00:00:00:00:01 Laptop non-iot\n",
            "zz:00:00:00:00:01\tLaptop\tnon-iot\n",
            "02:00:00:00:00:01\tLaptop\ttoaster\n",
            "02:00:00:00:00:01\tA\tiot\n02:00:00:00:00:01\tB\tiot\n",
            "02:00:00:00:00:01\tA\tiot\n02:00:00:00:00:02\tA\tnon-iot\n",
        ] {
            assert!(matches!(MacMap::parse(bad, Path::new("m")), Err(PipelineError::BadMacMap { .. })), "{bad:?}");
        }
    }

    #[test]
    fn fixture_round_trip_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = FixtureSpec::desk_scale(11, 50);
        spec.devices.truncate(3);
        let out = write_fixtures(&spec, dir.path()).unwrap();
        let mut map = MacMap::load(&out.mac_map).unwrap();
        // A fourth device in the map with no traffic, and a device's MAC left out.
        map.insert("02:00:00:00:00:99".parse().unwrap(), "Silent", DeviceKind::Iot);
        let pre = preprocess(&out.pcaps, &map, &PreprocessOptions::default()).unwrap();
        let kept: Vec<usize> = pre.stats.iter().map(|s| s.kept).collect();
        assert_eq!(kept, vec![50, 50, 50, 0]);
        assert!(pre.unmapped.is_empty());
        assert_eq!(pre.corpus.devices[1].sessions.len(), 50);
        assert_eq!(pre.skipped.udp, 15);

        let mut partial = MacMap::default();
        let first = &map.entries()[0];
        partial.insert(first.mac, &first.device, first.kind);
        let pre = preprocess(&out.pcaps, &partial, &PreprocessOptions::default()).unwrap();
        assert_eq!(pre.unmapped.len(), 2);
        assert!(pre.unmapped.iter().all(|(_, n)| *n == 50));
    }

    #[test]
    fn no_files_is_empty_corpus() {
        assert!(matches!(
            preprocess(&[], &MacMap::default(), &PreprocessOptions::default()),
            Err(PipelineError::EmptyCorpus)
        ));
    }
}
