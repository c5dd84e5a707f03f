//! On-disk per-device corpora written by `preprocess`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use iotprint::dataset::{Device, DeviceCorpus, DeviceKind};
use iotprint::transform::{encode_idx_images, read_idx_images};

use crate::manifest::{load_verified, ManifestDevice, Verified, CORPUS_MANIFEST};

pub fn images_file(index: usize) -> String {
    format!("device-{index:02}-images-idx3-ubyte")
}

/// Writes one IDX image file per device and returns the manifest entries.
pub fn write_devices(dir: &Path, corpus: &DeviceCorpus, macs: &[Vec<String>]) -> Result<Vec<ManifestDevice>> {
    let mut out = Vec::with_capacity(corpus.devices.len());
    for (i, d) in corpus.devices.iter().enumerate() {
        let name = images_file(i);
        let path = dir.join(&name);
        fs::write(&path, encode_idx_images(&d.sessions)).with_context(|| format!("writing {}", path.display()))?;
        out.push(ManifestDevice {
            name: d.name.clone(),
            kind: d.kind.to_string(),
            macs: macs.get(i).cloned().unwrap_or_default(),
            sessions: d.sessions.len(),
            images: Some(name),
        });
    }
    Ok(out)
}

/// Loads a corpus after checking every file against its manifest.
pub fn load(dir: &Path) -> Result<(DeviceCorpus, Verified)> {
    let verified = load_verified(dir, CORPUS_MANIFEST, "corpus")?;
    let mut corpus = DeviceCorpus::default();
    for d in &verified.manifest.devices {
        let Some(file) = &d.images else {
            bail!("{}: device {:?} has no image file", verified.path.display(), d.name);
        };
        let kind: DeviceKind = d
            .kind
            .parse()
            .map_err(|e: String| anyhow::anyhow!("{}: {e}", verified.path.display()))?;
        let sessions = read_idx_images(&dir.join(file))?;
        if sessions.len() != d.sessions {
            bail!(
                "{}: manifest says {} sessions, file holds {}",
                dir.join(file).display(),
                d.sessions,
                sessions.len()
            );
        }
        corpus.devices.push(Device {
            name: d.name.clone(),
            kind,
            sessions,
        });
    }
    Ok((corpus, verified))
}
