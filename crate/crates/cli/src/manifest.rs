//! Stage manifests. Each stage lists the files it wrote with their SHA-256
//! digests and records the digest of the manifest it consumed, so edits to
//! an intermediate file surface when the next stage loads it.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FIXTURES_MANIFEST: &str = "fixtures.manifest.json";
pub const CORPUS_MANIFEST: &str = "corpus.manifest.json";
pub const EXPERIMENT_MANIFEST: &str = "experiment.manifest.json";
pub const KFOLD_MANIFEST: &str = "kfold.manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentRef {
    pub stage: String,
    pub manifest: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestDevice {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub macs: Vec<String>,
    pub sessions: usize,
    /// Per-device IDX image file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stage: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ParentRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default)]
    pub devices: Vec<ManifestDevice>,
    /// Effective settings of the run.
    #[serde(default)]
    pub config: serde_json::Value,
    /// External inputs, paths as given on the command line.
    #[serde(default)]
    pub inputs: Vec<FileDigest>,
    /// Files written by the stage, paths relative to the manifest.
    #[serde(default)]
    pub outputs: Vec<FileDigest>,
}

impl PipelineManifest {
    pub fn new(stage: &str) -> Self {
        PipelineManifest {
            stage: stage.to_string(),
            tool_version: iotprint::VERSION.to_string(),
            parent: None,
            seed: None,
            scheme: None,
            devices: Vec::new(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records digests for files under `dir`, given relative to it.
    pub fn add_outputs<S: AsRef<str>>(&mut self, dir: &Path, files: &[S]) -> Result<()> {
        for f in files {
            let f = f.as_ref();
            let (sha256, bytes) = digest_file(&dir.join(f))?;
            self.outputs.push(FileDigest {
                path: f.to_string(),
                sha256,
                bytes,
            });
        }
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let (sha256, bytes) = digest_file(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
            bytes,
        });
        Ok(())
    }

    /// Writes `dir/name` and returns its digest.
    pub fn write(&self, dir: &Path, name: &str) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let path = dir.join(name);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

pub fn digest_file(path: &Path) -> Result<(String, u64)> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = match f.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

/// A manifest that has been checked against the files it lists.
#[derive(Debug, Clone)]
pub struct Verified {
    pub manifest: PipelineManifest,
    pub path: PathBuf,
    pub sha256: String,
}

impl Verified {
    pub fn as_parent(&self) -> ParentRef {
        ParentRef {
            stage: self.manifest.stage.clone(),
            manifest: self.path.display().to_string(),
            sha256: self.sha256.clone(),
        }
    }
}

/// Loads `dir/name`, checks the stage name and every listed output digest.
pub fn load_verified(dir: &Path, name: &str, stage: &str) -> Result<Verified> {
    let path = dir.join(name);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: PipelineManifest =
        serde_json::from_slice(&bytes).with_context(|| format!("{}: malformed manifest", path.display()))?;
    if manifest.stage != stage {
        bail!("{}: expected a {stage} manifest, found {}", path.display(), manifest.stage);
    }
    for out in &manifest.outputs {
        let file = dir.join(&out.path);
        let (sha, len) = digest_file(&file).with_context(|| format!("{} lists {}", path.display(), out.path))?;
        if sha != out.sha256 || len != out.bytes {
            bail!(
                "{}: digest mismatch (manifest {}, file {}); the file was modified after the {stage} stage",
                file.display(),
                &out.sha256[..12.min(out.sha256.len())],
                &sha[..12]
            );
        }
    }
    Ok(Verified {
        manifest,
        path,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}
