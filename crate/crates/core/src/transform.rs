//! Session payload → fixed-size byte image, and the MNIST-style IDX codec.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::capture::SessionRecord;

pub const IMAGE_SIDE: usize = 28;
pub const VECTOR_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("cannot build a payload vector from an empty payload")]
    EmptyPayload,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: dimension field {field} is {found}, expected {expected}")]
    DimensionMismatch {
        path: PathBuf,
        field: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: u32, labels: u32 },
    #[error("{path}: header announces {expected} data bytes but file holds {found}")]
    ShortData { path: PathBuf, expected: u64, found: u64 },
    #[error("label {label} at index {index} has no name (only {names} names)")]
    LabelOutOfRange { index: usize, label: u8, names: usize },
    #[error("{path}:{line}: malformed label map line {text:?}")]
    BadLabelMap { path: PathBuf, line: usize, text: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TransformError + '_ {
    move |source| TransformError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Exactly 784 bytes: a session payload truncated or zero padded.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PayloadVector(Box<[u8; VECTOR_LEN]>);

impl PayloadVector {
    pub fn zeroed() -> Self {
        PayloadVector(Box::new([0u8; VECTOR_LEN]))
    }

    pub fn from_array(bytes: [u8; VECTOR_LEN]) -> Self {
        PayloadVector(Box::new(bytes))
    }

    /// `None` unless `bytes` is exactly 784 long.
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        let arr: [u8; VECTOR_LEN] = bytes.try_into().ok()?;
        Some(Self::from_array(arr))
    }

    pub fn as_bytes(&self) -> &[u8; VECTOR_LEN] {
        &self.0
    }

    /// Pixel intensities scaled into [0, 1].
    pub fn scaled(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&b| b as f64 / 255.0)
    }
}

impl AsRef<[u8]> for PayloadVector {
    fn as_ref(&self) -> &[u8] {
        &self.0[..]
    }
}

impl fmt::Debug for PayloadVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let used = VECTOR_LEN - self.0.iter().rev().take_while(|&&b| b == 0).count();
        write!(f, "PayloadVector({used} significant bytes)")
    }
}

/// 28×28 grayscale view of a [`PayloadVector`], row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadImage {
    pub pixels: [[u8; IMAGE_SIDE]; IMAGE_SIDE],
}

/// Which packets of a session contribute payload bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// Both directions, interleaved in capture order.
    #[default]
    Both,
    /// Only packets sent by the endpoint that sent the first packet.
    InitiatorOnly,
}

/// Concatenates the TCP payloads of a session in capture order.
pub fn extract_payload(session: &SessionRecord, direction: Direction) -> Vec<u8> {
    let initiator = session.initiator();
    session
        .packets
        .iter()
        .filter(|p| match direction {
            Direction::Both => true,
            Direction::InitiatorOnly => Some(p.source()) == initiator,
        })
        .flat_map(|p| p.tcp_payload.iter().copied())
        .collect()
}

/// Drops empty payloads and byte-identical repeats, keeping first occurrences
/// in their original order.
pub fn dedupe_and_filter(payloads: Vec<Vec<u8>>) -> Vec<Vec<u8>> {
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(payloads.len());
    payloads
        .into_iter()
        .filter(|p| !p.is_empty() && seen.insert(p.clone()))
        .collect()
}

/// Truncates to the first 784 bytes or pads with 0x00 up to 784.
pub fn fix_length(payload: &[u8]) -> Result<PayloadVector, TransformError> {
    if payload.is_empty() {
        return Err(TransformError::EmptyPayload);
    }
    let mut out = [0u8; VECTOR_LEN];
    let n = payload.len().min(VECTOR_LEN);
    out[..n].copy_from_slice(&payload[..n]);
    Ok(PayloadVector::from_array(out))
}

pub fn to_image(v: &PayloadVector) -> PayloadImage {
    let mut pixels = [[0u8; IMAGE_SIDE]; IMAGE_SIDE];
    for (row, chunk) in pixels.iter_mut().zip(v.as_bytes().chunks_exact(IMAGE_SIDE)) {
        row.copy_from_slice(chunk);
    }
    PayloadImage { pixels }
}

pub fn from_image(img: &PayloadImage) -> PayloadVector {
    let mut out = [0u8; VECTOR_LEN];
    for (chunk, row) in out.chunks_exact_mut(IMAGE_SIDE).zip(img.pixels.iter()) {
        chunk.copy_from_slice(row);
    }
    PayloadVector::from_array(out)
}

/// Images with one-byte labels and a name for every label value.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdxDataset {
    pub images: Vec<PayloadVector>,
    pub labels: Vec<u8>,
    pub label_names: Vec<String>,
}

impl IdxDataset {
    pub fn new(label_names: Vec<String>) -> Self {
        IdxDataset {
            images: Vec::new(),
            labels: Vec::new(),
            label_names,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: PayloadVector, label: u8) {
        self.images.push(image);
        self.labels.push(label);
    }

    /// Checks count agreement and that every label has a name.
    pub fn validate(&self) -> Result<(), TransformError> {
        if self.images.len() != self.labels.len() {
            return Err(TransformError::CountMismatch {
                images: self.images.len() as u32,
                labels: self.labels.len() as u32,
            });
        }
        if let Some((index, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.label_names.len())
        {
            return Err(TransformError::LabelOutOfRange {
                index,
                label,
                names: self.label_names.len(),
            });
        }
        Ok(())
    }

    /// Instances per label value.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.label_names.len()];
        for &l in &self.labels {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        counts
    }
}

/// Sidecar path for the label-name map: `<label_path>.names`.
pub fn label_names_path(label_path: &Path) -> PathBuf {
    let mut s = label_path.as_os_str().to_owned();
    s.push(".names");
    PathBuf::from(s)
}

pub fn encode_idx_images(images: &[PayloadVector]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * VECTOR_LEN);
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img.as_ref());
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes the image file, the label file and the `index<TAB>name` sidecar
/// next to the label file.
pub fn write_idx(ds: &IdxDataset, image_path: &Path, label_path: &Path) -> Result<(), TransformError> {
    ds.validate()?;
    write_file(image_path, &encode_idx_images(&ds.images))?;
    write_file(label_path, &encode_idx_labels(&ds.labels))?;
    write_label_names(&label_names_path(label_path), &ds.label_names)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TransformError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_label_names(path: &Path, names: &[String]) -> Result<(), TransformError> {
    let mut text = String::new();
    for (i, name) in names.iter().enumerate() {
        text.push_str(&format!("{i}\t{name}\n"));
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_label_names(path: &Path) -> Result<Vec<String>, TransformError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut names = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || TransformError::BadLabelMap {
            path: path.to_path_buf(),
            line: n + 1,
            text: line.to_string(),
        };
        let (idx, name) = line.split_once('\t').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        if idx != names.len() {
            return Err(bad());
        }
        names.push(name.to_string());
    }
    Ok(names)
}

fn read_be_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32, TransformError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err(path))?;
    Ok(u32::from_be_bytes(b))
}

fn expect_magic<R: Read>(r: &mut R, path: &Path, expected: u32) -> Result<(), TransformError> {
    let found = read_be_u32(r, path)?;
    if found != expected {
        return Err(TransformError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn read_body<R: Read>(r: &mut R, path: &Path, expected: u64) -> Result<Vec<u8>, TransformError> {
    let mut data = Vec::with_capacity(expected as usize);
    r.take(expected).read_to_end(&mut data).map_err(io_err(path))?;
    if (data.len() as u64) < expected {
        return Err(TransformError::ShortData {
            path: path.to_path_buf(),
            expected,
            found: data.len() as u64,
        });
    }
    Ok(data)
}

pub fn read_idx_images(path: &Path) -> Result<Vec<PayloadVector>, TransformError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    expect_magic(&mut r, path, IDX_IMAGE_MAGIC)?;
    let count = read_be_u32(&mut r, path)?;
    for field in ["rows", "columns"] {
        let found = read_be_u32(&mut r, path)?;
        if found != IMAGE_SIDE as u32 {
            return Err(TransformError::DimensionMismatch {
                path: path.to_path_buf(),
                field,
                found,
                expected: IMAGE_SIDE as u32,
            });
        }
    }
    let data = read_body(&mut r, path, count as u64 * VECTOR_LEN as u64)?;
    Ok(data
        .chunks_exact(VECTOR_LEN)
        .map(|c| PayloadVector::from_slice(c).expect("chunk is 784 bytes"))
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, TransformError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    expect_magic(&mut r, path, IDX_LABEL_MAGIC)?;
    let count = read_be_u32(&mut r, path)?;
    read_body(&mut r, path, count as u64)
}

/// Reads an image/label pair. Label names come from the sidecar when it
/// exists; otherwise they default to the decimal label values.
pub fn read_idx(image_path: &Path, label_path: &Path) -> Result<IdxDataset, TransformError> {
    let images = read_idx_images(image_path)?;
    let labels = read_idx_labels(label_path)?;
    if images.len() != labels.len() {
        return Err(TransformError::CountMismatch {
            images: images.len() as u32,
            labels: labels.len() as u32,
        });
    }
    let names_path = label_names_path(label_path);
    let label_names = if names_path.exists() {
        read_label_names(&names_path)?
    } else {
        let max = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        (0..max).map(|i| i.to_string()).collect()
    };
    let ds = IdxDataset {
        images,
        labels,
        label_names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Raw `.bin` dump of one session payload (no header).
pub fn write_bin(path: &Path, payload: &[u8]) -> Result<(), TransformError> {
    fs::write(path, payload).map_err(io_err(path))
}
