//! Binary dataset files and CSV export.
//!
//! Layout, little-endian: magic `TCLDS001`, then `u32` sample count, dim,
//! class count and domain id, then per sample an `i32` label followed by
//! `dim` `f32` values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Dataset, Sample};

const MAGIC: &[u8; 8] = b"TCLDS001";
const MAGIC_STEM: &[u8; 5] = b"TCLDS";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0:?}")]
    Version(String),
    #[error("dataset file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing {0} bytes after last record")]
    Trailing(usize),
    #[error("sample {index} has dim {got}, dataset dim is {dim}")]
    DimMismatch { index: usize, got: usize, dim: usize },
    #[error("sample {index} has label {label} outside 0..{classes}")]
    BadLabel { index: usize, label: i32, classes: usize },
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::with_capacity(24 + data.len() * (4 + 4 * data.dim));
    out.extend_from_slice(MAGIC);
    for v in [data.len(), data.dim, data.classes, data.domain_id as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (index, s) in data.samples.iter().enumerate() {
        if s.x.len() != data.dim {
            return Err(DatasetError::DimMismatch { index, got: s.x.len(), dim: data.dim });
        }
        out.extend_from_slice(&s.label.to_le_bytes());
        for v in &s.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    if bytes.len() < 8 || &bytes[..5] != MAGIC_STEM {
        return Err(DatasetError::BadMagic);
    }
    if &bytes[..8] != MAGIC {
        return Err(DatasetError::Version(String::from_utf8_lossy(&bytes[5..8]).into_owned()));
    }
    if bytes.len() < 24 {
        return Err(DatasetError::Truncated { expected: 24, found: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, dim, classes, domain_id) = (word(0), word(1), word(2), word(3) as u32);
    let record = 4 + 4 * dim;
    let expected = 24 + n * record;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DatasetError::Trailing(bytes.len() - expected));
    }
    let mut samples = Vec::with_capacity(n);
    for (index, rec) in bytes[24..].chunks_exact(record).enumerate() {
        let label = i32::from_le_bytes(rec[..4].try_into().unwrap());
        if label < super::UNLABELED || (label >= 0 && label as usize >= classes) {
            return Err(DatasetError::BadLabel { index, label, classes });
        }
        let x = rec[4..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        samples.push(Sample { domain_id, x, label });
    }
    Ok(Dataset { domain_id, dim, classes, samples })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), DatasetError> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

/// `label,x0,...,x{dim-1}` with one row per sample.
pub fn to_csv(data: &Dataset) -> String {
    let mut out = String::from("label");
    for j in 0..data.dim {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for s in &data.samples {
        let _ = write!(out, "{}", s.label);
        for v in &s.x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
