//! On-disk interchange formats.
//!
//! # EMB1 snapshots
//!
//! A fixed little-endian binary layout for embedding matrices; text formats
//! would be impractical at the 10⁸-element sizes the scaling benchmark
//! pushes through.
//!
//! ```text
//!   offset  size             field
//!   0       4                magic, the ASCII bytes "EMB1"
//!   4       4                version, u32 LE, currently 1
//!   8       4                rows, u32 LE
//!   12      4                cols, u32 LE
//!   16      rows·cols·8      payload, f64 LE, column-major
//! ```
//!
//! The payload length must match exactly; short files, trailing bytes,
//! foreign magics, and unknown versions are each distinct errors and never
//! produce a partial matrix.
//!
//! # Checkpoint manifests
//!
//! A JSON document mapping datapoints to per-checkpoint EMB1 vector files
//! (one rows×1 snapshot per (checkpoint, datapoint)), loaded into
//! [`CheckpointSeries`] values for the sensitivity pipeline. Paths are
//! resolved relative to the manifest's directory.

use crate::linalg::{DenseMatrix, LinalgError, Vector};
use crate::sensitivity::{CheckpointSeries, SensitivityError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: [u8; 4] = *b"EMB1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"EMB1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported snapshot version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error("truncated snapshot: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data after payload: expected {expected} bytes, got {actual}")]
    TrailingData { expected: usize, actual: usize },
    #[error("snapshot declares {rows}x{cols}, which overflows")]
    DimensionOverflow { rows: u32, cols: u32 },
    #[error("snapshot payload rejected: {0}")]
    InvalidPayload(#[from] LinalgError),
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("manifest entry {datapoint}/{index}: {problem}")]
    ManifestEntry {
        datapoint: String,
        index: u64,
        problem: String,
    },
    #[error("manifest: {0}")]
    ManifestInvalid(#[from] SensitivityError),
}

/// Write a matrix as an EMB1 snapshot.
pub fn write_snapshot(path: &Path, matrix: &DenseMatrix) -> Result<(), SnapshotError> {
    let io_err = |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.data().len() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
    for v in matrix.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

/// Read an EMB1 snapshot, validating the layout bit for bit.
pub fn read_snapshot(path: &Path) -> Result<DenseMatrix, SnapshotError> {
    let io_err = |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    parse_snapshot(&bytes)
}

/// Parse EMB1 bytes (separated from I/O so tests can corrupt at will).
pub fn parse_snapshot(bytes: &[u8]) -> Result<DenseMatrix, SnapshotError> {
    if bytes.len() < HEADER_LEN {
        return Err(SnapshotError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(SnapshotError::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let count = (rows as usize)
        .checked_mul(cols as usize)
        .ok_or(SnapshotError::DimensionOverflow { rows, cols })?;
    let expected = HEADER_LEN + count * 8;
    if bytes.len() < expected {
        return Err(SnapshotError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(SnapshotError::TrailingData {
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DenseMatrix::new(rows as usize, cols as usize, data)?)
}

/// One tracked datapoint in a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDatapoint {
    pub id: String,
    pub checkpoints: Vec<ManifestCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCheckpoint {
    pub index: u64,
    /// EMB1 vector file, relative to the manifest location.
    pub path: String,
}

/// Manifest of per-checkpoint sentence-embedding snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub datapoints: Vec<ManifestDatapoint>,
}

impl CheckpointManifest {
    pub fn from_json(json: &str) -> Result<Self, SnapshotError> {
        serde_json::from_str(json).map_err(|e| SnapshotError::ManifestParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        let text = fs::read_to_string(path).map_err(|source| SnapshotError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Resolve every referenced snapshot against `base_dir`, validating
    /// existence, shape (single-column vectors), strictly increasing
    /// checkpoint indices, and consistent embedding dimension.
    pub fn load_series(&self, base_dir: &Path) -> Result<Vec<CheckpointSeries>, SnapshotError> {
        if self.datapoints.is_empty() {
            return Err(SnapshotError::ManifestParse(
                "manifest lists no datapoints".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.datapoints.len());
        for dp in &self.datapoints {
            let mut checkpoints = Vec::with_capacity(dp.checkpoints.len());
            for cp in &dp.checkpoints {
                let full = base_dir.join(&cp.path);
                let matrix = read_snapshot(&full).map_err(|e| SnapshotError::ManifestEntry {
                    datapoint: dp.id.clone(),
                    index: cp.index,
                    problem: e.to_string(),
                })?;
                if matrix.cols() != 1 {
                    return Err(SnapshotError::ManifestEntry {
                        datapoint: dp.id.clone(),
                        index: cp.index,
                        problem: format!(
                            "expected a rows x 1 vector snapshot, got {}x{}",
                            matrix.rows(),
                            matrix.cols()
                        ),
                    });
                }
                let vector = Vector::new(matrix.column(0).to_vec()).map_err(|e| {
                    SnapshotError::ManifestEntry {
                        datapoint: dp.id.clone(),
                        index: cp.index,
                        problem: e.to_string(),
                    }
                })?;
                checkpoints.push((cp.index, vector));
            }
            out.push(CheckpointSeries::new(dp.id.clone(), checkpoints)?);
        }
        Ok(out)
    }
}
