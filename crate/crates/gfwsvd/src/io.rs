//! Bit-exact persistence of tensors, gradient sets, and experiment reports.
//!
//! The `.gft` container is deliberately rigid: magic `GFT1`, a one-byte
//! dtype code (only 0 = f64), a one-byte rank (only 2), two little-endian
//! u64 dimensions, then the row-major little-endian f64 payload. One dtype,
//! one layout, so numeric comparisons downstream never go through text.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Tensor;

pub const GFT_MAGIC: [u8; 4] = *b"GFT1";
pub const GFT_DTYPE_F64: u8 = 0;
pub const GFT_RANK_MATRIX: u8 = 2;
/// Header size in bytes: magic + dtype + rank + two u64 dims.
pub const GFT_HEADER_LEN: u64 = 22;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}", expected = GFT_MAGIC)]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported tensor rank {0}")]
    UnsupportedRank(u8),
    #[error("payload truncated: header promises {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },
    #[error("non-finite entry {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("tensor dimensions {rows}x{cols} overflow")]
    Overflow { rows: u64, cols: u64 },
    #[error("gradient set entry {index} has dims {got:?}, expected {expected:?}")]
    DimMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("gradient set must hold at least one batch")]
    EmptySet,
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_finite(t: &Tensor) -> Result<(), IoError> {
    for (index, &value) in t.iter().enumerate() {
        if !value.is_finite() {
            return Err(IoError::NonFinite { index, value });
        }
    }
    Ok(())
}

/// Write a tensor to a `.gft` file.
pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), IoError> {
    check_finite(t)?;
    let (rows, cols) = t.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&GFT_MAGIC)?;
    w.write_all(&[GFT_DTYPE_F64, GFT_RANK_MATRIX])?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for i in 0..rows {
        for j in 0..cols {
            w.write_all(&t[[i, j]].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Exact inverse of [`write_tensor`]; rejects any file whose payload length
/// disagrees with the header dims.
pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != GFT_MAGIC {
        return Err(IoError::BadMagic { found: magic });
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    if byte[0] != GFT_DTYPE_F64 {
        return Err(IoError::UnsupportedDtype(byte[0]));
    }
    r.read_exact(&mut byte)?;
    if byte[0] != GFT_RANK_MATRIX {
        return Err(IoError::UnsupportedRank(byte[0]));
    }
    let mut dim = [0u8; 8];
    r.read_exact(&mut dim)?;
    let rows_u64 = u64::from_le_bytes(dim);
    r.read_exact(&mut dim)?;
    let cols_u64 = u64::from_le_bytes(dim);

    let entries = rows_u64
        .checked_mul(cols_u64)
        .filter(|&e| usize::try_from(e).is_ok())
        .ok_or(IoError::Overflow {
            rows: rows_u64,
            cols: cols_u64,
        })? as usize;
    let expected = GFT_HEADER_LEN + 8 * entries as u64;
    if file_len < expected {
        return Err(IoError::TruncatedPayload {
            expected,
            actual: file_len,
        });
    }
    if file_len > expected {
        return Err(IoError::TrailingBytes {
            extra: file_len - expected,
        });
    }

    let rows = rows_u64 as usize;
    let cols = cols_u64 as usize;
    let mut data = Vec::with_capacity(entries);
    let mut buf = [0u8; 8];
    for index in 0..entries {
        r.read_exact(&mut buf)?;
        let value = f64::from_le_bytes(buf);
        if !value.is_finite() {
            return Err(IoError::NonFinite { index, value });
        }
        data.push(value);
    }
    Tensor::from_shape_vec((rows, cols), data)
        .map_err(|e| IoError::Manifest(format!("shape error: {e}")))
}

/// Directory manifest for an ordered collection of equally shaped gradient
/// batches, one `.gft` file per batch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GradientSetManifest {
    pub n: usize,
    pub m: usize,
    pub count: usize,
    pub entries: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write a gradient set: `manifest.json` plus one tensor file per batch.
pub fn write_gradient_set(batches: &[Tensor], dir: &Path) -> Result<GradientSetManifest, IoError> {
    if batches.is_empty() {
        return Err(IoError::EmptySet);
    }
    let (n, m) = batches[0].dim();
    for (index, b) in batches.iter().enumerate() {
        if b.dim() != (n, m) {
            return Err(IoError::DimMismatch {
                index,
                got: b.dim(),
                expected: (n, m),
            });
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(batches.len());
    for (index, b) in batches.iter().enumerate() {
        let name = format!("g_{index:05}.gft");
        write_tensor(b, &dir.join(&name))?;
        entries.push(name);
    }
    let manifest = GradientSetManifest {
        n,
        m,
        count: batches.len(),
        entries,
    };
    write_json_canonical(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<GradientSetManifest, IoError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: GradientSetManifest = serde_json::from_str(&text)?;
    if manifest.count == 0 {
        return Err(IoError::EmptySet);
    }
    if manifest.entries.len() != manifest.count {
        return Err(IoError::Manifest(format!(
            "count {} disagrees with {} entries",
            manifest.count,
            manifest.entries.len()
        )));
    }
    Ok(manifest)
}

/// Load every batch of a gradient set, validating dims against the
/// manifest. Batches can also be streamed one at a time through
/// [`read_gradient_entry`].
pub fn read_gradient_set(dir: &Path) -> Result<(GradientSetManifest, Vec<Tensor>), IoError> {
    let manifest = read_manifest(dir)?;
    let mut batches = Vec::with_capacity(manifest.count);
    for index in 0..manifest.count {
        batches.push(read_gradient_entry(dir, &manifest, index)?);
    }
    Ok((manifest, batches))
}

pub fn read_gradient_entry(
    dir: &Path,
    manifest: &GradientSetManifest,
    index: usize,
) -> Result<Tensor, IoError> {
    let name = manifest
        .entries
        .get(index)
        .ok_or_else(|| IoError::Manifest(format!("entry index {index} out of range")))?;
    let t = read_tensor(&dir.join(name))?;
    if t.dim() != (manifest.n, manifest.m) {
        return Err(IoError::DimMismatch {
            index,
            got: t.dim(),
            expected: (manifest.n, manifest.m),
        });
    }
    Ok(t)
}

/// One evaluated (layer, method, rank) cell of a report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRecord {
    pub layer: String,
    pub method: String,
    pub rank: usize,
    pub retention: f64,
    pub weighted_error: f64,
    pub exact_increase: Option<f64>,
    pub delta_loss: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Full report document: metadata plus per-cell records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub records: Vec<ReportRecord>,
}

/// Serialize any value as canonical JSON (object keys sorted) to a file.
pub fn write_json_canonical<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    // Round-tripping through Value sorts object keys: serde_json's default
    // map is a BTreeMap.
    let v = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_report_json(report: &Report, path: &Path) -> Result<(), IoError> {
    write_json_canonical(report, path)
}

pub fn read_report_json(path: &Path) -> Result<Report, IoError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub const REPORT_CSV_HEADER: &str =
    "method,rank,retention,weighted_error,exact_increase,delta_loss,accuracy";

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// CSV flavor of a report: fixed header, one row per record, empty cells
/// for metrics that were not computed.
pub fn write_report_csv(records: &[ReportRecord], path: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.method,
            r.rank,
            r.retention,
            r.weighted_error,
            csv_opt(r.exact_increase),
            csv_opt(r.delta_loss),
            csv_opt(r.accuracy)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience: resolve the conventional artifact names inside a directory.
pub fn artifact_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
