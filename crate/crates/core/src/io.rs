//! File formats for feature matrices, id sidecars and cluster assignments.
//!
//! A matrix file starts with its shape `(n, dim)` followed by `n · dim`
//! row-major values. The text form is a first line `n dim` and one row per
//! line; the binary form is two little-endian `u64` followed by little-endian
//! `f64`. Paths ending in `.bin` use the binary form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    Text,
    Binary,
}

impl MatrixFormat {
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => MatrixFormat::Binary,
            _ => MatrixFormat::Text,
        }
    }
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    let bytes = match MatrixFormat::for_path(path) {
        MatrixFormat::Text => {
            let mut out = format!("{} {dim}\n", rows.len());
            for row in rows {
                let line: Vec<String> = row.iter().map(f64::to_string).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
        MatrixFormat::Binary => {
            let mut out = Vec::with_capacity(16 + 8 * rows.len() * dim);
            out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
            out.extend_from_slice(&(dim as u64).to_le_bytes());
            for v in rows.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match MatrixFormat::for_path(path) {
        MatrixFormat::Text => parse_text_matrix(path, &bytes),
        MatrixFormat::Binary => parse_binary_matrix(path, &bytes),
    }
}

fn parse_text_matrix(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(path, e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, "missing header"))?;
    let shape: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, format!("bad header {header:?}")))?;
    let [n, dim] = shape[..] else {
        return Err(parse_err(path, format!("header {header:?} is not `n dim`")));
    };
    let mut rows = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("bad number on row {i}")))?;
        if row.len() != dim {
            return Err(parse_err(
                path,
                format!("row {i} has {} values, expected {dim}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(parse_err(
            path,
            format!("{} rows, header says {n}", rows.len()),
        ));
    }
    Ok(rows)
}

fn parse_binary_matrix(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 16 {
        return Err(parse_err(path, "truncated header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (n, dim) = (word(0) as usize, word(8) as usize);
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(parse_err(
            path,
            format!("{} bytes does not match shape ({n}, {dim})", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(values
        .chunks(dim.max(1))
        .take(n)
        .map(<[f64]>::to_vec)
        .collect())
}

/// One identifier per line.
pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    if let Some(bad) = ids.iter().find(|id| id.contains('\n')) {
        return Err(Error::DimensionMismatch(format!(
            "id {bad:?} contains a newline"
        )));
    }
    let mut text = ids.join("\n");
    if !ids.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub item_id: String,
    pub cluster_id: usize,
}

/// CSV with header `item_id,cluster_id`.
pub fn write_assignments(path: &Path, ids: &[String], assignment: &[usize]) -> Result<()> {
    if ids.len() != assignment.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} assignments",
            ids.len(),
            assignment.len()
        )));
    }
    let mut writer = csv::Writer::from_path(path)?;
    for (id, &k) in ids.iter().zip(assignment) {
        writer.serialize(AssignmentRow {
            item_id: id.clone(),
            cluster_id: k,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_assignments(path: &Path) -> Result<Vec<AssignmentRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?)
}
