//! Line format for hashes published by a continuous-integration builder.
//!
//! Each non-blank line not starting with `#` reads
//! `<drv_path> <output_path> sha256:<hex>` with single-space separators.

use thiserror::Error;

use crate::hash::OutputHash;
use crate::store_path::{DrvId, StorePath};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CiEntry {
    pub drv_id: DrvId,
    pub output_path: StorePath,
    pub output_hash: OutputHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CiLineError {
    #[error("missing field")]
    MissingField,
    #[error("unexpected extra field")]
    ExtraField,
    #[error("empty field (fields must be separated by single spaces)")]
    EmptyField,
    #[error("bad drv path: {0}")]
    DrvPath(String),
    #[error("bad output path: {0}")]
    OutputPath(String),
    #[error("bad output hash: {0}")]
    OutputHash(String),
}

/// Parses one line. Blank lines and comments yield `Ok(None)`.
pub fn parse_ci_line(line: &str, store_prefix: &str) -> Result<Option<CiEntry>, CiLineError> {
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.iter().any(|f| f.is_empty()) {
        return Err(CiLineError::EmptyField);
    }
    let [drv, out, hash] = fields[..] else {
        return Err(if fields.len() < 3 {
            CiLineError::MissingField
        } else {
            CiLineError::ExtraField
        });
    };
    Ok(Some(CiEntry {
        drv_id: DrvId::parse(drv, store_prefix).map_err(|e| CiLineError::DrvPath(e.to_string()))?,
        output_path: StorePath::parse(out, store_prefix)
            .map_err(|e| CiLineError::OutputPath(e.to_string()))?,
        output_hash: OutputHash::parse(hash).map_err(|e| CiLineError::OutputHash(e.to_string()))?,
    }))
}
