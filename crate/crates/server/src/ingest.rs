//! Bulk import of hashes produced by a CI system.
//!
//! Each line becomes an attestation signed by the CI identity. Lines are
//! inserted in batches; a bad line is reported and skipped.

use std::io::BufRead;

use chrono::Utc;
use lila_core::ci::parse_ci_line;
use lila_core::{AttestationRecord, BuilderKey};
use lila_store::{Storage, StoreError};
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_BATCH: usize = 5_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("CI user {0:?} is not registered")]
    UnknownUser(String),
    #[error("the signing key does not match the registered key of {0:?}")]
    KeyMismatch(String),
    #[error("signing key for {0:?} has no secret part")]
    NoSecret(String),
    #[error("reading input: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    /// Valid lines, whether or not they were already stored.
    pub accepted: usize,
    /// Rows that did not exist before.
    pub created: usize,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

pub fn ingest_ci<R: BufRead>(
    store: &dyn Storage,
    input: R,
    key: &BuilderKey,
    store_prefix: &str,
    batch_size: usize,
) -> Result<IngestSummary, IngestError> {
    let user = key.name();
    let registered = store
        .get_user(user)?
        .ok_or_else(|| IngestError::UnknownUser(user.to_owned()))?;
    if registered.public_key != *key.public() {
        return Err(IngestError::KeyMismatch(user.to_owned()));
    }
    if !key.has_secret() {
        return Err(IngestError::NoSecret(user.to_owned()));
    }

    let mut summary = IngestSummary::default();
    let mut batch: Vec<AttestationRecord> = Vec::with_capacity(batch_size);
    let flush = |batch: &mut Vec<AttestationRecord>, summary: &mut IngestSummary| {
        if batch.is_empty() {
            return Ok::<_, IngestError>(());
        }
        let inserted = store.insert_attestations(batch, user, Utc::now())?;
        summary.accepted += inserted.len();
        summary.created += inserted.iter().filter(|i| i.created).count();
        batch.clear();
        Ok(())
    };

    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let entry = match parse_ci_line(&line, store_prefix) {
            Ok(Some(entry)) => entry,
            Ok(None) => continue,
            Err(e) => {
                summary.rejected.push(RejectedLine {
                    line: idx + 1,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let output_sig = key
            .sign(&entry.drv_id, &entry.output_path, &entry.output_hash)
            .map_err(|_| IngestError::NoSecret(user.to_owned()))?;
        batch.push(AttestationRecord {
            drv_id: entry.drv_id,
            output_path: entry.output_path,
            output_hash: entry.output_hash,
            output_sig,
        });
        if batch.len() >= batch_size.max(1) {
            flush(&mut batch, &mut summary)?;
        }
    }
    flush(&mut batch, &mut summary)?;
    Ok(summary)
}
