use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{MalformedHash, OutputHash};
use crate::signing::{KeyError, PublicKey, Signature};
use crate::store_path::{DrvId, MalformedStorePath, StorePath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReproStatus {
    Unknown,
    Unconfirmed,
    Reproducible,
    Nonreproducible,
}

impl ReproStatus {
    pub const ALL: [ReproStatus; 4] = [
        ReproStatus::Unknown,
        ReproStatus::Unconfirmed,
        ReproStatus::Reproducible,
        ReproStatus::Nonreproducible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReproStatus::Unknown => "unknown",
            ReproStatus::Unconfirmed => "unconfirmed",
            ReproStatus::Reproducible => "reproducible",
            ReproStatus::Nonreproducible => "nonreproducible",
        }
    }
}

impl fmt::Display for ReproStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A signed claim that `drv_id` produced `output_path` with content
/// `output_hash`. The signer is identified by `output_sig.key_name()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttestationRecord {
    pub drv_id: DrvId,
    pub output_path: StorePath,
    pub output_hash: OutputHash,
    pub output_sig: Signature,
}

impl AttestationRecord {
    pub fn verifies_under(&self, key: &PublicKey) -> bool {
        key.verify(
            &self.output_sig,
            &self.drv_id,
            &self.output_path,
            &self.output_hash,
        )
    }

    pub fn fingerprint(&self) -> Vec<u8> {
        crate::signing::fingerprint(&self.drv_id, &self.output_path, &self.output_hash)
    }

    pub fn to_submission(&self) -> SubmissionBody {
        SubmissionBody {
            output_path: self.output_path.to_string(),
            output_hash: self.output_hash.to_string(),
            output_sig: self.output_sig.to_string(),
            drv_path: self.drv_id.to_string(),
        }
    }
}

/// A stored attestation, as returned by the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub id: u64,
    pub output_path: StorePath,
    pub user_id: String,
    pub drv_id: DrvId,
    pub output_hash: OutputHash,
    pub output_sig: Signature,
    pub received_at: DateTime<Utc>,
}

impl Attestation {
    pub fn record(&self) -> AttestationRecord {
        AttestationRecord {
            drv_id: self.drv_id.clone(),
            output_path: self.output_path.clone(),
            output_hash: self.output_hash,
            output_sig: self.output_sig.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SubmissionError {
    #[error("invalid JSON body: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    StorePath(#[from] MalformedStorePath),
    #[error(transparent)]
    Hash(#[from] MalformedHash),
    #[error(transparent)]
    Signature(#[from] KeyError),
    #[error("{field} is outside the store prefix {prefix}")]
    WrongStore { field: &'static str, prefix: String },
}

/// Wire body of `POST /attestation/{drv_hash}` and of spool files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmissionBody {
    pub output_path: String,
    pub output_hash: String,
    pub output_sig: String,
    pub drv_path: String,
}

impl SubmissionBody {
    /// Strict JSON parse: unknown or missing members are errors.
    pub fn from_json(bytes: &[u8]) -> Result<Self, SubmissionError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// Validates every field, requiring both paths to live under `store_prefix`.
    pub fn validate(&self, store_prefix: &str) -> Result<AttestationRecord, SubmissionError> {
        let drv_id = DrvId::parse_any(&self.drv_path)?;
        let output_path = StorePath::parse_any(&self.output_path)?;
        for (field, path) in [("drv_path", drv_id.path()), ("output_path", &output_path)] {
            if !path.is_in_store(store_prefix) {
                return Err(SubmissionError::WrongStore {
                    field,
                    prefix: store_prefix.to_owned(),
                });
            }
        }
        Ok(AttestationRecord {
            drv_id,
            output_path,
            output_hash: OutputHash::parse(&self.output_hash)?,
            output_sig: Signature::parse(&self.output_sig)?,
        })
    }
}
