//! Builder-side agent: turns a finished build into signed attestations and
//! delivers them, spooling to disk when the server cannot be reached.

mod config;
mod submit;

use std::path::Path;

use lila_core::archive::{hash_path, ArchiveError};
use lila_core::signing::KeyError;
use lila_core::store_path::MalformedStorePath;
use lila_core::{AttestationRecord, BuilderKey, DrvId, StorePath};
use thiserror::Error;

pub use config::ClientConfig;
pub use submit::{
    flush_spool, read_spool_file, spool_file_name, spool_record, submit_or_spool, FlushSummary,
    Outcome, SubmitSummary, Submitter,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("environment variable {0} is missing or empty")]
    MissingEnvVar(&'static str),
    #[error(transparent)]
    MalformedStorePath(#[from] MalformedStorePath),
    #[error("cannot hash {path}: {source}")]
    Hash { path: String, source: ArchiveError },
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("cannot read key file {path}: {source}")]
    KeyFile {
        path: String,
        source: std::io::Error,
    },
    #[error("attestation for {0} does not verify under the local public key")]
    SelfCheck(StorePath),
    #[error("configuration: {0}")]
    Config(String),
    #[error("spool directory {path}: {source}")]
    Spool {
        path: String,
        source: std::io::Error,
    },
}

/// What the package manager hands a post-build hook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookEnv {
    pub drv_path: DrvId,
    pub out_paths: Vec<StorePath>,
}

impl HookEnv {
    /// Reads `DRV_PATH` and the space-separated `OUT_PATHS`.
    pub fn from_vars(
        var: impl Fn(&str) -> Option<String>,
        store_prefix: &str,
    ) -> Result<Self, ClientError> {
        let drv = var("DRV_PATH")
            .filter(|v| !v.trim().is_empty())
            .ok_or(ClientError::MissingEnvVar("DRV_PATH"))?;
        let outs = var("OUT_PATHS").unwrap_or_default();
        let out_paths = outs
            .split_whitespace()
            .map(|p| StorePath::parse(p, store_prefix))
            .collect::<Result<Vec<_>, _>>()?;
        if out_paths.is_empty() {
            return Err(ClientError::MissingEnvVar("OUT_PATHS"));
        }
        Ok(HookEnv {
            drv_path: DrvId::parse(drv.trim(), store_prefix)?,
            out_paths,
        })
    }

    pub fn from_process_env(store_prefix: &str) -> Result<Self, ClientError> {
        Self::from_vars(|k| std::env::var(k).ok(), store_prefix)
    }
}

/// Reads a key file holding the rendered secret form.
pub fn load_key(path: &Path) -> Result<BuilderKey, ClientError> {
    let text = std::fs::read_to_string(path).map_err(|source| ClientError::KeyFile {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BuilderKey::parse_secret(text.trim())?)
}

/// Hashes and signs every output, in `OUT_PATHS` order. Any failure aborts
/// the whole batch so a build is never half attested.
pub fn build_attestations(
    env: &HookEnv,
    key: &BuilderKey,
) -> Result<Vec<AttestationRecord>, ClientError> {
    env.out_paths
        .iter()
        .map(|out| {
            let output_hash = hash_path(Path::new(&out.to_string())).map_err(|source| {
                ClientError::Hash {
                    path: out.to_string(),
                    source,
                }
            })?;
            let record = AttestationRecord {
                output_sig: key.sign(&env.drv_path, out, &output_hash)?,
                drv_id: env.drv_path.clone(),
                output_path: out.clone(),
                output_hash,
            };
            if !record.verifies_under(key.public()) {
                return Err(ClientError::SelfCheck(out.clone()));
            }
            Ok(record)
        })
        .collect()
}
