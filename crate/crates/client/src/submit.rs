use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime};

use lila_core::{AttestationRecord, SubmissionBody};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{ClientConfig, ClientError};

/// Result of one delivery attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Stored { created: bool },
    /// The server refused the record for good (4xx).
    Rejected { status: u16, message: String },
    /// Worth retrying later: network failure or 5xx.
    Transient(String),
}

pub struct Submitter {
    agent: ureq::Agent,
    config: ClientConfig,
}

impl Submitter {
    pub fn new(config: &ClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Submitter {
            agent,
            config: config.clone(),
        }
    }

    pub fn submit(&self, record: &AttestationRecord) -> Outcome {
        let url = self
            .config
            .endpoint(&format!("/attestation/{}", record.drv_id.drv_hash()));
        let mut req = self.agent.post(&url);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(record.to_submission()) {
            Ok(resp) => resp,
            Err(e) => return Outcome::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200 => Outcome::Stored { created: false },
            201 => Outcome::Stored { created: true },
            400..=499 => Outcome::Rejected {
                status,
                message: serde_json::from_str::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v["error"].as_str().map(str::to_owned))
                    .unwrap_or(body),
            },
            _ => Outcome::Transient(format!("server answered {status}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SubmitSummary {
    pub sent: usize,
    pub spooled: usize,
    pub rejected: usize,
}

/// Posts each record; transient failures go to the spool, permanent
/// rejections are logged and dropped.
pub fn submit_or_spool(
    records: &[AttestationRecord],
    config: &ClientConfig,
) -> Result<SubmitSummary, ClientError> {
    let submitter = Submitter::new(config);
    let mut summary = SubmitSummary::default();
    for record in records {
        match submitter.submit(record) {
            Outcome::Stored { .. } => summary.sent += 1,
            Outcome::Rejected { status, message } => {
                tracing::error!(output = %record.output_path, status, "server rejected attestation: {message}");
                summary.rejected += 1;
            }
            Outcome::Transient(reason) => {
                tracing::warn!(output = %record.output_path, "spooling attestation: {reason}");
                spool_record(&config.spool_dir, record)?;
                summary.spooled += 1;
            }
        }
    }
    Ok(summary)
}

/// Spool files are named after the fingerprint, so spooling the same record
/// twice leaves a single file.
pub fn spool_file_name(record: &AttestationRecord) -> String {
    format!("{}.json", hex::encode(Sha256::digest(record.fingerprint())))
}

fn spool_err(path: &Path) -> impl FnOnce(std::io::Error) -> ClientError + '_ {
    move |source| ClientError::Spool {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `record` into `dir` via a private temporary file and an atomic
/// rename, so concurrent hooks never observe partial files.
pub fn spool_record(dir: &Path, record: &AttestationRecord) -> Result<PathBuf, ClientError> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    fs::create_dir_all(dir).map_err(spool_err(dir))?;
    let target = dir.join(spool_file_name(record));
    let nanos = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    let tmp = dir.join(format!(
        ".tmp-{}-{nanos}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let body = serde_json::to_vec(&record.to_submission()).expect("submission bodies serialize");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
        fs::rename(&tmp, &target)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        spool_err(dir)(e)
    })?;
    Ok(target)
}

pub fn read_spool_file(path: &Path, store_prefix: &str) -> Result<AttestationRecord, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    SubmissionBody::from_json(&bytes)
        .and_then(|b| b.validate(store_prefix))
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlushSummary {
    pub sent: usize,
    pub rejected: usize,
    pub remaining: usize,
}

fn spooled_files(dir: &Path) -> Result<Vec<PathBuf>, ClientError> {
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(spool_err(dir)(e)),
    };
    let mut files: Vec<(SystemTime, PathBuf)> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| {
            let modified = fs::metadata(&p).and_then(|m| m.modified()).ok()?;
            Some((modified, p))
        })
        .collect();
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

/// Retries spooled records oldest first. Stops at the first transient failure
/// since the rest would most likely fail the same way.
pub fn flush_spool(config: &ClientConfig) -> Result<FlushSummary, ClientError> {
    let files = spooled_files(&config.spool_dir)?;
    let submitter = Submitter::new(config);
    let mut summary = FlushSummary::default();
    for (i, path) in files.iter().enumerate() {
        let record = match read_spool_file(path, &config.store_prefix) {
            Ok(r) => r,
            Err(_) if !path.exists() => continue, // flushed by a concurrent run
            Err(e) => {
                tracing::error!(path = %path.display(), "unreadable spool file left in place: {e}");
                summary.remaining += 1;
                continue;
            }
        };
        match submitter.submit(&record) {
            Outcome::Stored { .. } => summary.sent += 1,
            Outcome::Rejected { status, message } => {
                tracing::error!(path = %path.display(), status, "dropping rejected attestation: {message}");
                summary.rejected += 1;
            }
            Outcome::Transient(reason) => {
                tracing::warn!("server unavailable, keeping spool: {reason}");
                summary.remaining += files.len() - i;
                break;
            }
        }
        match fs::remove_file(path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(spool_err(path)(e)),
        }
    }
    Ok(summary)
}
