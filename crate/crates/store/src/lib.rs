//! Persistence for the aggregation server.
//!
//! [`Storage`] is the interface the server programs against; [`SqliteStore`]
//! is the embedded single-file backend. Attestation rows are append-only and
//! their uniqueness key `(drv_path, output_path, user_id, output_hash)` is a
//! database constraint, so racing duplicate inserts resolve inside the engine.

mod schema;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use lila_core::report::{ReportDefinition, Snapshot};
use lila_core::{Attestation, AttestationRecord, DrvId, OutputHash, PublicKey, Signature, StorePath};
use rand::RngCore as _;
use rusqlite::{params, Connection, OptionalExtension, Row, TransactionBehavior};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq as _;
use thiserror::Error;

pub use schema::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("user {0:?} is already registered with a different public key")]
    KeyConflict(String),
    #[error("corrupt row: {0}")]
    Corrupt(String),
    #[error("cannot open database {path}: {source}")]
    Open {
        path: PathBuf,
        source: rusqlite::Error,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct User {
    pub user_id: String,
    pub public_key: PublicKey,
    pub created_at: DateTime<Utc>,
}

/// A freshly minted token. `bearer` is shown once and never stored.
#[derive(Debug, Clone)]
pub struct IssuedToken {
    pub token_id: String,
    pub user_id: String,
    pub bearer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inserted {
    pub attestation: Attestation,
    pub created: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OutputPage {
    pub after_id: Option<u64>,
    pub limit: Option<usize>,
}

pub trait Storage: Send + Sync {
    /// Registers `key` under its name. Re-registering the same key is a no-op;
    /// a different key for an existing name is rejected.
    fn upsert_user(&self, key: &PublicKey) -> Result<User>;
    fn get_user(&self, user_id: &str) -> Result<Option<User>>;
    fn list_users(&self) -> Result<Vec<User>>;

    fn create_token(&self, user_id: &str) -> Result<IssuedToken>;
    /// Returns the user bound to `bearer`, if it is a valid token.
    fn verify_token(&self, bearer: &str) -> Result<Option<String>>;

    /// Inserts one verified record for `user_id`. On a uniqueness collision
    /// the existing row is returned with `created == false`.
    fn insert_attestation(
        &self,
        record: &AttestationRecord,
        user_id: &str,
        received_at: DateTime<Utc>,
    ) -> Result<Inserted>;

    /// Same as [`Storage::insert_attestation`] for many records in one
    /// transaction.
    fn insert_attestations(
        &self,
        records: &[AttestationRecord],
        user_id: &str,
        received_at: DateTime<Utc>,
    ) -> Result<Vec<Inserted>>;

    /// Attestations for one output path ordered by `(received_at, id)`.
    fn query_by_output(&self, output_path: &StorePath, page: OutputPage) -> Result<Vec<Attestation>>;
    fn query_by_drv(&self, drv_hash: &str) -> Result<Vec<Attestation>>;
    /// Distinct derivations ordered by `(drv_hash, drv_path)`, starting
    /// strictly after the `after` digest.
    fn list_drvs(&self, after: Option<&str>, limit: usize) -> Result<Vec<DrvId>>;
    fn count_attestations(&self) -> Result<u64>;
    /// All users and attestations, read in a single transaction.
    fn snapshot(&self) -> Result<Snapshot>;

    fn put_report(&self, defn: &ReportDefinition) -> Result<()>;
    fn list_reports(&self) -> Result<Vec<ReportDefinition>>;
    fn get_report(&self, name: &str) -> Result<Option<ReportDefinition>>;
}

pub struct SqliteStore {
    path: PathBuf,
    writer: Mutex<Connection>,
    readers: Mutex<Vec<Connection>>,
}

const ATTESTATION_COLUMNS: &str =
    "id, drv_path, output_path, user_id, output_hash, output_sig, received_at";

fn to_timestamp(t: DateTime<Utc>) -> i64 {
    t.timestamp()
}

fn from_timestamp(secs: i64) -> Result<DateTime<Utc>> {
    DateTime::from_timestamp(secs, 0).ok_or_else(|| StoreError::Corrupt(format!("timestamp {secs}")))
}

fn corrupt(e: impl std::fmt::Display) -> StoreError {
    StoreError::Corrupt(e.to_string())
}

fn attestation_from_row(row: &Row<'_>) -> rusqlite::Result<RawAttestation> {
    Ok(RawAttestation {
        id: row.get(0)?,
        drv_path: row.get(1)?,
        output_path: row.get(2)?,
        user_id: row.get(3)?,
        output_hash: row.get(4)?,
        output_sig: row.get(5)?,
        received_at: row.get(6)?,
    })
}

struct RawAttestation {
    id: i64,
    drv_path: String,
    output_path: String,
    user_id: String,
    output_hash: String,
    output_sig: String,
    received_at: i64,
}

impl RawAttestation {
    fn parse(self) -> Result<Attestation> {
        Ok(Attestation {
            id: u64::try_from(self.id).map_err(corrupt)?,
            output_path: StorePath::parse_any(&self.output_path).map_err(corrupt)?,
            user_id: self.user_id,
            drv_id: DrvId::parse_any(&self.drv_path).map_err(corrupt)?,
            output_hash: OutputHash::parse(&self.output_hash).map_err(corrupt)?,
            output_sig: Signature::parse(&self.output_sig).map_err(corrupt)?,
            received_at: from_timestamp(self.received_at)?,
        })
    }
}

fn collect_attestations(
    stmt: &mut rusqlite::Statement<'_>,
    params: impl rusqlite::Params,
) -> Result<Vec<Attestation>> {
    stmt.query_map(params, attestation_from_row)?
        .map(|r| r?.parse())
        .collect()
}

fn user_from_row(row: &Row<'_>) -> rusqlite::Result<(String, String, i64)> {
    Ok((row.get(0)?, row.get(1)?, row.get(2)?))
}

fn parse_user((user_id, key, created): (String, String, i64)) -> Result<User> {
    Ok(User {
        public_key: PublicKey::parse(&key).map_err(corrupt)?,
        user_id,
        created_at: from_timestamp(created)?,
    })
}

fn hash_secret(salt: &[u8], secret: &str) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(secret.as_bytes());
    h.finalize().to_vec()
}

fn insert_one(
    tx: &rusqlite::Transaction<'_>,
    record: &AttestationRecord,
    user_id: &str,
    received_at: i64,
) -> Result<Inserted> {
    let drv_path = record.drv_id.to_string();
    let output_path = record.output_path.to_string();
    let output_hash = record.output_hash.to_string();
    let changed = tx
        .prepare_cached(
            "INSERT INTO attestations
                 (drv_path, drv_hash, output_path, user_id, output_hash, output_sig, received_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)
             ON CONFLICT (drv_path, output_path, user_id, output_hash) DO NOTHING",
        )?
        .execute(params![
            drv_path,
            record.drv_id.drv_hash(),
            output_path,
            user_id,
            output_hash,
            record.output_sig.to_string(),
            received_at,
        ])
        .map_err(|e| match e {
            rusqlite::Error::SqliteFailure(f, _)
                if f.extended_code == rusqlite::ffi::SQLITE_CONSTRAINT_FOREIGNKEY =>
            {
                StoreError::UnknownUser(user_id.to_owned())
            }
            e => e.into(),
        })?;
    let mut stmt = tx.prepare_cached(&format!(
        "SELECT {ATTESTATION_COLUMNS} FROM attestations
         WHERE drv_path = ?1 AND output_path = ?2 AND user_id = ?3 AND output_hash = ?4"
    ))?;
    let attestation = stmt
        .query_row(
            params![drv_path, output_path, user_id, output_hash],
            attestation_from_row,
        )?
        .parse()?;
    Ok(Inserted {
        attestation,
        created: changed == 1,
    })
}

impl SqliteStore {
    /// Opens (creating if needed) the database at `path` and applies pending
    /// schema migrations.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let open_err = |source| StoreError::Open {
            path: path.clone(),
            source,
        };
        let mut conn = Connection::open(&path).map_err(open_err)?;
        schema::configure(&conn).map_err(open_err)?;
        schema::migrate(&mut conn).map_err(open_err)?;
        Ok(SqliteStore {
            path,
            writer: Mutex::new(conn),
            readers: Mutex::new(Vec::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn schema_version(&self) -> Result<u32> {
        self.read(|c| {
            Ok(c.query_row("SELECT MAX(version) FROM schema_version", [], |r| r.get(0))?)
        })
    }

    fn write<T>(&self, f: impl FnOnce(&rusqlite::Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&rusqlite::Transaction<'_>) -> Result<T>) -> Result<T> {
        let pooled = self.readers.lock().unwrap_or_else(|e| e.into_inner()).pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => {
                let c = Connection::open(&self.path)?;
                schema::configure(&c)?;
                c
            }
        };
        let out = (|| {
            let tx = conn.transaction_with_behavior(TransactionBehavior::Deferred)?;
            let out = f(&tx)?;
            tx.commit()?;
            Ok(out)
        })();
        self.readers
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(conn);
        out
    }
}

impl Storage for SqliteStore {
    fn upsert_user(&self, key: &PublicKey) -> Result<User> {
        let rendered = key.to_string();
        let row = self.write(|tx| {
            tx.execute(
                "INSERT INTO users (user_id, public_key, created_at) VALUES (?1, ?2, ?3)
                 ON CONFLICT (user_id) DO NOTHING",
                params![key.name(), rendered, to_timestamp(Utc::now())],
            )?;
            Ok(tx.query_row(
                "SELECT user_id, public_key, created_at FROM users WHERE user_id = ?1",
                [key.name()],
                user_from_row,
            )?)
        })?;
        let user = parse_user(row)?;
        if user.public_key != *key {
            return Err(StoreError::KeyConflict(key.name().to_owned()));
        }
        Ok(user)
    }

    fn get_user(&self, user_id: &str) -> Result<Option<User>> {
        self.read(|tx| {
            tx.query_row(
                "SELECT user_id, public_key, created_at FROM users WHERE user_id = ?1",
                [user_id],
                user_from_row,
            )
            .optional()?
            .map(parse_user)
            .transpose()
        })
    }

    fn list_users(&self) -> Result<Vec<User>> {
        self.read(|tx| {
            let mut stmt =
                tx.prepare("SELECT user_id, public_key, created_at FROM users ORDER BY user_id")?;
            let rows = stmt.query_map([], user_from_row)?;
            rows.map(|r| parse_user(r?)).collect()
        })
    }

    fn create_token(&self, user_id: &str) -> Result<IssuedToken> {
        let mut rng = rand::rngs::OsRng;
        let mut id = [0u8; 8];
        let mut secret = [0u8; 32];
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut id);
        rng.fill_bytes(&mut secret);
        rng.fill_bytes(&mut salt);
        let token_id = hex::encode(id);
        let secret = hex::encode(secret);
        let digest = hash_secret(&salt, &secret);
        self.write(|tx| {
            let known: bool = tx.query_row(
                "SELECT EXISTS(SELECT 1 FROM users WHERE user_id = ?1)",
                [user_id],
                |r| r.get(0),
            )?;
            if !known {
                return Err(StoreError::UnknownUser(user_id.to_owned()));
            }
            tx.execute(
                "INSERT INTO tokens (token_id, salt, secret_hash, user_id, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
                params![token_id, &salt[..], digest, user_id, to_timestamp(Utc::now())],
            )?;
            Ok(())
        })?;
        Ok(IssuedToken {
            bearer: format!("{token_id}.{secret}"),
            token_id,
            user_id: user_id.to_owned(),
        })
    }

    fn verify_token(&self, bearer: &str) -> Result<Option<String>> {
        let Some((token_id, secret)) = bearer.split_once('.') else {
            return Ok(None);
        };
        let row: Option<(Vec<u8>, Vec<u8>, String)> = self.read(|tx| {
            Ok(tx
                .query_row(
                    "SELECT salt, secret_hash, user_id FROM tokens WHERE token_id = ?1",
                    [token_id],
                    |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
                )
                .optional()?)
        })?;
        Ok(row.and_then(|(salt, stored, user_id)| {
            let candidate = hash_secret(&salt, secret);
            bool::from(candidate.ct_eq(&stored)).then_some(user_id)
        }))
    }

    fn insert_attestation(
        &self,
        record: &AttestationRecord,
        user_id: &str,
        received_at: DateTime<Utc>,
    ) -> Result<Inserted> {
        self.write(|tx| insert_one(tx, record, user_id, to_timestamp(received_at)))
    }

    fn insert_attestations(
        &self,
        records: &[AttestationRecord],
        user_id: &str,
        received_at: DateTime<Utc>,
    ) -> Result<Vec<Inserted>> {
        let ts = to_timestamp(received_at);
        self.write(|tx| {
            records
                .iter()
                .map(|r| insert_one(tx, r, user_id, ts))
                .collect()
        })
    }

    fn query_by_output(&self, output_path: &StorePath, page: OutputPage) -> Result<Vec<Attestation>> {
        let limit = page.limit.map_or(-1, |l| l as i64);
        let path = output_path.to_string();
        self.read(|tx| match page.after_id {
            None => {
                let mut stmt = tx.prepare_cached(&format!(
                    "SELECT {ATTESTATION_COLUMNS} FROM attestations WHERE output_path = ?1
                     ORDER BY received_at, id LIMIT ?2"
                ))?;
                collect_attestations(&mut stmt, params![path, limit])
            }
            Some(after) => {
                let mut stmt = tx.prepare_cached(&format!(
                    "SELECT {ATTESTATION_COLUMNS} FROM attestations
                     WHERE output_path = ?1
                       AND (received_at, id) > (SELECT received_at, id FROM attestations WHERE id = ?2)
                     ORDER BY received_at, id LIMIT ?3"
                ))?;
                collect_attestations(&mut stmt, params![path, after as i64, limit])
            }
        })
    }

    fn query_by_drv(&self, drv_hash: &str) -> Result<Vec<Attestation>> {
        self.read(|tx| {
            let mut stmt = tx.prepare_cached(&format!(
                "SELECT {ATTESTATION_COLUMNS} FROM attestations WHERE drv_hash = ?1
                 ORDER BY received_at, id"
            ))?;
            collect_attestations(&mut stmt, [drv_hash])
        })
    }

    fn list_drvs(&self, after: Option<&str>, limit: usize) -> Result<Vec<DrvId>> {
        self.read(|tx| {
            let mut stmt = tx.prepare_cached(
                "SELECT DISTINCT drv_hash, drv_path FROM attestations WHERE drv_hash > ?1
                 ORDER BY drv_hash, drv_path LIMIT ?2",
            )?;
            let rows = stmt.query_map(params![after.unwrap_or(""), limit as i64], |r| {
                r.get::<_, String>(1)
            })?;
            rows.map(|r| DrvId::parse_any(&r?).map_err(corrupt)).collect()
        })
    }

    fn count_attestations(&self) -> Result<u64> {
        self.read(|tx| {
            Ok(tx.query_row("SELECT COUNT(*) FROM attestations", [], |r| r.get::<_, i64>(0))? as u64)
        })
    }

    fn snapshot(&self) -> Result<Snapshot> {
        self.read(|tx| {
            let users = {
                let mut stmt = tx.prepare("SELECT user_id FROM users")?;
                let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            let mut stmt = tx.prepare(&format!(
                "SELECT {ATTESTATION_COLUMNS} FROM attestations ORDER BY received_at, id"
            ))?;
            let attestations = collect_attestations(&mut stmt, [])?;
            Ok(Snapshot {
                users,
                attestations,
            })
        })
    }

    fn put_report(&self, defn: &ReportDefinition) -> Result<()> {
        self.write(|tx| {
            tx.execute(
                "INSERT INTO reports (name, definition_document) VALUES (?1, ?2)
                 ON CONFLICT (name) DO UPDATE SET definition_document = excluded.definition_document",
                params![defn.name, defn.to_toml()],
            )?;
            Ok(())
        })
    }

    fn list_reports(&self) -> Result<Vec<ReportDefinition>> {
        self.read(|tx| {
            let mut stmt = tx.prepare("SELECT definition_document FROM reports ORDER BY name")?;
            let docs = stmt.query_map([], |r| r.get::<_, String>(0))?;
            docs.map(|d| ReportDefinition::from_toml(&d?).map_err(corrupt))
                .collect()
        })
    }

    fn get_report(&self, name: &str) -> Result<Option<ReportDefinition>> {
        self.read(|tx| {
            tx.query_row(
                "SELECT definition_document FROM reports WHERE name = ?1",
                [name],
                |r| r.get::<_, String>(0),
            )
            .optional()?
            .map(|d| ReportDefinition::from_toml(&d).map_err(corrupt))
            .transpose()
        })
    }
}

/// Outcome of re-verifying every stored signature.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub checked: u64,
    pub violations: Vec<(u64, String)>,
}

/// Re-verifies every stored attestation against its submitter's registered key.
pub fn audit(store: &dyn Storage) -> Result<AuditReport> {
    let keys: std::collections::HashMap<String, PublicKey> = store
        .list_users()?
        .into_iter()
        .map(|u| (u.user_id, u.public_key))
        .collect();
    let snapshot = store.snapshot()?;
    let mut report = AuditReport::default();
    for a in &snapshot.attestations {
        report.checked += 1;
        let reason = match keys.get(&a.user_id) {
            None => Some("submitter has no registered key".to_owned()),
            Some(_) if a.output_sig.key_name() != a.user_id => {
                Some(format!("signed by {:?}", a.output_sig.key_name()))
            }
            Some(k) if !a.record().verifies_under(k) => Some("signature does not verify".into()),
            Some(_) => None,
        };
        if let Some(r) = reason {
            report.violations.push((a.id, r));
        }
    }
    Ok(report)
}
