use rusqlite::{Connection, OptionalExtension};

/// Applied in order; the schema version is the number of applied entries.
const MIGRATIONS: &[&str] = &[r#"
CREATE TABLE users (
    user_id     TEXT PRIMARY KEY,
    public_key  TEXT NOT NULL,
    created_at  INTEGER NOT NULL
);

CREATE TABLE tokens (
    token_id    TEXT PRIMARY KEY,
    salt        BLOB NOT NULL,
    secret_hash BLOB NOT NULL,
    user_id     TEXT NOT NULL REFERENCES users(user_id),
    created_at  INTEGER NOT NULL
);

CREATE TABLE attestations (
    id          INTEGER PRIMARY KEY AUTOINCREMENT,
    drv_path    TEXT NOT NULL,
    drv_hash    TEXT NOT NULL,
    output_path TEXT NOT NULL,
    user_id     TEXT NOT NULL REFERENCES users(user_id),
    output_hash TEXT NOT NULL,
    output_sig  TEXT NOT NULL,
    received_at INTEGER NOT NULL,
    UNIQUE (drv_path, output_path, user_id, output_hash)
);

CREATE INDEX attestations_drv_hash ON attestations(drv_hash);
CREATE INDEX attestations_output_path ON attestations(output_path, received_at, id);

CREATE TRIGGER attestations_no_update BEFORE UPDATE ON attestations
BEGIN
    SELECT RAISE(ABORT, 'attestations are append-only');
END;

CREATE TRIGGER attestations_no_delete BEFORE DELETE ON attestations
BEGIN
    SELECT RAISE(ABORT, 'attestations are append-only');
END;

CREATE TABLE reports (
    name                TEXT PRIMARY KEY,
    definition_document TEXT NOT NULL
);
"#];

pub const SCHEMA_VERSION: u32 = MIGRATIONS.len() as u32;

pub fn configure(conn: &Connection) -> rusqlite::Result<()> {
    conn.busy_timeout(std::time::Duration::from_secs(30))?;
    conn.pragma_update(None, "journal_mode", "WAL")?;
    conn.pragma_update(None, "synchronous", "FULL")?;
    conn.pragma_update(None, "foreign_keys", "ON")?;
    Ok(())
}

pub fn migrate(conn: &mut Connection) -> rusqlite::Result<u32> {
    let tx = conn.transaction_with_behavior(rusqlite::TransactionBehavior::Immediate)?;
    tx.execute_batch("CREATE TABLE IF NOT EXISTS schema_version (version INTEGER NOT NULL)")?;
    let current: u32 = tx
        .query_row("SELECT MAX(version) FROM schema_version", [], |r| {
            r.get::<_, Option<u32>>(0)
        })
        .optional()?
        .flatten()
        .unwrap_or(0);
    for (i, sql) in MIGRATIONS.iter().enumerate().skip(current as usize) {
        tracing::info!(version = i + 1, "applying schema migration");
        tx.execute_batch(sql)?;
        tx.execute("INSERT INTO schema_version (version) VALUES (?1)", [i as u32 + 1])?;
    }
    tx.commit()?;
    Ok(current.max(SCHEMA_VERSION))
}
