use std::sync::{Arc, Barrier};
use std::thread;

use chrono::{TimeZone, Utc};
use lila_core::signing::keygen;
use lila_core::{AttestationRecord, BuilderKey, DrvId, OutputHash, StorePath};
use lila_store::{audit, OutputPage, SqliteStore, Storage, StoreError, SCHEMA_VERSION};

fn digest(seed: u32) -> String {
    const ALPHABET: &[u8] = b"0123456789abcdfghijklmnpqrsvwxyz";
    let mut x = seed as u64 * 2_654_435_761 + 12345;
    (0..32)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ALPHABET[(x >> 59) as usize] as char
        })
        .collect()
}

fn drv(seed: u32, name: &str) -> DrvId {
    DrvId::parse_any(&format!("/nix/store/{}-{name}.drv", digest(seed))).unwrap()
}

fn out(seed: u32, name: &str) -> StorePath {
    StorePath::parse_any(&format!("/nix/store/{}-{name}", digest(seed + 1_000_000))).unwrap()
}

fn record(key: &BuilderKey, d: &DrvId, o: &StorePath, content: &str) -> AttestationRecord {
    let h = OutputHash::digest(content);
    AttestationRecord {
        output_sig: key.sign(d, o, &h).unwrap(),
        drv_id: d.clone(),
        output_path: o.clone(),
        output_hash: h,
    }
}

fn open() -> (tempfile::TempDir, SqliteStore) {
    let dir = tempfile::tempdir().unwrap();
    let store = SqliteStore::open(dir.path().join("lila.db")).unwrap();
    (dir, store)
}

#[test]
fn migrations_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lila.db");
    drop(SqliteStore::open(&path).unwrap());
    let store = SqliteStore::open(&path).unwrap();
    assert_eq!(store.schema_version().unwrap(), SCHEMA_VERSION);
}

#[test]
fn user_registration_rejects_a_second_key_for_the_same_name() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    let imposter = keygen("alice", Some([2; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    store.upsert_user(a.public()).unwrap();
    assert!(matches!(
        store.upsert_user(imposter.public()),
        Err(StoreError::KeyConflict(_))
    ));
    assert_eq!(store.list_users().unwrap().len(), 1);
    assert_eq!(store.get_user("alice").unwrap().unwrap().public_key, *a.public());
    assert!(store.get_user("bob").unwrap().is_none());
}

#[test]
fn tokens_verify_only_with_the_exact_secret() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    let t = store.create_token("alice").unwrap();
    assert_eq!(store.verify_token(&t.bearer).unwrap().as_deref(), Some("alice"));

    let mut wrong = t.bearer.clone();
    let last = wrong.pop().unwrap();
    wrong.push(if last == '0' { '1' } else { '0' });
    assert_eq!(store.verify_token(&wrong).unwrap(), None);
    assert_eq!(store.verify_token("nodot").unwrap(), None);
    assert_eq!(store.verify_token(&format!("ffff.{}", "0".repeat(64))).unwrap(), None);
    assert!(matches!(store.create_token("nobody"), Err(StoreError::UnknownUser(_))));
}

#[test]
fn duplicate_insert_returns_the_original_row() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    let r = record(&a, &drv(1, "hello-2.12"), &out(1, "hello-2.12"), "x");
    let t0 = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    let first = store.insert_attestation(&r, "alice", t0).unwrap();
    let again = store
        .insert_attestation(&r, "alice", t0 + chrono::Duration::hours(1))
        .unwrap();
    assert!(first.created);
    assert!(!again.created);
    assert_eq!(first.attestation, again.attestation);
    assert_eq!(store.count_attestations().unwrap(), 1);
}

#[test]
fn insert_for_unregistered_user_fails() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    let r = record(&a, &drv(1, "x"), &out(1, "x"), "x");
    assert!(matches!(
        store.insert_attestation(&r, "alice", Utc::now()),
        Err(StoreError::UnknownUser(_))
    ));
}

#[test]
fn stored_rows_cannot_be_modified() {
    let (d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    store
        .insert_attestation(&record(&a, &drv(1, "x"), &out(1, "x"), "x"), "alice", Utc::now())
        .unwrap();
    let conn = rusqlite_conn(&d.path().join("lila.db"));
    assert!(conn.execute("UPDATE attestations SET output_hash = 'x'", []).is_err());
    assert!(conn.execute("DELETE FROM attestations", []).is_err());
    assert_eq!(store.count_attestations().unwrap(), 1);
}

fn rusqlite_conn(path: &std::path::Path) -> rusqlite::Connection {
    rusqlite::Connection::open(path).unwrap()
}

#[test]
fn racing_duplicate_inserts_create_one_row() {
    let (_d, store) = open();
    let store = Arc::new(store);
    let a = keygen("alice", Some([1; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    let r = record(&a, &drv(7, "racy"), &out(7, "racy"), "same");
    let barrier = Arc::new(Barrier::new(16));
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (store, r, barrier) = (store.clone(), r.clone(), barrier.clone());
            thread::spawn(move || {
                barrier.wait();
                store.insert_attestation(&r, "alice", Utc::now()).unwrap()
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(results.iter().filter(|i| i.created).count(), 1);
    assert!(results.windows(2).all(|w| w[0].attestation.id == w[1].attestation.id));
    assert_eq!(store.count_attestations().unwrap(), 1);
}

#[test]
fn output_pages_partition_the_full_result() {
    let (_d, store) = open();
    let o = out(3, "pkg-1.0");
    let d = drv(3, "pkg-1.0");
    let base = Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).unwrap();
    for i in 0..23u32 {
        let k = keygen(&format!("builder{i}"), Some([i as u8; 32])).unwrap();
        store.upsert_user(k.public()).unwrap();
        // Several rows share a timestamp so id breaks ties.
        let when = base + chrono::Duration::seconds((i / 3) as i64);
        store
            .insert_attestation(&record(&k, &d, &o, &format!("c{}", i % 2)), k.name(), when)
            .unwrap();
    }
    let all = store.query_by_output(&o, OutputPage::default()).unwrap();
    assert_eq!(all.len(), 23);

    let mut paged = Vec::new();
    let mut after = None;
    loop {
        let page = store
            .query_by_output(&o, OutputPage { after_id: after, limit: Some(5) })
            .unwrap();
        if page.is_empty() {
            break;
        }
        after = page.last().map(|a| a.id);
        paged.extend(page);
    }
    assert_eq!(paged, all);
    assert!(all.windows(2).all(|w| (w[0].received_at, w[0].id) < (w[1].received_at, w[1].id)));
    assert!(store
        .query_by_output(&o, OutputPage { after_id: Some(9999), limit: None })
        .unwrap()
        .is_empty());
}

#[test]
fn derivation_listing_is_sorted_and_resumable() {
    let (_d, store) = open();
    let k = keygen("alice", Some([1; 32])).unwrap();
    store.upsert_user(k.public()).unwrap();
    let recs: Vec<_> = (0..10)
        .map(|i| record(&k, &drv(i, "p"), &out(i, "p"), "c"))
        .collect();
    let inserted = store.insert_attestations(&recs, "alice", Utc::now()).unwrap();
    assert!(inserted.iter().all(|i| i.created));

    let first = store.list_drvs(None, 4).unwrap();
    let rest = store.list_drvs(Some(first[3].drv_hash()), 100).unwrap();
    let mut all: Vec<_> = first.into_iter().chain(rest).collect();
    assert_eq!(all.len(), 10);
    let sorted = {
        let mut s = all.clone();
        s.sort_by(|a, b| a.drv_hash().cmp(b.drv_hash()));
        s
    };
    assert_eq!(all, sorted);
    all.dedup();
    assert_eq!(all.len(), 10);

    let by_drv = store.query_by_drv(recs[4].drv_id.drv_hash()).unwrap();
    assert_eq!(by_drv.len(), 1);
    assert_eq!(by_drv[0].record(), recs[4]);
}

#[test]
fn reports_round_trip() {
    let (_d, store) = open();
    let defn = lila_core::ReportDefinition::from_toml(
        r#"
name = "core"
description = "core packages"
[[selectors]]
kind = "name_matches"
pattern = "hello-*"
"#,
    )
    .unwrap();
    store.put_report(&defn).unwrap();
    store.put_report(&defn).unwrap();
    assert_eq!(store.list_reports().unwrap(), vec![defn.clone()]);
    assert_eq!(store.get_report("core").unwrap(), Some(defn));
    assert_eq!(store.get_report("other").unwrap(), None);
}

#[test]
fn audit_flags_nothing_on_honest_data() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    let b = keygen("bob", Some([2; 32])).unwrap();
    for k in [&a, &b] {
        store.upsert_user(k.public()).unwrap();
        store
            .insert_attestation(&record(k, &drv(1, "x"), &out(1, "x"), "x"), k.name(), Utc::now())
            .unwrap();
    }
    let report = audit(&store).unwrap();
    assert_eq!(report.checked, 2);
    assert!(report.violations.is_empty());
}

#[test]
fn audit_flags_rows_signed_by_someone_else() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    let b = keygen("bob", Some([2; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    store.upsert_user(b.public()).unwrap();
    // The store trusts its caller; the server is what refuses this.
    let forged = record(&a, &drv(1, "x"), &out(1, "x"), "x");
    store.insert_attestation(&forged, "bob", Utc::now()).unwrap();
    let report = audit(&store).unwrap();
    assert_eq!(report.violations.len(), 1);
}

#[test]
fn snapshot_sees_users_and_rows() {
    let (_d, store) = open();
    let a = keygen("alice", Some([1; 32])).unwrap();
    store.upsert_user(a.public()).unwrap();
    store
        .insert_attestation(&record(&a, &drv(1, "x"), &out(1, "x"), "x"), "alice", Utc::now())
        .unwrap();
    let snap = store.snapshot().unwrap();
    assert!(snap.users.contains("alice"));
    assert_eq!(snap.attestations.len(), 1);
}
