use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lila_client::{
    build_attestations, flush_spool, read_spool_file, spool_record, submit_or_spool,
    ClientConfig, ClientError, FlushSummary, HookEnv, SubmitSummary,
};
use lila_core::archive::FsTree;
use lila_core::signing::keygen;
use lila_core::{BuilderKey, DrvId, StorePath};
use lila_server::{AppState, RunningServer, ServerConfig};
use lila_store::{SqliteStore, Storage};

const DRV_DIGEST: &str = "0cc175b9c0f1b6a831c399f269771c0b";
const OUT_DIGEST: &str = "92cc175b9c0f1b6a831c399f269771c0";
const DEV_DIGEST: &str = "a2cc175b9c0f1b6a831c399f269771c0";

struct World {
    dir: tempfile::TempDir,
    prefix: String,
    key: BuilderKey,
}

impl World {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("store").display().to_string();
        std::fs::create_dir(&prefix).unwrap();
        World {
            dir,
            prefix,
            key: keygen("builder1", Some([3; 32])).unwrap(),
        }
    }

    fn path(&self, digest: &str, name: &str) -> String {
        format!("{}/{digest}-{name}", self.prefix)
    }

    /// A jq build with `out` and `dev` outputs materialised on disk.
    fn jq_env(&self) -> HookEnv {
        let out = self.path(OUT_DIGEST, "jq-1.8.1");
        let dev = self.path(DEV_DIGEST, "jq-1.8.1-dev");
        FsTree::dir([
            ("bin", FsTree::dir([("jq", FsTree::executable("#!/bin/sh\n"))]).unwrap()),
        ])
        .unwrap()
        .write_to(Path::new(&out))
        .unwrap();
        FsTree::dir([("include", FsTree::dir([("jq.h", FsTree::file("int jq;\n"))]).unwrap())])
            .unwrap()
            .write_to(Path::new(&dev))
            .unwrap();
        HookEnv {
            drv_path: DrvId::parse(&self.path(DRV_DIGEST, "jq-1.8.1.drv"), &self.prefix).unwrap(),
            out_paths: vec![
                StorePath::parse(&out, &self.prefix).unwrap(),
                StorePath::parse(&dev, &self.prefix).unwrap(),
            ],
        }
    }

    fn spool(&self) -> PathBuf {
        self.dir.path().join("spool")
    }

    fn config(&self, server_url: String, token: Option<String>) -> ClientConfig {
        ClientConfig {
            server_url,
            token,
            key_file: self.dir.path().join("key"),
            spool_dir: self.spool(),
            store_prefix: self.prefix.clone(),
        }
    }

    fn server(&self) -> (Arc<SqliteStore>, RunningServer, String) {
        let config = ServerConfig {
            database: self.dir.path().join("lila.db"),
            store_prefix: self.prefix.clone(),
            ..ServerConfig::default()
        };
        let store = Arc::new(SqliteStore::open(&config.database).unwrap());
        store.upsert_user(self.key.public()).unwrap();
        let token = store.create_token(self.key.name()).unwrap().bearer;
        let server = RunningServer::start(
            AppState::new(store.clone(), &config),
            SocketAddr::from(([127, 0, 0, 1], 0)),
        )
        .unwrap();
        (store, server, token)
    }

    fn spool_count(&self) -> usize {
        std::fs::read_dir(self.spool()).map_or(0, |d| d.count())
    }
}

/// A URL nothing listens on.
fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

#[test]
fn attestations_follow_out_paths_and_verify() {
    let w = World::new();
    let env = w.jq_env();
    let records = build_attestations(&env, &w.key).unwrap();
    assert_eq!(records.len(), 2);
    for (r, out) in records.iter().zip(&env.out_paths) {
        assert_eq!(&r.output_path, out);
        assert!(r.verifies_under(w.key.public()));
    }
}

#[test]
fn a_missing_output_aborts_the_batch() {
    let w = World::new();
    let env = w.jq_env();
    std::fs::remove_dir_all(env.out_paths[1].to_string()).unwrap();
    assert!(matches!(build_attestations(&env, &w.key), Err(ClientError::Hash { .. })));
}

#[test]
fn identical_trees_share_a_hash_but_not_a_fingerprint() {
    let w = World::new();
    let mut env = w.jq_env();
    let copy = w.path(DEV_DIGEST, "jq-1.8.1-copy");
    lila_core::archive::snapshot(Path::new(&env.out_paths[0].to_string()))
        .unwrap()
        .write_to(Path::new(&copy))
        .unwrap();
    env.out_paths[1] = StorePath::parse(&copy, &w.prefix).unwrap();
    let r = build_attestations(&env, &w.key).unwrap();
    assert_eq!(r[0].output_hash, r[1].output_hash);
    assert_ne!(r[0].fingerprint(), r[1].fingerprint());
}

#[test]
fn server_up_sends_everything() {
    let w = World::new();
    let (store, server, token) = w.server();
    let records = build_attestations(&w.jq_env(), &w.key).unwrap();
    let summary = submit_or_spool(&records, &w.config(server.url(), Some(token))).unwrap();
    assert_eq!(summary, SubmitSummary { sent: 2, spooled: 0, rejected: 0 });
    assert_eq!(store.count_attestations().unwrap(), 2);
    assert_eq!(w.spool_count(), 0);
}

#[test]
fn server_down_spools_round_trippable_files() {
    let w = World::new();
    let records = build_attestations(&w.jq_env(), &w.key).unwrap();
    let summary = submit_or_spool(&records, &w.config(dead_url(), Some("x.y".into()))).unwrap();
    assert_eq!(summary, SubmitSummary { sent: 0, spooled: 2, rejected: 0 });
    let mut back: Vec<_> = std::fs::read_dir(w.spool())
        .unwrap()
        .map(|e| read_spool_file(&e.unwrap().path(), &w.prefix).unwrap())
        .collect();
    back.sort_by_key(|r| r.output_path.to_string());
    let mut want = records.clone();
    want.sort_by_key(|r| r.output_path.to_string());
    assert_eq!(back, want);
}

#[test]
fn bad_token_is_not_spooled() {
    let w = World::new();
    let (_store, server, _) = w.server();
    let records = build_attestations(&w.jq_env(), &w.key).unwrap();
    let summary = submit_or_spool(&records, &w.config(server.url(), Some("0.0".into()))).unwrap();
    assert_eq!(summary, SubmitSummary { sent: 0, spooled: 0, rejected: 2 });
    assert_eq!(w.spool_count(), 0);
}

#[test]
fn flush_retries_spooled_records() {
    let w = World::new();
    let env = w.jq_env();
    let mut records = build_attestations(&env, &w.key).unwrap();
    let other = w.key.sign(&env.drv_path, &env.out_paths[0], &lila_core::OutputHash::digest("z")).unwrap();
    records.push(lila_core::AttestationRecord {
        output_sig: other,
        output_hash: lila_core::OutputHash::digest("z"),
        ..records[0].clone()
    });
    for r in &records {
        spool_record(&w.spool(), r).unwrap();
    }

    let down = flush_spool(&w.config(dead_url(), Some("x.y".into()))).unwrap();
    assert_eq!(down, FlushSummary { sent: 0, rejected: 0, remaining: 3 });
    assert_eq!(w.spool_count(), 3);

    let (store, server, token) = w.server();
    let up = flush_spool(&w.config(server.url(), Some(token.clone()))).unwrap();
    assert_eq!(up, FlushSummary { sent: 3, rejected: 0, remaining: 0 });
    assert_eq!(w.spool_count(), 0);
    assert_eq!(store.count_attestations().unwrap(), 3);

    // already delivered: the server answers 200 and the file goes away
    spool_record(&w.spool(), &records[0]).unwrap();
    let again = flush_spool(&w.config(server.url(), Some(token))).unwrap();
    assert_eq!(again.sent, 1);
    assert_eq!(w.spool_count(), 0);
    assert_eq!(store.count_attestations().unwrap(), 3);
}

#[test]
fn concurrent_spoolers_do_not_corrupt_each_other() {
    let w = World::new();
    let records = build_attestations(&w.jq_env(), &w.key).unwrap();
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                for _ in 0..20 {
                    for r in &records {
                        spool_record(&w.spool(), r).unwrap();
                    }
                }
            });
        }
    });
    let files: Vec<_> = std::fs::read_dir(w.spool()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 2);
    for f in files {
        read_spool_file(&f, &w.prefix).unwrap();
    }
}
