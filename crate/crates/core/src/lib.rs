//! Core of the Lila build-reproducibility monitor.
//!
//! Builders hash each output of a local build with the canonical archive
//! format, sign a statement binding the derivation to that content hash and
//! submit it to an aggregation server. This crate holds everything both
//! sides share: store-path parsing, the archive encoder, signing, the wire
//! body, and the classification and report logic the server runs over its
//! database.

pub mod archive;
pub mod attestation;
pub mod ci;
pub mod classify;
pub mod hash;
pub mod report;
pub mod signing;
pub mod store_path;

pub use archive::{decode_tree, encode_string, encode_tree, hash_path, hash_tree, FsTree};
pub use attestation::{Attestation, AttestationRecord, ReproStatus, SubmissionBody};
pub use classify::{classify_derivation, classify_output, summarize_derivations};
pub use hash::OutputHash;
pub use report::{
    compute_report, detect_regressions, suggest_rebuilds, ComputedReport, ReportDefinition,
    Selector, Snapshot,
};
pub use signing::{fingerprint, keygen, sign, verify, BuilderKey, PublicKey, Signature};
pub use store_path::{parse_store_path, DrvId, StorePath, DEFAULT_STORE_PREFIX};
