//! Named package-set reports: rates, regressions and rebuild suggestions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{Attestation, ReproStatus};
use crate::classify::{summarize_derivations, DerivationSummary};
use crate::store_path::{validate_digest, DrvId};

pub const DEFAULT_QUORUM: usize = 3;
pub const DEFAULT_SUGGESTION_LIMIT: usize = 100;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid report definition: {0}")]
    InvalidDefinition(String),
    #[error("cannot parse report definition: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "pattern", rename_all = "snake_case")]
pub enum Selector {
    /// Exact 32-character derivation digest.
    DrvHashIs(String),
    /// Glob over the derivation name without its `.drv` suffix, e.g. `jq-*`.
    NameMatches(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDefinition {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub selectors: Vec<Selector>,
    /// Number of agreeing builders considered sufficient confirmation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quorum: Option<usize>,
}

impl ReportDefinition {
    pub fn from_toml(doc: &str) -> Result<Self, ReportError> {
        let defn: ReportDefinition = toml::from_str(doc)?;
        defn.validate()?;
        Ok(defn)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report definitions always serialize")
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let invalid = |m: String| Err(ReportError::InvalidDefinition(m));
        let name_ok = (1..=64).contains(&self.name.len())
            && self
                .name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
        if !name_ok {
            return invalid(format!("report name {:?} must match [A-Za-z0-9._-]{{1,64}}", self.name));
        }
        if self.selectors.is_empty() {
            return invalid(format!("report {:?} has no selectors", self.name));
        }
        if self.quorum == Some(0) {
            return invalid("quorum must be at least 1".into());
        }
        self.scope().map(|_| ())
    }

    pub fn quorum(&self) -> usize {
        self.quorum.unwrap_or(DEFAULT_QUORUM)
    }

    /// Compiles the selectors into a matcher.
    pub fn scope(&self) -> Result<Scope, ReportError> {
        let mut hashes = BTreeSet::new();
        let mut globs = Vec::new();
        for sel in &self.selectors {
            match sel {
                Selector::DrvHashIs(h) => {
                    validate_digest(h).map_err(|e| {
                        ReportError::InvalidDefinition(format!("selector {h:?}: {e}"))
                    })?;
                    hashes.insert(h.clone());
                }
                Selector::NameMatches(p) => globs.push(glob::Pattern::new(p).map_err(|e| {
                    ReportError::InvalidDefinition(format!("selector {p:?}: {e}"))
                })?),
            }
        }
        Ok(Scope { hashes, globs })
    }
}

pub struct Scope {
    hashes: BTreeSet<String>,
    globs: Vec<glob::Pattern>,
}

impl Scope {
    pub fn contains(&self, drv: &DrvId) -> bool {
        self.hashes.contains(drv.drv_hash())
            || self.globs.iter().any(|g| g.matches(drv.package_name()))
    }
}

/// Report files that could not be loaded, with the reason.
pub type BrokenReports = Vec<(PathBuf, ReportError)>;

/// Loads every `*.toml` report definition in `dir`. Files that fail to parse
/// are returned separately so one broken file does not hide the others.
pub fn load_report_dir(
    dir: &Path,
) -> Result<(Vec<ReportDefinition>, BrokenReports), ReportError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| ReportError::Io { path, source }
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    let mut defs: BTreeMap<String, ReportDefinition> = BTreeMap::new();
    let mut errors = Vec::new();
    for path in paths {
        let parsed = fs::read_to_string(&path)
            .map_err(io(&path))
            .and_then(|doc| ReportDefinition::from_toml(&doc));
        match parsed {
            Ok(d) if defs.contains_key(&d.name) => errors.push((
                path,
                ReportError::InvalidDefinition(format!("duplicate report name {:?}", d.name)),
            )),
            Ok(d) => {
                defs.insert(d.name.clone(), d);
            }
            Err(e) => errors.push((path, e)),
        }
    }
    Ok((defs.into_values().collect(), errors))
}

/// A consistent view of the database: registered users and all attestations.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub users: BTreeSet<String>,
    pub attestations: Vec<Attestation>,
}

impl Snapshot {
    pub fn derivations(&self) -> Vec<DerivationSummary> {
        summarize_derivations(&self.attestations)
    }

    fn in_scope(&self, defn: &ReportDefinition) -> Vec<DerivationSummary> {
        // definitions are validated on load; an invalid one selects nothing
        let Ok(scope) = defn.scope() else {
            return Vec::new();
        };
        summarize_derivations(self.attestations.iter().filter(|a| scope.contains(&a.drv_id)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub unknown: usize,
    pub unconfirmed: usize,
    pub reproducible: usize,
    pub nonreproducible: usize,
}

impl Totals {
    pub fn add(&mut self, status: ReproStatus) {
        match status {
            ReproStatus::Unknown => self.unknown += 1,
            ReproStatus::Unconfirmed => self.unconfirmed += 1,
            ReproStatus::Reproducible => self.reproducible += 1,
            ReproStatus::Nonreproducible => self.nonreproducible += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.unknown + self.unconfirmed + self.reproducible + self.nonreproducible
    }

    /// reproducible / (reproducible + nonreproducible), if defined.
    pub fn rate(&self) -> Option<f64> {
        let decided = self.reproducible + self.nonreproducible;
        (decided > 0).then(|| self.reproducible as f64 / decided as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub drv_hash: String,
    pub drv_path: DrvId,
    pub name: String,
    pub status: ReproStatus,
    pub distinct_builders: usize,
    pub last_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regression {
    pub stem: String,
    pub earlier_drv_hash: String,
    pub earlier_name: String,
    pub later_drv_hash: String,
    pub later_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputedReport {
    pub name: String,
    pub description: String,
    pub generated_at: DateTime<Utc>,
    pub totals: Totals,
    pub rate: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub regressions: Vec<Regression>,
}

pub fn compute_report(
    defn: &ReportDefinition,
    snapshot: &Snapshot,
    generated_at: DateTime<Utc>,
) -> ComputedReport {
    let in_scope = snapshot.in_scope(defn);
    let mut totals = Totals::default();
    let rows = in_scope
        .iter()
        .map(|d| {
            totals.add(d.status);
            ReportRow {
                drv_hash: d.drv_hash().to_owned(),
                drv_path: d.drv_id.clone(),
                name: d.drv_id.package_name().to_owned(),
                status: d.status,
                distinct_builders: d.distinct_builders(),
                last_seen: d.last_seen,
            }
        })
        .collect();
    ComputedReport {
        name: defn.name.clone(),
        description: defn.description.clone(),
        generated_at,
        totals,
        rate: totals.rate(),
        rows,
        regressions: regressions_among(&in_scope),
    }
}

static VERSION_SUFFIX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.+?)-[0-9][A-Za-z0-9.]*$").unwrap());

/// Package name with its trailing version-like suffix removed
/// (`jq-1.8.1` → `jq`). Names without such a suffix are their own stem.
pub fn version_stem(name: &str) -> &str {
    VERSION_SUFFIX
        .captures(name)
        .and_then(|c| c.get(1))
        .map_or(name, |m| m.as_str())
}

pub fn detect_regressions(defn: &ReportDefinition, snapshot: &Snapshot) -> Vec<Regression> {
    regressions_among(&snapshot.in_scope(defn))
}

/// Within each stem, derivations are ordered by first receipt. A regression
/// is a non-reproducible derivation whose most recent earlier decided
/// (reproducible or non-reproducible) sibling was reproducible and was first
/// seen strictly earlier.
fn regressions_among(derivations: &[DerivationSummary]) -> Vec<Regression> {
    let mut groups: BTreeMap<&str, Vec<&DerivationSummary>> = BTreeMap::new();
    for d in derivations {
        groups
            .entry(version_stem(d.drv_id.package_name()))
            .or_default()
            .push(d);
    }
    let mut out = Vec::new();
    for (stem, mut group) in groups {
        group.sort_by(|a, b| {
            (a.first_seen, a.drv_hash(), &a.drv_id).cmp(&(b.first_seen, b.drv_hash(), &b.drv_id))
        });
        let mut last_decided: Option<&DerivationSummary> = None;
        for d in group {
            match d.status {
                ReproStatus::Nonreproducible => {
                    if let Some(prev) = last_decided {
                        if prev.status == ReproStatus::Reproducible
                            && prev.first_seen < d.first_seen
                        {
                            out.push(Regression {
                                stem: stem.to_owned(),
                                earlier_drv_hash: prev.drv_hash().to_owned(),
                                earlier_name: prev.drv_id.package_name().to_owned(),
                                later_drv_hash: d.drv_hash().to_owned(),
                                later_name: d.drv_id.package_name().to_owned(),
                            });
                        }
                    }
                    last_decided = Some(d);
                }
                ReproStatus::Reproducible => last_decided = Some(d),
                ReproStatus::Unknown | ReproStatus::Unconfirmed => {}
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub drv_hash: String,
    pub drv_path: DrvId,
    pub status: ReproStatus,
    pub distinct_builders: usize,
}

/// Derivations in scope that would benefit from another independent build
/// by `requesting_user`, least-confirmed first.
pub fn suggest_rebuilds(
    defn: &ReportDefinition,
    snapshot: &Snapshot,
    requesting_user: &str,
    limit: usize,
) -> Result<Vec<Suggestion>, ReportError> {
    if !snapshot.users.contains(requesting_user) {
        return Err(ReportError::UnknownUser(requesting_user.to_owned()));
    }
    let quorum = defn.quorum();
    let mut out: Vec<Suggestion> = snapshot
        .in_scope(defn)
        .into_iter()
        .filter(|d| !d.builders.contains(requesting_user))
        .filter(|d| match d.status {
            ReproStatus::Unconfirmed | ReproStatus::Unknown => true,
            ReproStatus::Reproducible => d.distinct_builders() < quorum,
            ReproStatus::Nonreproducible => false,
        })
        .map(|d| Suggestion {
            drv_hash: d.drv_hash().to_owned(),
            distinct_builders: d.distinct_builders(),
            status: d.status,
            drv_path: d.drv_id,
        })
        .collect();
    out.sort_by(|a, b| {
        (a.distinct_builders, &a.drv_hash, &a.drv_path).cmp(&(
            b.distinct_builders,
            &b.drv_hash,
            &b.drv_path,
        ))
    });
    out.truncate(limit);
    Ok(out)
}
