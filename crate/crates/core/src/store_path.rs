//! Store paths and derivation identifiers.
//!
//! A store path has the shape `<prefix>/<digest>-<name>`. The digest is 32
//! characters of the Nix base32 alphabet and is treated as an opaque
//! identifier: nothing here ever recomputes it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DEFAULT_STORE_PREFIX: &str = "/nix/store";

/// Characters allowed in the digest part of a store path.
pub const DIGEST_ALPHABET: &str = "0123456789abcdfghijklmnpqrsvwxyz";

pub const DIGEST_LEN: usize = 32;

const DRV_SUFFIX: &str = ".drv";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed store path {path:?}: {reason}")]
pub struct MalformedStorePath {
    pub path: String,
    pub reason: &'static str,
}

impl MalformedStorePath {
    fn new(path: &str, reason: &'static str) -> Self {
        MalformedStorePath {
            path: path.to_owned(),
            reason,
        }
    }
}

pub fn is_digest_char(c: char) -> bool {
    DIGEST_ALPHABET.contains(c)
}

pub fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || "+._?=-".contains(c)
}

/// Checks that `s` is a well-formed 32-character store digest.
pub fn validate_digest(s: &str) -> Result<(), &'static str> {
    if s.len() != DIGEST_LEN {
        return Err("digest must be 32 characters");
    }
    if !s.chars().all(is_digest_char) {
        return Err("digest contains a character outside the store alphabet");
    }
    Ok(())
}

fn validate_name(name: &str) -> Result<(), &'static str> {
    if name.is_empty() {
        return Err("empty name");
    }
    if name.starts_with('.') {
        return Err("name may not begin with '.'");
    }
    if !name.chars().all(is_name_char) {
        return Err("name contains an invalid character");
    }
    Ok(())
}

fn normalize_prefix(prefix: &str) -> &str {
    prefix.trim_end_matches('/')
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorePath {
    prefix: String,
    digest: String,
    name: String,
}

impl StorePath {
    /// Builds a store path from its parts, validating each one.
    pub fn new(prefix: &str, digest: &str, name: &str) -> Result<Self, MalformedStorePath> {
        let prefix = normalize_prefix(prefix);
        let rendered = format!("{prefix}/{digest}-{name}");
        validate_digest(digest).map_err(|r| MalformedStorePath::new(&rendered, r))?;
        validate_name(name).map_err(|r| MalformedStorePath::new(&rendered, r))?;
        Ok(StorePath {
            prefix: prefix.to_owned(),
            digest: digest.to_owned(),
            name: name.to_owned(),
        })
    }

    /// Parses `s`, requiring it to live directly under `store_prefix`.
    pub fn parse(s: &str, store_prefix: &str) -> Result<Self, MalformedStorePath> {
        let prefix = normalize_prefix(store_prefix);
        let rest = s
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('/'))
            .ok_or_else(|| MalformedStorePath::new(s, "path is not inside the store prefix"))?;
        Self::parse_base(s, prefix, rest)
    }

    /// Parses `s`, taking everything before the final `/` as the store prefix.
    pub fn parse_any(s: &str) -> Result<Self, MalformedStorePath> {
        let (prefix, rest) = s
            .rsplit_once('/')
            .ok_or_else(|| MalformedStorePath::new(s, "path has no directory component"))?;
        if !s.starts_with('/') {
            return Err(MalformedStorePath::new(s, "path is not absolute"));
        }
        Self::parse_base(s, prefix, rest)
    }

    fn parse_base(full: &str, prefix: &str, base: &str) -> Result<Self, MalformedStorePath> {
        // Digest chars are ASCII, so a non-char-boundary here means the
        // digest itself is malformed.
        let digest = base
            .get(..DIGEST_LEN)
            .ok_or_else(|| MalformedStorePath::new(full, "digest must be 32 characters"))?;
        validate_digest(digest).map_err(|r| MalformedStorePath::new(full, r))?;
        let name = base[DIGEST_LEN..]
            .strip_prefix('-')
            .ok_or_else(|| MalformedStorePath::new(full, "missing '-' after digest"))?;
        validate_name(name).map_err(|r| MalformedStorePath::new(full, r))?;
        Ok(StorePath {
            prefix: prefix.to_owned(),
            digest: digest.to_owned(),
            name: name.to_owned(),
        })
    }

    pub fn store_prefix(&self) -> &str {
        &self.prefix
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_in_store(&self, store_prefix: &str) -> bool {
        self.prefix == normalize_prefix(store_prefix)
    }

    pub fn is_derivation(&self) -> bool {
        self.name.ends_with(DRV_SUFFIX)
    }
}

/// Validating parse of a store path under an explicit prefix.
pub fn parse_store_path(s: &str, store_prefix: &str) -> Result<StorePath, MalformedStorePath> {
    StorePath::parse(s, store_prefix)
}

impl fmt::Display for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}-{}", self.prefix, self.digest, self.name)
    }
}

impl FromStr for StorePath {
    type Err = MalformedStorePath;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StorePath::parse_any(s)
    }
}

impl Serialize for StorePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StorePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        StorePath::parse_any(&s).map_err(serde::de::Error::custom)
    }
}

/// The store path of a derivation (`*.drv`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DrvId(StorePath);

impl DrvId {
    pub fn new(path: StorePath) -> Result<Self, MalformedStorePath> {
        if !path.is_derivation() {
            return Err(MalformedStorePath::new(
                &path.to_string(),
                "derivation name must end in .drv",
            ));
        }
        Ok(DrvId(path))
    }

    pub fn parse(s: &str, store_prefix: &str) -> Result<Self, MalformedStorePath> {
        Self::new(StorePath::parse(s, store_prefix)?)
    }

    pub fn parse_any(s: &str) -> Result<Self, MalformedStorePath> {
        Self::new(StorePath::parse_any(s)?)
    }

    /// The digest that fills the `{drv_hash}` URL segment.
    pub fn drv_hash(&self) -> &str {
        self.0.digest()
    }

    pub fn path(&self) -> &StorePath {
        &self.0
    }

    /// Derivation name without the `.drv` suffix, e.g. `jq-1.8.1`.
    pub fn package_name(&self) -> &str {
        self.0
            .name()
            .strip_suffix(DRV_SUFFIX)
            .unwrap_or(self.0.name())
    }
}

pub fn drv_hash_of(d: &DrvId) -> &str {
    d.drv_hash()
}

impl fmt::Display for DrvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for DrvId {
    type Err = MalformedStorePath;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DrvId::parse_any(s)
    }
}

impl Serialize for DrvId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DrvId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let path = StorePath::deserialize(deserializer)?;
        DrvId::new(path).map_err(serde::de::Error::custom)
    }
}
