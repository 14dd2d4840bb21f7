use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

const ALGO_PREFIX: &str = "sha256:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed output hash {input:?}: {reason}")]
pub struct MalformedHash {
    pub input: String,
    pub reason: &'static str,
}

/// Content hash of a built output, rendered as `sha256:<64 lowercase hex>`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OutputHash([u8; 32]);

impl OutputHash {
    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        OutputHash(bytes)
    }

    pub fn digest(data: impl AsRef<[u8]>) -> Self {
        OutputHash(Sha256::digest(data.as_ref()).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn parse(s: &str) -> Result<Self, MalformedHash> {
        let err = |reason| MalformedHash {
            input: s.to_owned(),
            reason,
        };
        let hex_part = s
            .strip_prefix(ALGO_PREFIX)
            .ok_or_else(|| err("expected a sha256: prefix"))?;
        if hex_part.len() != 64 {
            return Err(err("expected 64 hex characters"));
        }
        if !hex_part
            .bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        {
            return Err(err("hex must be lowercase"));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(hex_part, &mut out).map_err(|_| err("invalid hex"))?;
        Ok(OutputHash(out))
    }
}

impl fmt::Display for OutputHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{ALGO_PREFIX}{}", self.to_hex())
    }
}

impl fmt::Debug for OutputHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OutputHash({self})")
    }
}

impl FromStr for OutputHash {
    type Err = MalformedHash;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutputHash::parse(s)
    }
}

impl Serialize for OutputHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OutputHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        OutputHash::parse(&s).map_err(serde::de::Error::custom)
    }
}
