//! Builder identities and attestation signatures.
//!
//! Keys are named Ed25519 key pairs. Public keys render as
//! `<name>:<base64(public)>`, secret keys as `<name>:<base64(secret ++ public)>`
//! and signatures as `<name>:<base64(signature)>`.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use rand::RngCore as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::hash::OutputHash;
use crate::store_path::{DrvId, StorePath};

pub const FINGERPRINT_VERSION: &str = "lila-1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("invalid key name {0:?}: expected 1-64 characters from [a-zA-Z0-9._-]")]
    InvalidKeyName(String),
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("malformed signature: {0}")]
    MalformedSignature(String),
    #[error("key {0:?} has no secret part")]
    MissingSecretKey(String),
}

pub fn validate_key_name(name: &str) -> Result<(), KeyError> {
    let ok = (1..=64).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(KeyError::InvalidKeyName(name.to_owned()))
    }
}

fn split_named(s: &str) -> Option<(&str, &str)> {
    s.split_once(':')
}

/// A named Ed25519 public key.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    name: String,
    key: VerifyingKey,
}

impl PublicKey {
    pub fn new(name: &str, bytes: &[u8; 32]) -> Result<Self, KeyError> {
        validate_key_name(name)?;
        let key = VerifyingKey::from_bytes(bytes)
            .map_err(|_| KeyError::MalformedKey("not a valid Ed25519 point".into()))?;
        Ok(PublicKey {
            name: name.to_owned(),
            key,
        })
    }

    pub fn parse(s: &str) -> Result<Self, KeyError> {
        let (name, b64) = split_named(s.trim())
            .ok_or_else(|| KeyError::MalformedKey("expected <name>:<base64>".into()))?;
        let raw = BASE64
            .decode(b64)
            .map_err(|e| KeyError::MalformedKey(e.to_string()))?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| KeyError::MalformedKey("public key must be 32 bytes".into()))?;
        PublicKey::new(name, &bytes)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.key.as_bytes()
    }

    /// True iff `sig` was made by this key over the given triple.
    pub fn verify(
        &self,
        sig: &Signature,
        drv_id: &DrvId,
        output_path: &StorePath,
        output_hash: &OutputHash,
    ) -> bool {
        verify(self, sig, drv_id, output_path, output_hash)
    }

    pub fn verify_raw(&self, message: &[u8], signature: &[u8; 64]) -> bool {
        let sig = ed25519_dalek::Signature::from_bytes(signature);
        self.key.verify_strict(message, &sig).is_ok()
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, BASE64.encode(self.key.as_bytes()))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({self})")
    }
}

impl FromStr for PublicKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PublicKey::parse(s)
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        PublicKey::parse(&String::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

/// A builder's signing identity. The name doubles as the server-side user id.
#[derive(Clone)]
pub struct BuilderKey {
    public: PublicKey,
    secret: Option<SigningKey>,
}

impl BuilderKey {
    pub fn from_seed(name: &str, seed: &[u8; 32]) -> Result<Self, KeyError> {
        validate_key_name(name)?;
        let secret = SigningKey::from_bytes(seed);
        Ok(BuilderKey {
            public: PublicKey {
                name: name.to_owned(),
                key: secret.verifying_key(),
            },
            secret: Some(secret),
        })
    }

    pub fn public_only(public: PublicKey) -> Self {
        BuilderKey {
            public,
            secret: None,
        }
    }

    /// Parses the rendered secret form `<name>:<base64(secret ++ public)>`.
    pub fn parse_secret(s: &str) -> Result<Self, KeyError> {
        let (name, b64) = split_named(s.trim())
            .ok_or_else(|| KeyError::MalformedKey("expected <name>:<base64>".into()))?;
        let raw = BASE64
            .decode(b64)
            .map_err(|e| KeyError::MalformedKey(e.to_string()))?;
        if raw.len() != 64 {
            return Err(KeyError::MalformedKey("secret key must be 64 bytes".into()));
        }
        let seed: [u8; 32] = raw[..32].try_into().unwrap();
        let key = BuilderKey::from_seed(name, &seed)?;
        if key.public.as_bytes()[..] != raw[32..] {
            return Err(KeyError::MalformedKey(
                "embedded public key does not match the secret".into(),
            ));
        }
        Ok(key)
    }

    pub fn name(&self) -> &str {
        self.public.name()
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn has_secret(&self) -> bool {
        self.secret.is_some()
    }

    /// Rendered secret form, if the secret part is present.
    pub fn render_secret(&self) -> Option<String> {
        self.secret.as_ref().map(|s| {
            let mut bytes = s.to_bytes().to_vec();
            bytes.extend_from_slice(self.public.as_bytes());
            format!("{}:{}", self.name(), BASE64.encode(bytes))
        })
    }

    pub fn sign(
        &self,
        drv_id: &DrvId,
        output_path: &StorePath,
        output_hash: &OutputHash,
    ) -> Result<Signature, KeyError> {
        sign(self, drv_id, output_path, output_hash)
    }

    /// Plain Ed25519 signature over arbitrary bytes.
    pub fn sign_raw(&self, message: &[u8]) -> Result<[u8; 64], KeyError> {
        let secret = self
            .secret
            .as_ref()
            .ok_or_else(|| KeyError::MissingSecretKey(self.name().to_owned()))?;
        Ok(secret.sign(message).to_bytes())
    }
}

impl fmt::Debug for BuilderKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BuilderKey")
            .field("public", &self.public)
            .field("has_secret", &self.has_secret())
            .finish()
    }
}

/// Generates a key pair bound to `name`; deterministic when `seed` is given.
pub fn keygen(name: &str, seed: Option<[u8; 32]>) -> Result<BuilderKey, KeyError> {
    let seed = seed.unwrap_or_else(|| {
        let mut s = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut s);
        s
    });
    BuilderKey::from_seed(name, &seed)
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    key_name: String,
    bytes: [u8; 64],
}

impl Signature {
    pub fn new(key_name: &str, bytes: [u8; 64]) -> Result<Self, KeyError> {
        validate_key_name(key_name)?;
        Ok(Signature {
            key_name: key_name.to_owned(),
            bytes,
        })
    }

    pub fn parse(s: &str) -> Result<Self, KeyError> {
        let (name, b64) = split_named(s)
            .ok_or_else(|| KeyError::MalformedSignature("expected <name>:<base64>".into()))?;
        validate_key_name(name)?;
        let raw = BASE64
            .decode(b64)
            .map_err(|e| KeyError::MalformedSignature(e.to_string()))?;
        let bytes: [u8; 64] = raw
            .try_into()
            .map_err(|_| KeyError::MalformedSignature("signature must be 64 bytes".into()))?;
        Ok(Signature {
            key_name: name.to_owned(),
            bytes,
        })
    }

    pub fn key_name(&self) -> &str {
        &self.key_name
    }

    pub fn bytes(&self) -> &[u8; 64] {
        &self.bytes
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.key_name, BASE64.encode(self.bytes))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({self})")
    }
}

impl FromStr for Signature {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Signature::parse(s)
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Signature::parse(&String::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

/// The exact bytes a builder signs: `lila-1;<drv>;<output path>;<output hash>`.
pub fn fingerprint(drv_id: &DrvId, output_path: &StorePath, output_hash: &OutputHash) -> Vec<u8> {
    format!("{FINGERPRINT_VERSION};{drv_id};{output_path};{output_hash}").into_bytes()
}

pub fn sign(
    key: &BuilderKey,
    drv_id: &DrvId,
    output_path: &StorePath,
    output_hash: &OutputHash,
) -> Result<Signature, KeyError> {
    let bytes = key.sign_raw(&fingerprint(drv_id, output_path, output_hash))?;
    Ok(Signature {
        key_name: key.name().to_owned(),
        bytes,
    })
}

pub fn verify(
    public: &PublicKey,
    sig: &Signature,
    drv_id: &DrvId,
    output_path: &StorePath,
    output_hash: &OutputHash,
) -> bool {
    if sig.key_name != public.name {
        return false;
    }
    public.verify_raw(&fingerprint(drv_id, output_path, output_hash), &sig.bytes)
}
