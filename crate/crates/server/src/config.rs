use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use lila_core::DEFAULT_STORE_PREFIX;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid value for {var}: {reason}")]
    Env { var: &'static str, reason: String },
}

/// The `[server]` table of the shared configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub database: PathBuf,
    pub reports_dir: Option<PathBuf>,
    /// Identity under which CI-produced hashes are ingested.
    pub ci_user: Option<String>,
    pub store_prefix: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            database: PathBuf::from("lila.db"),
            reports_dir: None,
            ci_user: None,
            store_prefix: DEFAULT_STORE_PREFIX.to_owned(),
        }
    }
}

#[derive(Deserialize)]
struct ConfigFile {
    #[serde(default)]
    server: Option<ServerConfig>,
}

impl ServerConfig {
    pub fn from_toml(doc: &str) -> Result<Self, toml::de::Error> {
        let file: ConfigFile = toml::from_str(doc)?;
        Ok(file.server.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&doc).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    /// Applies `LILA_LISTEN`, `LILA_DATABASE`, `LILA_REPORTS_DIR` and
    /// `LILA_CI_USER` overrides.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(listen) = var("LILA_LISTEN") {
            self.listen = listen.parse().map_err(|e: std::net::AddrParseError| ConfigError::Env {
                var: "LILA_LISTEN",
                reason: e.to_string(),
            })?;
        }
        if let Some(db) = var("LILA_DATABASE") {
            self.database = db.into();
        }
        if let Some(dir) = var("LILA_REPORTS_DIR") {
            self.reports_dir = Some(dir.into());
        }
        if let Some(user) = var("LILA_CI_USER") {
            self.ci_user = Some(user);
        }
        Ok(())
    }
}
