use std::path::{Path, PathBuf};

use lila_core::DEFAULT_STORE_PREFIX;
use serde::Deserialize;

use crate::ClientError;

/// The `[client]` table of the shared configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub server_url: String,
    #[serde(default)]
    pub token: Option<String>,
    pub key_file: PathBuf,
    pub spool_dir: PathBuf,
    #[serde(default = "default_prefix")]
    pub store_prefix: String,
}

fn default_prefix() -> String {
    DEFAULT_STORE_PREFIX.to_owned()
}

#[derive(Deserialize)]
struct ConfigFile {
    client: Option<ClientConfig>,
}

impl ClientConfig {
    pub fn from_toml(doc: &str) -> Result<Self, ClientError> {
        let file: ConfigFile =
            toml::from_str(doc).map_err(|e| ClientError::Config(e.to_string()))?;
        file.client
            .ok_or_else(|| ClientError::Config("missing [client] table".into()))
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let doc = std::fs::read_to_string(path).map_err(|e| {
            ClientError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&doc)
    }

    /// `LILA_TOKEN` and `LILA_SERVER_URL` take precedence over the file.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(token) = var("LILA_TOKEN") {
            self.token = Some(token);
        }
        if let Some(url) = var("LILA_SERVER_URL") {
            self.server_url = url;
        }
    }

    pub(crate) fn endpoint(&self, path: &str) -> String {
        format!("{}{path}", self.server_url.trim_end_matches('/'))
    }
}
