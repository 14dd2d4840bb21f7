//! Helpers shared by the CLI integration tests and the acceptance suite.
#![allow(dead_code)]

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;

pub const ALPHABET: &[u8] = b"0123456789abcdfghijklmnpqrsvwxyz";

pub fn random_digest(rng: &mut impl Rng) -> String {
    (0..32)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

pub fn lila() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lila"));
    for var in ["LILA_CONFIG", "LILA_TOKEN", "LILA_SERVER_URL", "LILA_DATABASE", "LILA_LISTEN"] {
        cmd.env_remove(var);
    }
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn lila")
}

/// Runs a command that must succeed and returns its stdout as JSON.
pub fn run_json(cmd: &mut Command) -> Value {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

/// GET returning (status, body).
pub fn get(agent: &ureq::Agent, url: &str) -> (u16, String) {
    let mut resp = agent.get(url).call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

/// A `lila serve` child process, killed on drop.
pub struct ServerProcess {
    child: Child,
    pub url: String,
    pub config: PathBuf,
}

impl ServerProcess {
    /// Writes a config file into `dir` and starts the server on a free port.
    pub fn start(dir: &Path, database: &Path, store_prefix: &str, reports_dir: Option<&Path>) -> Self {
        let port = free_port();
        let config = dir.join(format!("server-{port}.toml"));
        let mut doc = format!(
            "[server]\nlisten = \"127.0.0.1:{port}\"\ndatabase = {:?}\nstore_prefix = {:?}\n",
            database.display().to_string(),
            store_prefix
        );
        if let Some(r) = reports_dir {
            doc.push_str(&format!("reports_dir = {:?}\n", r.display().to_string()));
        }
        std::fs::write(&config, doc).unwrap();
        Self::start_with_config(config, port)
    }

    pub fn start_with_config(config: PathBuf, port: u16) -> Self {
        let child = lila()
            .arg("--config")
            .arg(&config)
            .arg("serve")
            .env("LILA_LOG", "error")
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut server = ServerProcess {
            child,
            url: format!("http://127.0.0.1:{port}"),
            config,
        };
        server.wait_ready();
        server
    }

    fn wait_ready(&mut self) {
        let agent = agent();
        let deadline = Instant::now() + Duration::from_secs(30);
        while Instant::now() < deadline {
            if let Ok(resp) = agent.get(format!("{}/keys", self.url)).call() {
                if resp.status().is_success() {
                    return;
                }
            }
            if let Ok(Some(status)) = self.child.try_wait() {
                panic!("server exited early: {status}");
            }
            std::thread::sleep(Duration::from_millis(25));
        }
        panic!("server did not come up at {}", self.url);
    }

    /// SIGKILL, no chance to clean up.
    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
