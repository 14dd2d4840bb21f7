use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lila_client::{build_attestations, flush_spool, load_key, submit_or_spool, ClientConfig, HookEnv};
use lila_core::signing::keygen;
use lila_core::{archive, AttestationRecord, DrvId, PublicKey, StorePath, DEFAULT_STORE_PREFIX};
use lila_server::ingest::{ingest_ci, DEFAULT_BATCH};
use lila_server::{AppState, ServerConfig};
use lila_store::{audit, SqliteStore, Storage};
use serde_json::{json, Value};

/// Decentralized build reproducibility monitoring.
#[derive(Debug, Parser)]
#[command(name = "lila", version)]
struct Cli {
    /// Configuration file with [client] and/or [server] tables.
    #[arg(long, global = true, env = "LILA_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a signing key pair and write the secret part to a file.
    Keygen {
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing key file.
        #[arg(long)]
        force: bool,
    },
    /// Post-build hook entry point; reads DRV_PATH and OUT_PATHS.
    Hook,
    /// Hash and sign output paths without submitting anything.
    Attest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Secret key file.
        #[arg(long)]
        key: PathBuf,
        /// Derivation that produced the paths.
        #[arg(long)]
        drv: String,
        #[arg(long, default_value = DEFAULT_STORE_PREFIX)]
        store_prefix: String,
    },
    /// Retry spooled attestations.
    Flush,
    /// Run the aggregation server.
    Serve,
    /// Administrative commands operating directly on the database.
    Admin {
        #[command(flatten)]
        db: DatabaseArg,
        #[command(subcommand)]
        command: AdminCommand,
    },
    /// Import `<drv> <output> <sha256:hex>` lines produced by CI.
    Ingest {
        file: PathBuf,
        /// CI identity; defaults to ci_user from the server config.
        #[arg(long)]
        user: Option<String>,
        /// Secret key file of the CI identity.
        #[arg(long)]
        key: PathBuf,
        #[command(flatten)]
        db: DatabaseArg,
    },
    /// Fetch a computed report from the server.
    Report {
        name: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Look up attestations on the server.
    Query {
        #[command(subcommand)]
        what: QueryCommand,
        #[command(flatten)]
        server: ServerArg,
    },
}

#[derive(Debug, Subcommand)]
enum AdminCommand {
    /// Register a builder's public key (`NAME:BASE64` or bare base64).
    AddUser { name: String, pubkey: String },
    /// Issue a bearer token for a registered user.
    NewToken { name: String },
    /// Re-verify every stored signature.
    Audit,
}

#[derive(Debug, Subcommand)]
enum QueryCommand {
    /// Summary and attestations of one derivation.
    Drv { hash: String },
    /// All attestations of one output path.
    Output { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Html,
}

#[derive(Debug, Args)]
struct DatabaseArg {
    /// Database file; defaults to the server config.
    #[arg(long, global = true, env = "LILA_DATABASE")]
    database: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServerArg {
    /// Server base URL; defaults to the client config.
    #[arg(long, global = true, env = "LILA_SERVER_URL")]
    server: Option<String>,
}

/// Bad invocation: reported on one line, exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("LILA_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("lila: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("lila: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Keygen { name, out, force } => keygen_cmd(&name, &out, force),
        Command::Hook => hook(config),
        Command::Attest {
            paths,
            key,
            drv,
            store_prefix,
        } => attest(&paths, &key, &drv, &store_prefix),
        Command::Flush => {
            let cfg = client_config(config)?;
            print_json(&flush_spool(&cfg)?)
        }
        Command::Serve => serve(config),
        Command::Admin { db, command } => admin(config, db, command),
        Command::Ingest { file, user, key, db } => ingest(config, db, &file, user, &key),
        Command::Report {
            name,
            format,
            server,
        } => {
            let format = match format {
                Format::Json => "json",
                Format::Html => "html",
            };
            let body = fetch(config, server, &format!("/reports/{name}?format={format}"))?;
            match format {
                "html" => print!("{body}"),
                _ => print_json(&serde_json::from_str::<Value>(&body)?)?,
            }
            Ok(())
        }
        Command::Query { what, server } => {
            let path = match what {
                QueryCommand::Drv { hash } => format!("/derivations/{hash}"),
                QueryCommand::Output { path } => {
                    format!("/attestations/by-output/{}", path.replace('/', "%2F"))
                }
            };
            let body = fetch(config, server, &path)?;
            print_json(&serde_json::from_str::<Value>(&body)?)
        }
    }
}

fn client_config(path: Option<&Path>) -> Result<ClientConfig> {
    let path = path.ok_or_else(|| usage("no configuration: pass --config or set LILA_CONFIG"))?;
    let mut cfg = ClientConfig::load(path)?;
    cfg.apply_env(|k| std::env::var(k).ok());
    Ok(cfg)
}

fn server_config(path: Option<&Path>) -> Result<ServerConfig> {
    let mut cfg = match path {
        Some(p) => ServerConfig::load(p)?,
        None => ServerConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn open_store(config: Option<&Path>, db: DatabaseArg) -> Result<SqliteStore> {
    let path = match db.database {
        Some(p) => p,
        None => server_config(config)?.database,
    };
    SqliteStore::open(&path).with_context(|| format!("opening {}", path.display()))
}

fn write_secret(path: &Path, contents: &str, force: bool) -> Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true);
    if force {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts
        .open(path)
        .with_context(|| format!("cannot create key file {}", path.display()))?;
    writeln!(f, "{contents}")?;
    f.sync_all()?;
    Ok(())
}

fn keygen_cmd(name: &str, out: &Path, force: bool) -> Result<()> {
    let key = keygen(name, None).map_err(|e| usage(e.to_string()))?;
    let secret = key.render_secret().expect("fresh keys have a secret part");
    write_secret(out, &secret, force)?;
    print_json(&json!({
        "name": key.name(),
        "public_key": key.public().to_string(),
        "key_file": out,
    }))
}

fn hook(config: Option<&Path>) -> Result<()> {
    let cfg = client_config(config)?;
    let env = HookEnv::from_process_env(&cfg.store_prefix).map_err(|e| usage(e.to_string()))?;
    let key = load_key(&cfg.key_file)?;
    let records = build_attestations(&env, &key)?;
    // Network trouble ends up in the spool; only local problems are errors.
    let summary = submit_or_spool(&records, &cfg)?;
    print_json(&summary)
}

fn attest(paths: &[PathBuf], key: &Path, drv: &str, store_prefix: &str) -> Result<()> {
    let key = load_key(key)?;
    let drv_id = DrvId::parse(drv, store_prefix).map_err(|e| usage(e.to_string()))?;
    let mut out = Vec::new();
    for path in paths {
        let rendered = path.to_string_lossy();
        let output_path =
            StorePath::parse(&rendered, store_prefix).map_err(|e| usage(e.to_string()))?;
        let output_hash =
            archive::hash_path(path).with_context(|| format!("hashing {}", path.display()))?;
        let record = AttestationRecord {
            output_sig: key.sign(&drv_id, &output_path, &output_hash)?,
            drv_id: drv_id.clone(),
            output_path,
            output_hash,
        };
        out.push(record.to_submission());
    }
    print_json(&out)
}

fn serve(config: Option<&Path>) -> Result<()> {
    let cfg = server_config(config)?;
    let state = AppState::open(&cfg)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = lila_server::bind(&cfg).await?;
        tracing::info!(addr = %listener.local_addr()?, db = %cfg.database.display(), "listening");
        lila_server::serve(listener, state, shutdown_signal()).await?;
        tracing::info!("shut down");
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn parse_pubkey(name: &str, text: &str) -> Result<PublicKey> {
    let rendered = if text.contains(':') {
        text.to_owned()
    } else {
        format!("{name}:{text}")
    };
    let key = PublicKey::parse(rendered.trim()).map_err(|e| usage(e.to_string()))?;
    if key.name() != name {
        return Err(usage(format!(
            "public key is named {:?}, expected {name:?}",
            key.name()
        )));
    }
    Ok(key)
}

fn admin(config: Option<&Path>, db: DatabaseArg, command: AdminCommand) -> Result<()> {
    let store = open_store(config, db)?;
    match command {
        AdminCommand::AddUser { name, pubkey } => {
            let key = parse_pubkey(&name, &pubkey)?;
            let user = store.upsert_user(&key)?;
            print_json(&json!({
                "user_id": user.user_id,
                "public_key": user.public_key.to_string(),
                "created_at": user.created_at,
            }))
        }
        AdminCommand::NewToken { name } => {
            let token = store.create_token(&name)?;
            print_json(&json!({
                "user_id": token.user_id,
                "token_id": token.token_id,
                "token": token.bearer,
            }))
        }
        AdminCommand::Audit => {
            let report = audit(&store)?;
            let violations: Vec<_> = report
                .violations
                .iter()
                .map(|(id, reason)| json!({ "id": id, "reason": reason }))
                .collect();
            print_json(&json!({ "checked": report.checked, "violations": violations }))?;
            if !report.violations.is_empty() {
                bail!("{} stored attestations fail verification", report.violations.len());
            }
            Ok(())
        }
    }
}

fn ingest(
    config: Option<&Path>,
    db: DatabaseArg,
    file: &Path,
    user: Option<String>,
    key_file: &Path,
) -> Result<()> {
    let server_cfg = server_config(config)?;
    let user = user
        .or(server_cfg.ci_user.clone())
        .ok_or_else(|| usage("no CI identity: pass --user or set ci_user in the server config"))?;
    let key = load_key(key_file)?;
    if key.name() != user {
        return Err(usage(format!(
            "key file belongs to {:?}, not {user:?}",
            key.name()
        )));
    }
    let store = match db.database {
        Some(p) => SqliteStore::open(&p).with_context(|| format!("opening {}", p.display()))?,
        None => SqliteStore::open(&server_cfg.database)
            .with_context(|| format!("opening {}", server_cfg.database.display()))?,
    };
    let input = fs::File::open(file).with_context(|| format!("opening {}", file.display()))?;
    let summary = ingest_ci(
        &store,
        BufReader::new(input),
        &key,
        &server_cfg.store_prefix,
        DEFAULT_BATCH,
    )?;
    print_json(&summary)
}

fn fetch(config: Option<&Path>, server: ServerArg, path: &str) -> Result<String> {
    let base = match server.server {
        Some(url) => url,
        None => client_config(config)
            .map_err(|_| usage("no server: pass --server or configure [client] server_url"))?
            .server_url,
    };
    let url = format!("{}{path}", base.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent.get(&url).call().with_context(|| format!("GET {url}"))?;
    let status = resp.status();
    let body = resp.body_mut().read_to_string()?;
    if !status.is_success() {
        let detail = serde_json::from_str::<Value>(&body)
            .ok()
            .and_then(|v| v["error"].as_str().map(str::to_owned))
            .unwrap_or(body);
        return Err(anyhow!("server answered {status}: {detail}"));
    }
    Ok(body)
}
