//! HTTP aggregation service.
//!
//! Builders POST signed attestations with a bearer token; anyone can query
//! attestations, derivation summaries, public keys and reports.

pub mod config;
pub mod html;
pub mod ingest;

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use lila_core::classify::summarize_derivations;
use lila_core::report::{
    compute_report, load_report_dir, suggest_rebuilds, ReportDefinition, ReportError,
    DEFAULT_SUGGESTION_LIMIT,
};
use lila_core::store_path::validate_digest;
use lila_core::{Attestation, ReproStatus, StorePath, SubmissionBody};
use lila_store::{audit, OutputPage, SqliteStore, Storage, StoreError};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub use config::{ConfigError, ServerConfig};

const DEFAULT_PAGE: usize = 100;
const MAX_PAGE: usize = 10_000;

#[derive(Clone)]
pub struct AppState {
    store: Arc<dyn Storage>,
    store_prefix: Arc<str>,
    reports_dir: Option<Arc<PathBuf>>,
}

impl AppState {
    pub fn new(store: Arc<dyn Storage>, config: &ServerConfig) -> Self {
        AppState {
            store,
            store_prefix: config.store_prefix.as_str().into(),
            reports_dir: config.reports_dir.clone().map(Arc::new),
        }
    }

    /// Opens the configured database and persists the report definitions
    /// found in the reports directory.
    pub fn open(config: &ServerConfig) -> Result<Self, StartupError> {
        let store = Arc::new(SqliteStore::open(&config.database)?);
        if let Some(dir) = &config.reports_dir {
            let (defs, errors) = load_report_dir(dir)?;
            for (path, err) in errors {
                tracing::warn!(path = %path.display(), "skipping report definition: {err}");
            }
            for defn in &defs {
                store.put_report(defn)?;
            }
        }
        Ok(AppState::new(store, config))
    }

    pub fn store(&self) -> &Arc<dyn Storage> {
        &self.store
    }

    /// Stored definitions overlaid with whatever is currently in the reports
    /// directory, so edits show up without a restart.
    fn catalog(&self) -> Result<BTreeMap<String, ReportDefinition>, ApiError> {
        let mut defs: BTreeMap<_, _> = self
            .store
            .list_reports()?
            .into_iter()
            .map(|d| (d.name.clone(), d))
            .collect();
        if let Some(dir) = &self.reports_dir {
            match load_report_dir(dir) {
                Ok((fresh, _)) => defs.extend(fresh.into_iter().map(|d| (d.name.clone(), d))),
                Err(e) => tracing::warn!("cannot reload report definitions: {e}"),
            }
        }
        Ok(defs)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Reports(#[from] ReportError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token")
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        tracing::error!("storage failure: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage failure")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a storage call on the blocking pool.
async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| {
            tracing::error!("request task failed: {e}");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        })?
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme
        .eq_ignore_ascii_case("bearer")
        .then(|| token.trim().to_owned())
}

fn authenticate(state: &AppState, headers: &HeaderMap) -> ApiResult<String> {
    let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
    state
        .store
        .verify_token(&token)?
        .ok_or_else(ApiError::unauthorized)
}

fn check_digest(drv_hash: &str) -> ApiResult<()> {
    validate_digest(drv_hash).map_err(|e| ApiError::bad_request(format!("drv_hash: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/attestation/{drv_hash}", post(submit))
        .route("/attestations/by-output/{*output_path}", get(by_output))
        .route("/derivations", get(list_derivations))
        .route("/derivations/", get(list_derivations))
        .route("/derivations/{drv_hash}", get(derivation))
        .route("/reports", get(list_reports))
        .route("/reports/{name}", get(report))
        .route("/reports/{name}/suggested", get(suggested))
        .route("/keys", get(keys))
        .route("/audit", get(audit_all))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), StartupError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

pub async fn bind(config: &ServerConfig) -> Result<TcpListener, StartupError> {
    TcpListener::bind(config.listen)
        .await
        .map_err(|source| StartupError::Bind {
            addr: config.listen,
            source,
        })
}

/// A server running on its own runtime thread, stopped on drop.
pub struct RunningServer {
    addr: std::net::SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    /// Binds `addr` (port 0 picks a free port) and serves `state` in the
    /// background.
    pub fn start(state: AppState, addr: std::net::SocketAddr) -> Result<Self, StartupError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        let listener = runtime
            .block_on(TcpListener::bind(addr))
            .map_err(|source| StartupError::Bind { addr, source })?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let shutdown = async {
                let _ = stopped.await;
            };
            if let Err(e) = runtime.block_on(serve(listener, state, shutdown)) {
                tracing::error!("server stopped: {e}");
            }
        });
        Ok(RunningServer {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

async fn submit(
    State(state): State<AppState>,
    Path(drv_hash): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Attestation>)> {
    blocking(&state, move |state| {
        let user_id = authenticate(state, &headers)?;
        check_digest(&drv_hash)?;
        let record = SubmissionBody::from_json(&body)
            .and_then(|b| b.validate(&state.store_prefix))
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        if record.drv_id.drv_hash() != drv_hash {
            return Err(ApiError::bad_request(format!(
                "URL names derivation {drv_hash} but the body names {}",
                record.drv_id.drv_hash()
            )));
        }
        if record.output_sig.key_name() != user_id {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!(
                    "signature key {:?} does not belong to the token holder {user_id:?}",
                    record.output_sig.key_name()
                ),
            ));
        }
        let user = state
            .store
            .get_user(&user_id)?
            .ok_or_else(ApiError::unauthorized)?;
        if !record.verifies_under(&user.public_key) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "signature does not verify under the registered key",
            ));
        }
        let inserted = state
            .store
            .insert_attestation(&record, &user_id, Utc::now())?;
        let status = if inserted.created {
            tracing::info!(id = inserted.attestation.id, user = %user_id, drv = %drv_hash, "stored attestation");
            StatusCode::CREATED
        } else {
            StatusCode::OK
        };
        Ok((status, Json(inserted.attestation)))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct OutputQuery {
    limit: Option<usize>,
    after_id: Option<u64>,
}

async fn by_output(
    State(state): State<AppState>,
    Path(raw): Path<String>,
    Query(q): Query<OutputQuery>,
) -> ApiResult<Json<Vec<Attestation>>> {
    // Accept both `/by-output/%2Fnix%2Fstore%2F…` and `/by-output/nix/store/…`.
    let path = if raw.starts_with('/') { raw } else { format!("/{raw}") };
    let output_path = StorePath::parse(&path, &state.store_prefix)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let page = OutputPage {
        after_id: q.after_id,
        limit: q.limit.map(|l| l.min(MAX_PAGE)),
    };
    blocking(&state, move |state| {
        Ok(Json(state.store.query_by_output(&output_path, page)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct DrvListQuery {
    limit: Option<usize>,
    after: Option<String>,
}

#[derive(Debug, Serialize)]
struct DrvRow {
    drv_hash: String,
    drv_path: String,
    status: ReproStatus,
    attestation_count: usize,
    distinct_builders: usize,
}

async fn list_derivations(
    State(state): State<AppState>,
    Query(q): Query<DrvListQuery>,
) -> ApiResult<Json<Vec<DrvRow>>> {
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    blocking(&state, move |state| {
        let drvs = state.store.list_drvs(q.after.as_deref(), limit)?;
        let mut rows = Vec::with_capacity(drvs.len());
        let mut last_hash: Option<String> = None;
        for drv in &drvs {
            // several drv paths may share a digest; one query covers them all
            if last_hash.as_deref() == Some(drv.drv_hash()) {
                continue;
            }
            last_hash = Some(drv.drv_hash().to_owned());
            let attestations = state.store.query_by_drv(drv.drv_hash())?;
            rows.extend(summarize_derivations(&attestations).into_iter().map(|s| DrvRow {
                drv_hash: s.drv_hash().to_owned(),
                drv_path: s.drv_id.to_string(),
                status: s.status,
                attestation_count: s.attestation_count,
                distinct_builders: s.distinct_builders(),
            }));
        }
        Ok(Json(rows))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct DrvQuery {
    #[serde(default)]
    summary: bool,
}

#[derive(Debug, Serialize)]
struct OutputStatus {
    status: ReproStatus,
    distinct_builders: usize,
    distinct_hashes: usize,
    attestation_count: usize,
}

#[derive(Debug, Serialize)]
struct DrvSummary {
    overall: ReproStatus,
    outputs: BTreeMap<String, OutputStatus>,
    distinct_builders: usize,
    attestation_count: usize,
}

#[derive(Debug, Serialize)]
struct DrvDetail {
    drv_hash: String,
    drv_path: String,
    summary: DrvSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    attestations: Option<BTreeMap<String, Vec<Attestation>>>,
}

async fn derivation(
    State(state): State<AppState>,
    Path(drv_hash): Path<String>,
    Query(q): Query<DrvQuery>,
) -> ApiResult<Json<DrvDetail>> {
    check_digest(&drv_hash)?;
    blocking(&state, move |state| {
        let attestations = state.store.query_by_drv(&drv_hash)?;
        let summary = summarize_derivations(&attestations)
            .into_iter()
            .next()
            .ok_or_else(|| ApiError::not_found(format!("no attestations for derivation {drv_hash}")))?;
        let grouped = (!q.summary).then(|| {
            let mut by_output: BTreeMap<String, Vec<Attestation>> = BTreeMap::new();
            for a in attestations.into_iter().filter(|a| a.drv_id == summary.drv_id) {
                by_output.entry(a.output_path.to_string()).or_default().push(a);
            }
            by_output
        });
        Ok(Json(DrvDetail {
            drv_hash: drv_hash.clone(),
            drv_path: summary.drv_id.to_string(),
            summary: DrvSummary {
                overall: summary.status,
                distinct_builders: summary.distinct_builders(),
                attestation_count: summary.attestation_count,
                outputs: summary
                    .outputs
                    .iter()
                    .map(|o| {
                        (
                            o.output_path.to_string(),
                            OutputStatus {
                                status: o.status,
                                distinct_builders: o.distinct_builders,
                                distinct_hashes: o.distinct_hashes,
                                attestation_count: o.attestation_count,
                            },
                        )
                    })
                    .collect(),
            },
            attestations: grouped,
        }))
    })
    .await
}

#[derive(Debug, Serialize)]
struct ReportEntry {
    name: String,
    description: String,
}

async fn list_reports(State(state): State<AppState>) -> ApiResult<Json<Vec<ReportEntry>>> {
    blocking(&state, |state| {
        Ok(Json(
            state
                .catalog()?
                .into_values()
                .map(|d| ReportEntry {
                    name: d.name,
                    description: d.description,
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

fn wants_html(q: &ReportQuery, headers: &HeaderMap) -> ApiResult<bool> {
    match q.format.as_deref() {
        Some("html") => Ok(true),
        Some("json") => Ok(false),
        Some(other) => Err(ApiError::bad_request(format!("unsupported format {other:?}"))),
        None => Ok(headers
            .get(header::ACCEPT)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|accept| {
                accept.contains("text/html") && !accept.contains("application/json")
            })),
    }
}

fn find_report(state: &AppState, name: &str) -> ApiResult<ReportDefinition> {
    state
        .catalog()?
        .remove(name)
        .ok_or_else(|| ApiError::not_found(format!("no report named {name:?}")))
}

async fn report(
    State(state): State<AppState>,
    Path(name): Path<String>,
    Query(q): Query<ReportQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let html = wants_html(&q, &headers)?;
    blocking(&state, move |state| {
        let defn = find_report(state, &name)?;
        let snapshot = state.store.snapshot()?;
        let computed = compute_report(&defn, &snapshot, Utc::now());
        Ok(if html {
            Html(html::render_report(&computed)).into_response()
        } else {
            Json(computed).into_response()
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    limit: Option<usize>,
}

async fn suggested(
    State(state): State<AppState>,
    Path(name): Path<String>,
    Query(q): Query<SuggestQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    blocking(&state, move |state| {
        let user = authenticate(state, &headers)?;
        let defn = find_report(state, &name)?;
        let snapshot = state.store.snapshot()?;
        let limit = q.limit.unwrap_or(DEFAULT_SUGGESTION_LIMIT).min(MAX_PAGE);
        let list = suggest_rebuilds(&defn, &snapshot, &user, limit)
            .map_err(|e| ApiError::new(StatusCode::FORBIDDEN, e.to_string()))?;
        Ok(Json(list).into_response())
    })
    .await
}

#[derive(Debug, Serialize)]
struct KeyEntry {
    name: String,
    public_key: String,
}

async fn keys(State(state): State<AppState>) -> ApiResult<Json<Vec<KeyEntry>>> {
    blocking(&state, |state| {
        Ok(Json(
            state
                .store
                .list_users()?
                .into_iter()
                .map(|u| KeyEntry {
                    name: u.user_id,
                    public_key: u.public_key.to_string(),
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Debug, Serialize)]
struct AuditBody {
    checked: u64,
    violations: Vec<AuditViolation>,
}

#[derive(Debug, Serialize)]
struct AuditViolation {
    id: u64,
    reason: String,
}

async fn audit_all(State(state): State<AppState>) -> ApiResult<Json<AuditBody>> {
    blocking(&state, |state| {
        let report = audit(state.store.as_ref())?;
        Ok(Json(AuditBody {
            checked: report.checked,
            violations: report
                .violations
                .into_iter()
                .map(|(id, reason)| AuditViolation { id, reason })
                .collect(),
        }))
    })
    .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::http::HeaderValue;

    #[test]
    fn bearer_parsing() {
        let mut h = HeaderMap::new();
        assert_eq!(bearer(&h), None);
        h.insert(header::AUTHORIZATION, HeaderValue::from_static("Bearer abc.def"));
        assert_eq!(bearer(&h).as_deref(), Some("abc.def"));
        h.insert(header::AUTHORIZATION, HeaderValue::from_static("Basic abc"));
        assert_eq!(bearer(&h), None);
    }

    #[test]
    fn html_negotiation() {
        let mut h = HeaderMap::new();
        let q = |f: Option<&str>| ReportQuery {
            format: f.map(str::to_owned),
        };
        assert!(!wants_html(&q(None), &h).unwrap());
        assert!(wants_html(&q(Some("html")), &h).unwrap());
        assert!(wants_html(&q(Some("xml")), &h).is_err());
        h.insert(header::ACCEPT, HeaderValue::from_static("text/html,*/*"));
        assert!(wants_html(&q(None), &h).unwrap());
        assert!(!wants_html(&q(Some("json")), &h).unwrap());
    }
}
