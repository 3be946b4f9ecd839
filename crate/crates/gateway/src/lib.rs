//! HTTP gateway: translation with deployed bundles, plus read access to runs
//! and a way to launch AutoBuild.
//!
//! The service root holds `models/<name>/` (deployment bundles) and
//! `runs/<run_id>/` (run directories). If `console/` exists it is served as
//! static files under `/`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/translate` | `{"models": [..], "text": [..], "beam"?, "alpha"?, "max_length"?}` |
//! | GET | `/api/models` | registry entries |
//! | GET | `/api/runs` | manifests |
//! | GET | `/api/runs/{id}` | manifest, training summary, evaluation |
//! | GET | `/api/runs/{id}/events` | server-sent events: the log so far, then live |
//! | GET | `/api/runs/{id}/green` | green report |
//! | POST | `/api/runs` | run config; starts AutoBuild in the background |

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Seek, SeekFrom};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};

use nmtbench::green::GreenReport;
use nmtbench::metrics::EvaluationReport;
use nmtbench::models::{DecodeSettings, ModelError};
use nmtbench::orchestrator::{
    autobuild, list_runs, translate_with, AutobuildOptions, BundleInfo, LoadedBundle, RunConfig, RunLayout, RunManifest, RunSpec, TrainingSummary,
};

/// How often a live event stream checks the log for new lines.
const FOLLOW_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadStatus {
    Loaded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub name: String,
    pub bundle_path: PathBuf,
    pub status: LoadStatus,
    pub error: Option<String>,
    pub decode: Option<DecodeSettings>,
    pub info: Option<BundleInfo>,
}

struct Model {
    entry: ModelRegistryEntry,
    bundle: Option<Arc<LoadedBundle>>,
}

pub struct GatewayState {
    root: PathBuf,
    models: RwLock<BTreeMap<String, Model>>,
    active: Mutex<Option<String>>,
}

impl GatewayState {
    /// Scans `root/models` for bundles.
    pub fn open(root: impl Into<PathBuf>) -> Arc<Self> {
        let state = Arc::new(Self { root: root.into(), models: RwLock::new(BTreeMap::new()), active: Mutex::new(None) });
        state.reload_models();
        state
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn reload_models(&self) {
        let mut found = BTreeMap::new();
        if let Ok(entries) = std::fs::read_dir(self.models_dir()) {
            for e in entries.filter_map(Result::ok) {
                let path = e.path();
                let Some(name) = path.file_name().and_then(|n| n.to_str()).map(String::from) else { continue };
                if !path.join("bundle.json").is_file() {
                    continue;
                }
                let model = match LoadedBundle::load(&path) {
                    Ok(b) => Model {
                        entry: ModelRegistryEntry {
                            name: name.clone(),
                            bundle_path: path,
                            status: LoadStatus::Loaded,
                            error: None,
                            decode: Some(b.decode),
                            info: Some(b.info.clone()),
                        },
                        bundle: Some(Arc::new(b)),
                    },
                    Err(err) => {
                        log::warn!("model {name}: {err}");
                        Model {
                            entry: ModelRegistryEntry {
                                name: name.clone(),
                                bundle_path: path,
                                status: LoadStatus::Failed,
                                error: Some(err.to_string()),
                                decode: None,
                                info: None,
                            },
                            bundle: None,
                        }
                    }
                };
                found.insert(name, model);
            }
        }
        *self.models.write().unwrap_or_else(|e| e.into_inner()) = found;
    }

    pub fn models(&self) -> Vec<ModelRegistryEntry> {
        self.models.read().unwrap_or_else(|e| e.into_inner()).values().map(|m| m.entry.clone()).collect()
    }

    pub fn active_run(&self) -> Option<String> {
        self.active.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn is_active(&self, id: &str) -> bool {
        self.active_run().as_deref() == Some(id)
    }
}

/// Error body: `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn validation(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", m)
    }

    fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(e.to_string()))
}

pub fn router(state: Arc<GatewayState>) -> Router {
    let console = state.root.join("console");
    let api = Router::new()
        .route("/api/translate", post(translate))
        .route("/api/models", get(models))
        .route("/api/runs", get(runs).post(launch))
        .route("/api/runs/{id}", get(run))
        .route("/api/runs/{id}/events", get(events))
        .route("/api/runs/{id}/green", get(green))
        .with_state(state);
    if console.is_dir() {
        api.fallback_service(tower_http::services::ServeDir::new(console))
    } else {
        api
    }
}

/// Serves `root` on `addr` until the process ends.
pub async fn serve(root: impl Into<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(listener, GatewayState::open(root)).await
}

pub async fn serve_listener(listener: tokio::net::TcpListener, state: Arc<GatewayState>) -> std::io::Result<()> {
    log::info!("gateway listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    /// Several names give their decode-time ensemble.
    #[serde(alias = "model")]
    pub models: OneOrMany,
    pub text: Vec<String>,
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub max_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationOut {
    pub text: String,
    pub score: f64,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub models: Vec<String>,
    pub settings: DecodeSettings,
    pub translations: Vec<TranslationOut>,
}

async fn translate(State(state): State<Arc<GatewayState>>, body: Bytes) -> ApiResult<TranslateResponse> {
    let req: TranslateRequest = parse_body(&body)?;
    let names = match req.models {
        OneOrMany::One(n) => vec![n],
        OneOrMany::Many(v) => v,
    };
    if names.is_empty() {
        return Err(ApiError::validation("name at least one model"));
    }
    let bundles = {
        let models = state.models.read().unwrap_or_else(|e| e.into_inner());
        names
            .iter()
            .map(|n| match models.get(n) {
                Some(Model { bundle: Some(b), .. }) => Ok(Arc::clone(b)),
                Some(m) => Err(ApiError::new(
                    StatusCode::NOT_FOUND,
                    "unknown_model",
                    format!("model {n} failed to load: {}", m.entry.error.clone().unwrap_or_default()),
                )),
                None => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_model", format!("no model named {n}"))),
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let mut settings = bundles[0].decode;
    settings.beam_size = req.beam.unwrap_or(settings.beam_size);
    settings.alpha = req.alpha.unwrap_or(settings.alpha);
    settings.max_length = req.max_length.unwrap_or(settings.max_length);
    if settings.beam_size == 0 || settings.max_length == 0 || !settings.alpha.is_finite() {
        return Err(ApiError::validation("beam and max_length must be at least 1 and alpha finite"));
    }
    let text = req.text;
    let out = tokio::task::spawn_blocking(move || {
        let refs: Vec<&LoadedBundle> = bundles.iter().map(|b| b.as_ref()).collect();
        translate_with(&refs, &text, &settings)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let out = out.map_err(|e| match e {
        ModelError::VocabMismatch => ApiError::new(StatusCode::CONFLICT, "vocab_mismatch", e.to_string()),
        other => ApiError::internal(other.to_string()),
    })?;
    Ok(Json(TranslateResponse {
        models: names,
        settings,
        translations: out.into_iter().map(|t| TranslationOut { text: t.text, score: t.score, log_prob: t.log_prob, finished: t.finished }).collect(),
    }))
}

async fn models(State(state): State<Arc<GatewayState>>) -> Json<Vec<ModelRegistryEntry>> {
    Json(state.models())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub manifest: RunManifest,
    pub active: bool,
}

async fn runs(State(state): State<Arc<GatewayState>>) -> ApiResult<Vec<RunSummary>> {
    let list = list_runs(&state.runs_dir()).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(list.into_iter().map(|(_, manifest)| RunSummary { active: state.is_active(&manifest.run_id), manifest }).collect()))
}

fn run_dir(state: &GatewayState, id: &str) -> Result<RunLayout, ApiError> {
    let ok = !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    let layout = RunLayout::new(state.runs_dir().join(id));
    if ok && (layout.manifest().is_file() || state.is_active(id)) {
        Ok(layout)
    } else {
        Err(ApiError::not_found(format!("no run {id}")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub manifest: RunManifest,
    pub active: bool,
    pub training: Option<TrainingSummary>,
    pub evaluation: Option<EvaluationReport>,
}

async fn run(State(state): State<Arc<GatewayState>>, UrlPath(id): UrlPath<String>) -> ApiResult<RunDetail> {
    let layout = run_dir(&state, &id)?;
    let manifest = RunManifest::load(&layout.manifest()).map_err(|_| ApiError::not_found(format!("run {id} has no manifest yet")))?;
    Ok(Json(RunDetail {
        manifest,
        active: state.is_active(&id),
        training: read_json(&layout.training_summary()),
        evaluation: read_json(&layout.evaluation_json()),
    }))
}

async fn green(State(state): State<Arc<GatewayState>>, UrlPath(id): UrlPath<String>) -> ApiResult<GreenReport> {
    let layout = run_dir(&state, &id)?;
    read_json(&layout.green_json()).map(Json).ok_or_else(|| ApiError::not_found(format!("run {id} has no green report yet")))
}

struct Tail {
    state: Arc<GatewayState>,
    id: String,
    path: PathBuf,
    offset: u64,
    partial: String,
    pending: VecDeque<String>,
    done: bool,
}

impl Tail {
    /// Moves complete new lines of the log into `pending`.
    fn read(&mut self) {
        let Ok(mut f) = std::fs::File::open(&self.path) else { return };
        let mut buf = String::new();
        if f.seek(SeekFrom::Start(self.offset)).is_err() || f.read_to_string(&mut buf).is_err() {
            return;
        }
        self.offset += buf.len() as u64;
        self.partial.push_str(&buf);
        while let Some(i) = self.partial.find('\n') {
            let line: String = self.partial.drain(..=i).collect();
            let line = line.trim();
            if !line.is_empty() {
                self.pending.push_back(line.to_string());
            }
        }
    }
}

/// Each message is one line of `logs/events.jsonl`, unchanged, with the
/// step as its id. A final `end` message follows once the run is idle.
async fn events(
    State(state): State<Arc<GatewayState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, std::convert::Infallible>>>, ApiError> {
    let layout = run_dir(&state, &id)?;
    let tail = Tail { state, id, path: layout.events(), offset: 0, partial: String::new(), pending: VecDeque::new(), done: false };
    let stream = futures::stream::unfold(tail, |mut t| async move {
        loop {
            if let Some(line) = t.pending.pop_front() {
                let step = serde_json::from_str::<serde_json::Value>(&line).ok().and_then(|v| v.get("step").and_then(|s| s.as_u64()));
                let mut ev = Event::default().event("training").data(line);
                if let Some(s) = step {
                    ev = ev.id(s.to_string());
                }
                return Some((Ok(ev), t));
            }
            if t.done {
                return None;
            }
            // Check activity before reading: once idle, one more read sees
            // everything the run wrote.
            let active = t.state.is_active(&t.id);
            t.read();
            if t.pending.is_empty() {
                if !active {
                    t.done = true;
                    return Some((Ok(Event::default().event("end").data("{}")), t));
                }
                tokio::time::sleep(FOLLOW_POLL).await;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchResponse {
    pub run_id: String,
}

/// Clears the active run when the worker thread ends, however it ends.
struct ActiveGuard(Arc<GatewayState>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }
}

/// The body is a run config as JSON. Relative paths are taken from the
/// service root; the run always goes under `runs/`.
async fn launch(State(state): State<Arc<GatewayState>>, body: Bytes) -> Result<(StatusCode, Json<LaunchResponse>), ApiError> {
    let mut config: RunConfig = parse_body(&body)?;
    config.resolve_paths(&state.root);
    config.output_root = state.runs_dir();
    config.validate().map_err(|e| ApiError::validation(e.to_string()))?;
    let run_id = config.run_name.clone();
    {
        let mut active = state.active.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(other) = active.as_ref() {
            return Err(ApiError::new(StatusCode::CONFLICT, "conflict", format!("run {other} is still active")));
        }
        *active = Some(run_id.clone());
    }
    let spec = RunSpec::from_config(config);
    let guard = ActiveGuard(Arc::clone(&state));
    std::thread::spawn(move || {
        let _guard = guard;
        match autobuild(&spec, AutobuildOptions::default()) {
            Ok(m) => log::info!("run {} finished; complete: {}", m.run_id, m.is_complete()),
            Err(e) => log::error!("run {} failed: {e}", spec.config.run_name),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(LaunchResponse { run_id })))
}
