use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use lens_core::backends::mock::stable_seed;
use lens_core::evaluation::SupportSet;
use lens_core::prompting::{TaskKind, Truncation};
use lens_core::reasoning::Answer;
use lens_core::vision::{ModuleConfig, VisualDescription};
use lens_core::{ImageRef, ImageSource, Pipeline};

use crate::commands::{draw_shots, load_support, module_config, task_spec};
use crate::config::LensConfig;
use crate::error::CliError;

const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

struct Session {
    image_id: String,
    modules: ModuleConfig,
    description: VisualDescription,
    task: Option<TaskKind>,
    seed: u64,
    turns: Vec<(String, String)>,
    last_used: Instant,
}

/// Shared state of the service. Descriptions are computed once per session
/// and reused by every question asked about it.
pub struct AppState {
    pipeline: Arc<Pipeline>,
    config: LensConfig,
    ttl: Duration,
    sessions: Mutex<HashMap<Uuid, Session>>,
    supports: Mutex<HashMap<String, Arc<SupportSet>>>,
    describe_count: AtomicUsize,
}

impl AppState {
    pub fn new(config: LensConfig) -> Result<Arc<Self>, CliError> {
        let pipeline = config.pipeline()?;
        Ok(Self::with_pipeline(pipeline, config))
    }

    pub fn with_pipeline(pipeline: Pipeline, config: LensConfig) -> Arc<Self> {
        Arc::new(Self {
            pipeline: Arc::new(pipeline),
            ttl: Duration::from_secs(config.server.session_ttl_secs),
            config,
            sessions: Mutex::new(HashMap::new()),
            supports: Mutex::new(HashMap::new()),
            describe_count: AtomicUsize::new(0),
        })
    }

    /// Number of image descriptions computed since start.
    pub fn descriptions_computed(&self) -> usize {
        self.describe_count.load(Ordering::Relaxed)
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, HashMap<Uuid, Session>> {
        self.sessions.lock().expect("session lock")
    }

    fn purge_expired(&self) {
        let ttl = self.ttl;
        self.sessions().retain(|_, s| s.last_used.elapsed() <= ttl);
    }

    fn support_for(&self, mc: &ModuleConfig) -> Result<Arc<SupportSet>, ApiError> {
        let path: &PathBuf = self.config.server.support.as_ref().ok_or_else(|| {
            ApiError::bad("few-shot requests need a support manifest in the server configuration")
        })?;
        let key = mc.hash();
        if let Some(s) = self.supports.lock().expect("support lock").get(&key) {
            return Ok(s.clone());
        }
        let set = Arc::new(load_support(
            &self.pipeline,
            &self.config.resolve(path),
            mc,
        )?);
        self.supports
            .lock()
            .expect("support lock")
            .insert(key, set.clone());
        Ok(set)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match &e {
            CliError::Usage(_) | CliError::Config(_) | CliError::Image(_) => {
                StatusCode::BAD_REQUEST
            }
            CliError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            CliError::Backend(_) | CliError::FailureRate(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.message }));
        (self.status, body).into_response()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescribeRequest {
    /// Base64-encoded image bytes.
    pub image_base64: Option<String>,
    /// Image URI such as mock://cat_001; the id is the part after `://`.
    pub uri: Option<String>,
    pub image_id: Option<String>,
    /// Comma-separated module list.
    pub modules: Option<String>,
    pub task: Option<TaskKind>,
    pub ocr_text: Option<String>,
    pub num_captions: Option<u32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub session_id: Uuid,
    pub image_id: String,
    pub description: VisualDescription,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub session_id: Uuid,
    pub question: Option<String>,
    pub task: Option<TaskKind>,
    pub answer_space: Option<Vec<String>>,
    #[serde(default)]
    pub shots: usize,
    /// Include the rendered prompt and truncation in the response.
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_score: Option<f64>,
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<Truncation>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub backends: BTreeMap<String, String>,
    pub sessions: usize,
    pub descriptions_computed: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/describe", post(describe))
        .route("/v1/ask", post(ask))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

pub async fn serve(config: LensConfig) -> Result<(), CliError> {
    let addr = config.server.addr.clone();
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| CliError::Config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Config(format!("server error: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
    })?
}

async fn read_multipart(mut mp: Multipart) -> Result<DescribeRequest, ApiError> {
    let mut req = DescribeRequest::default();
    let mut file_stem = None;
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::bad(e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        if name == "image" {
            file_stem = field
                .file_name()
                .and_then(|f| std::path::Path::new(f).file_stem())
                .map(|s| s.to_string_lossy().into_owned());
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::bad(e.body_text()))?;
            req.image_base64 = Some(base64::engine::general_purpose::STANDARD.encode(bytes));
            continue;
        }
        let text = field
            .text()
            .await
            .map_err(|e| ApiError::bad(e.body_text()))?;
        match name.as_str() {
            "uri" => req.uri = Some(text),
            "image_id" => req.image_id = Some(text),
            "modules" => req.modules = Some(text),
            "task" => req.task = Some(text.parse().map_err(ApiError::bad)?),
            "ocr_text" => req.ocr_text = Some(text),
            "num_captions" => {
                req.num_captions = Some(
                    text.trim()
                        .parse()
                        .map_err(|_| ApiError::bad("num_captions must be an integer"))?,
                )
            }
            "seed" => {
                req.seed = Some(
                    text.trim()
                        .parse()
                        .map_err(|_| ApiError::bad("seed must be an integer"))?,
                )
            }
            other => return Err(ApiError::bad(format!("unknown field {other:?}"))),
        }
    }
    if req.image_id.is_none() {
        req.image_id = file_stem;
    }
    Ok(req)
}

fn image_ref(req: &DescribeRequest) -> Result<ImageRef, ApiError> {
    match (&req.image_base64, &req.uri) {
        (Some(b64), None) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad(format!("image_base64: {e}")))?;
            if bytes.is_empty() {
                return Err(ApiError::bad("image is empty"));
            }
            // Uploads without an id are named after their content.
            let id = match &req.image_id {
                Some(id) => id.clone(),
                None => format!("upload-{:016x}", stable_seed(&[b64.trim()])),
            };
            Ok(ImageRef::from_bytes(id, bytes))
        }
        (None, Some(uri)) => {
            let id = uri
                .split_once("://")
                .map(|(_, id)| id)
                .filter(|id| !id.is_empty())
                .ok_or_else(|| ApiError::bad(format!("uri {uri:?} is not scheme://id")))?;
            let id = req.image_id.clone().unwrap_or_else(|| id.to_string());
            Ok(ImageRef::new(id, ImageSource::Uri(uri.clone())))
        }
        _ => Err(ApiError::bad(
            "give exactly one of image_base64 (or a multipart image) and uri",
        )),
    }
}

async fn describe(
    State(state): State<Arc<AppState>>,
    req: Request,
) -> Result<Json<DescribeResponse>, ApiError> {
    let is_multipart = req
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("multipart/form-data"));
    let body = if is_multipart {
        let mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad(e.body_text()))?;
        read_multipart(mp).await?
    } else {
        let Json(b) = Json::<DescribeRequest>::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad(e.body_text()))?;
        b
    };
    let image = image_ref(&body)?;
    let seed = body.seed.unwrap_or(0);
    let modules = module_config(
        &state.config,
        body.modules.as_deref(),
        body.task,
        body.ocr_text.is_some(),
        body.num_captions,
        seed,
    )?;

    let st = state.clone();
    let mc = modules.clone();
    let ocr = body.ocr_text.clone();
    let img = image.clone();
    let description = blocking(move || {
        st.describe_count.fetch_add(1, Ordering::Relaxed);
        st.pipeline
            .describe(&img, &mc, ocr.as_deref())
            .map_err(|e| ApiError::from(CliError::from(e)))
    })
    .await?;

    state.purge_expired();
    let session_id = Uuid::new_v4();
    state.sessions().insert(
        session_id,
        Session {
            image_id: image.id.clone(),
            modules,
            description: description.clone(),
            task: body.task,
            seed,
            turns: Vec::new(),
            last_used: Instant::now(),
        },
    );
    tracing::debug!(%session_id, image = %image.id, "described");
    Ok(Json(DescribeResponse {
        session_id,
        image_id: image.id,
        description,
    }))
}

async fn ask(
    State(state): State<Arc<AppState>>,
    body: Result<Json<AskRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<AskResponse>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad(e.body_text()))?;
    let (image_id, modules, description, session_task, seed) = {
        let mut sessions = state.sessions();
        let expired = match sessions.get(&body.session_id) {
            None => return Err(ApiError::not_found("unknown session")),
            Some(s) => s.last_used.elapsed() > state.ttl,
        };
        if expired {
            sessions.remove(&body.session_id);
            return Err(ApiError::not_found("session expired"));
        }
        let s = sessions.get_mut(&body.session_id).expect("checked above");
        s.last_used = Instant::now();
        (
            s.image_id.clone(),
            s.modules.clone(),
            s.description.clone(),
            s.task,
            s.seed,
        )
    };
    let task = task_spec(
        body.task.or(session_task),
        body.question.as_deref(),
        body.answer_space.clone(),
    )?;
    task.question(body.question.as_deref())
        .map_err(|e| ApiError::bad(e.to_string()))?;

    let st = state.clone();
    let question = body.question.clone();
    let shots_wanted = body.shots;
    let outcome = blocking(move || {
        let shots = if shots_wanted > 0 {
            let support = st.support_for(&modules)?;
            draw_shots(&support, &image_id, shots_wanted, seed, &task, &modules)?
        } else {
            Vec::new()
        };
        st.pipeline
            .ask(&description, &task, question.as_deref(), &shots)
            .map_err(|e| ApiError::from(CliError::from(e)))
    })
    .await?;

    let turn = {
        let mut sessions = state.sessions();
        match sessions.get_mut(&body.session_id) {
            Some(s) => {
                s.turns.push((
                    body.question.clone().unwrap_or_default(),
                    outcome.answer.text.clone(),
                ));
                s.turns.len()
            }
            None => 0,
        }
    };
    let Answer {
        text,
        candidate_scores,
        positive_score,
    } = outcome.answer;
    Ok(Json(AskResponse {
        answer: text,
        candidate_scores,
        positive_score,
        turn,
        prompt: body.trace.then_some(outcome.prompt.rendered),
        truncation: body.trace.then_some(outcome.truncation),
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    state.purge_expired();
    Json(HealthResponse {
        status: "ok".into(),
        backends: state.pipeline.identities(),
        sessions: state.sessions().len(),
        descriptions_computed: state.descriptions_computed(),
    })
}
