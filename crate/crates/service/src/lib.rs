//! HTTP front end for dual-mode ranking: ranks an instruction against an
//! environment's images, serves the images, and records which tiles users
//! pick from each ranking.
//!
//! | Route | Purpose |
//! |-------|---------|
//! | `POST /rank` | rank an instruction, open a session |
//! | `POST /select` | record the pick for one mode of a session |
//! | `GET /sessions/{id}` | a session with its selections |
//! | `GET /images/{id}` | PNG of a dataset image |
//! | `GET /metrics/selections` | selection rates per mode |
//! | `GET /environments` | environment ids and pool sizes |
//! | `GET /health` | liveness and model status |

mod session;

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dm2rm::data::DatasetBundle;
use dm2rm::encoders::Providers;
use dm2rm::features::dataset_image_features;
use dm2rm::lang::LangPipeline;
use dm2rm::model::RankerModel;
use dm2rm::retrieval::{dual_rank_encoded, Candidate, CandidateSet};
use dm2rm::ModeToken;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use session::{
    aggregate, replay, Aggregate, EventLog, Phrases, PresentedImage, QuerySession, SelectionEvent,
    SelectionMetrics, Selections, SELECTIONS_LOG, SESSIONS_LOG,
};

pub const DEFAULT_TOPK: usize = 10;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("unknown environment {0}")]
    UnknownEnvironment(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("image {image_id} was not presented in the {mode} list of session {query_id}")]
    NotPresented {
        query_id: String,
        mode: ModeToken,
        image_id: String,
    },
    #[error("no route for {0}")]
    NoRoute(String),
    #[error("no model loaded")]
    ModelNotLoaded,
    #[error("selection log: {0}")]
    Log(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::UnknownEnvironment(_)
            | Self::UnknownSession(_)
            | Self::UnknownImage(_)
            | Self::NoRoute(_) => StatusCode::NOT_FOUND,
            Self::NotPresented { .. } => StatusCode::CONFLICT,
            Self::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            Self::Log(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// JSON body of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: u16,
    pub error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() && status != StatusCode::SERVICE_UNAVAILABLE {
            log::error!("{self}");
        }
        let body = ErrorBody {
            status: status.as_u16(),
            error: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

fn rejection(e: JsonRejection) -> ServiceError {
    match e.status() {
        StatusCode::UNPROCESSABLE_ENTITY => ServiceError::Unprocessable(e.body_text()),
        _ => ServiceError::BadRequest(e.body_text()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub topk: usize,
    /// Directory of the append-only session and selection logs. Without
    /// one, sessions live in memory only.
    pub log_dir: Option<PathBuf>,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            topk: DEFAULT_TOPK,
            log_dir: None,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRequest {
    pub instruction: String,
    pub environment_id: String,
    #[serde(default)]
    pub topk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectRequest {
    pub query_id: String,
    pub mode: ModeToken,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectAck {
    pub event: SelectionEvent,
    /// Whether this replaced an earlier pick for the same mode.
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub environment_id: String,
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub environments: usize,
    pub sessions: usize,
}

/// Everything a request handler reads. The model is an immutable snapshot;
/// session mutations and log appends happen under one lock.
pub struct AppState {
    model: Option<Arc<RankerModel>>,
    dataset: Arc<DatasetBundle>,
    providers: Providers,
    lang: LangPipeline,
    config: ServiceConfig,
    pools: RwLock<HashMap<String, Arc<CandidateSet>>>,
    sessions: RwLock<BTreeMap<String, QuerySession>>,
    log: Mutex<Option<EventLog>>,
}

impl AppState {
    /// Replays any existing logs in `config.log_dir` before accepting writes.
    pub fn new(
        dataset: DatasetBundle,
        model: Option<RankerModel>,
        providers: Providers,
        lang: LangPipeline,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        if config.topk == 0 {
            return Err(ServiceError::BadRequest("topk must be at least 1".into()));
        }
        let (sessions, log) = match &config.log_dir {
            Some(dir) => (replay(dir)?, Some(EventLog::open(dir)?)),
            None => (BTreeMap::new(), None),
        };
        Ok(Self {
            model: model.map(Arc::new),
            dataset: Arc::new(dataset),
            providers,
            lang,
            config,
            pools: RwLock::new(HashMap::new()),
            sessions: RwLock::new(sessions),
            log: Mutex::new(log),
        })
    }

    pub fn metrics(&self) -> SelectionMetrics {
        aggregate(self.sessions.read().expect("sessions lock").values())
    }

    pub fn session(&self, id: &str) -> Option<QuerySession> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
    }

    fn pool(
        &self,
        model: &RankerModel,
        environment_id: &str,
    ) -> Result<Arc<CandidateSet>, ServiceError> {
        if let Some(p) = self.pools.read().expect("pools lock").get(environment_id) {
            return Ok(p.clone());
        }
        let records = self.dataset.environment_images(environment_id);
        if records.is_empty() {
            return Err(ServiceError::UnknownEnvironment(environment_id.to_string()));
        }
        let candidates = records
            .iter()
            .map(|r| {
                Ok(Candidate {
                    image_id: r.id.clone(),
                    environment_id: r.environment_id.clone(),
                    features: dataset_image_features(&self.dataset, &r.id, &self.providers)
                        .map_err(|e| ServiceError::Internal(e.to_string()))?,
                })
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        let set = Arc::new(
            CandidateSet::encode(model, &candidates)
                .map_err(|e| ServiceError::Internal(e.to_string()))?,
        );
        self.pools
            .write()
            .expect("pools lock")
            .insert(environment_id.to_string(), set.clone());
        Ok(set)
    }

    /// Runs the language pipeline and both rankings; the session is stored
    /// and logged before it is returned.
    pub fn rank(&self, req: &RankRequest) -> Result<QuerySession, ServiceError> {
        let instruction = req.instruction.trim();
        if instruction.is_empty() {
            return Err(ServiceError::Unprocessable(
                "instruction must not be empty".into(),
            ));
        }
        let topk = req.topk.unwrap_or(self.config.topk);
        if topk == 0 {
            return Err(ServiceError::Unprocessable(
                "topk must be at least 1".into(),
            ));
        }
        if !self
            .dataset
            .environments()
            .contains(req.environment_id.as_str())
        {
            return Err(ServiceError::UnknownEnvironment(req.environment_id.clone()));
        }
        let model = self.model.as_ref().ok_or(ServiceError::ModelNotLoaded)?;
        let query_id = uuid::Uuid::new_v4().simple().to_string();
        let record = self
            .lang
            .process(&query_id, instruction, model.config.max_noun_phrases)
            .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        let pool = self.pool(model, &req.environment_id)?;
        let (t, r) =
            dual_rank_encoded(model, &record, &pool, &self.providers).map_err(|e| match e {
                dm2rm::retrieval::RetrievalError::Model(m) => {
                    ServiceError::Unprocessable(m.to_string())
                }
                other => ServiceError::Internal(other.to_string()),
            })?;
        let missing =
            |f: &str| ServiceError::Internal(format!("language pipeline returned no {f}"));
        let session = QuerySession {
            query_id: query_id.clone(),
            instruction: instruction.to_string(),
            paraphrase: record
                .paraphrase
                .clone()
                .ok_or_else(|| missing("paraphrase"))?,
            phrases: Phrases {
                target: record
                    .target_phrase
                    .clone()
                    .ok_or_else(|| missing("target phrase"))?,
                receptacle: record
                    .receptacle_phrase
                    .clone()
                    .ok_or_else(|| missing("receptacle phrase"))?,
                noun_phrases: record.noun_phrases.clone(),
            },
            environment_id: req.environment_id.clone(),
            topk,
            candidate_count: pool.len(),
            target: session::present(&t, topk),
            receptacle: session::present(&r, topk),
            selections: Selections::default(),
            created_at: now_ms(),
        };
        let mut log = self.log.lock().expect("log lock");
        if let Some(log) = log.as_mut() {
            log.append_session(&session)?;
        }
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(query_id, session.clone());
        Ok(session)
    }

    pub fn select(&self, req: &SelectRequest) -> Result<SelectAck, ServiceError> {
        let mut log = self.log.lock().expect("log lock");
        let mut sessions = self.sessions.write().expect("sessions lock");
        let session = sessions
            .get_mut(&req.query_id)
            .ok_or_else(|| ServiceError::UnknownSession(req.query_id.clone()))?;
        let presented = session
            .list(req.mode)
            .iter()
            .find(|p| p.image_id == req.image_id)
            .ok_or_else(|| ServiceError::NotPresented {
                query_id: req.query_id.clone(),
                mode: req.mode,
                image_id: req.image_id.clone(),
            })?;
        let event = SelectionEvent {
            query_id: req.query_id.clone(),
            mode: req.mode,
            selected_image_id: req.image_id.clone(),
            rank_of_selection: presented.rank,
            timestamp: now_ms(),
        };
        session.check(&event)?;
        if let Some(log) = log.as_mut() {
            log.append_selection(&event)?;
        }
        let replaced = session.selections.get(req.mode).is_some();
        session.apply(event.clone())?;
        Ok(SelectAck { event, replaced })
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        if self.dataset.image(id).is_none() {
            return Err(ServiceError::UnknownImage(id.to_string()));
        }
        let img = self
            .dataset
            .load_image(id)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let buffer = image::RgbImage::from_raw(img.width(), img.height(), img.data().to_vec())
            .ok_or_else(|| {
                ServiceError::Internal(format!("image {id} has inconsistent dimensions"))
            })?;
        let mut out = Cursor::new(Vec::new());
        buffer
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn environments(&self) -> Vec<EnvironmentInfo> {
        self.dataset
            .environments()
            .into_iter()
            .map(|e| EnvironmentInfo {
                environment_id: e.to_string(),
                image_count: self.dataset.environment_images(e).len(),
            })
            .collect()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

type Shared = State<Arc<AppState>>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn rank_handler(
    State(state): Shared,
    body: Result<Json<RankRequest>, JsonRejection>,
) -> Result<Json<QuerySession>, ServiceError> {
    let Json(req) = body.map_err(rejection)?;
    Ok(Json(blocking(move || state.rank(&req)).await?))
}

async fn select_handler(
    State(state): Shared,
    body: Result<Json<SelectRequest>, JsonRejection>,
) -> Result<Json<SelectAck>, ServiceError> {
    let Json(req) = body.map_err(rejection)?;
    Ok(Json(blocking(move || state.select(&req)).await?))
}

async fn session_handler(
    State(state): Shared,
    Path(id): Path<String>,
) -> Result<Json<QuerySession>, ServiceError> {
    state
        .session(&id)
        .map(Json)
        .ok_or(ServiceError::UnknownSession(id))
}

async fn image_handler(
    State(state): Shared,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let bytes = blocking(move || state.image_png(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn metrics_handler(State(state): Shared) -> Json<SelectionMetrics> {
    Json(state.metrics())
}

async fn environments_handler(State(state): Shared) -> Json<Vec<EnvironmentInfo>> {
    Json(state.environments())
}

async fn health_handler(State(state): Shared) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_loaded: state.model.is_some(),
        environments: state.dataset.environments().len(),
        sessions: state.sessions.read().expect("sessions lock").len(),
    })
}

async fn no_route(uri: Uri) -> ServiceError {
    ServiceError::NoRoute(uri.path().to_string())
}

fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>) -> Router {
    let layer = cors(&state.config.cors_origins);
    Router::new()
        .route("/rank", post(rank_handler))
        .route("/select", post(select_handler))
        .route("/sessions/{id}", get(session_handler))
        .route("/images/{id}", get(image_handler))
        .route("/metrics/selections", get(metrics_handler))
        .route("/environments", get(environments_handler))
        .route("/health", get(health_handler))
        .fallback(no_route)
        .layer(layer)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
