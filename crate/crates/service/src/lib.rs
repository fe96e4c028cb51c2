//! HTTP API over the session store.
//!
//! Every handler reads the session from the store and writes it back, so the
//! service holds no state of its own beyond per-session locks. Mutations of
//! one session are serialized; an iterate request that finds the session
//! busy fails fast with `409 iteration_in_progress`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use knac::contingency::{merge_matrix, split_matrix, ContingencyMatrix};
use knac::dataset::{load_dataset, load_truth, DatasetError};
use knac::explain::{bounding_box, BoundingBox, ExplanationRule, InduceConfig, LabelKind};
use knac::matrix::Matrix;
use knac::recommend::{Recommendation, RecommendParams};
use knac::session::{Decision, MetricsEntry, Pending, Session, SessionError};
use knac::store::{new_id, valid_id, SessionStore, StoreError};
use knac::{kmeans, KMeansConfig, KnowledgeBase};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct Limits {
    pub max_upload_bytes: usize,
    pub max_rows: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_upload_bytes: 50 * 1024 * 1024, max_rows: 200_000 }
    }
}

pub struct AppState {
    store: SessionStore,
    limits: Limits,
    static_dir: Option<PathBuf>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(store: SessionStore, limits: Limits, static_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self { store, limits, static_dir, locks: Mutex::default() })
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    /// The writer lock of one session.
    pub fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_owned()).or_default().clone()
    }
}

/// Error body: `{"code": ..., "message": ...}`.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) | StoreError::InvalidId(_) => Self::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::Exists(_) => Self::new(StatusCode::CONFLICT, "session_exists", e.to_string()),
            StoreError::Dataset(e) => e.into(),
            StoreError::Session(e) => e.into(),
            StoreError::Io { .. } | StoreError::Json { .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string())
            }
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::UnknownRecommendation(_) => Self::new(StatusCode::CONFLICT, "stale_recommendation", e.to_string()),
            SessionError::DuplicateDecision(_) => Self::bad_request("duplicate_decision", e.to_string()),
            SessionError::Unclustered => Self::bad_request("unclustered", e.to_string()),
            SessionError::BadThreshold(_) | SessionError::Recommend(_) => Self::bad_request("invalid_params", e.to_string()),
            SessionError::Dataset(e) => e.into(),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        Self::bad_request("invalid_dataset", e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize)]
pub struct MatrixView<T> {
    /// Row-major values.
    pub rows: Vec<Vec<T>>,
}

impl<T: Copy> From<&Matrix<T>> for MatrixView<T> {
    fn from(m: &Matrix<T>) -> Self {
        Self { rows: m.to_rows() }
    }
}

#[derive(Debug, Serialize)]
pub struct ContingencyView {
    pub expert_labels: Vec<String>,
    pub cluster_labels: Vec<String>,
    pub counts: MatrixView<u64>,
    pub h_split: MatrixView<f64>,
    pub h_merge: MatrixView<f64>,
    pub h_sim: MatrixView<f64>,
}

#[derive(Debug, Serialize)]
pub struct RecommendationView<'a> {
    pub id: &'a str,
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub labels: &'a [String],
    pub confidence: f64,
    pub text: &'a str,
    pub compact: &'a str,
    pub recommendation: &'a Recommendation<f64>,
    pub explanations: Vec<RuleView<'a>>,
}

#[derive(Debug, Serialize)]
pub struct RuleView<'a> {
    #[serde(flatten)]
    pub rule: &'a ExplanationRule<f64>,
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct SessionView<'a> {
    pub id: &'a str,
    pub iteration: u64,
    /// Echoed back in decision posts to detect stale views.
    pub token: u64,
    pub converged: bool,
    pub kb_version: u64,
    pub params: &'a RecommendParams,
    pub contingency: ContingencyView,
    pub recommendations: Vec<RecommendationView<'a>>,
    pub staged: &'a [Decision],
    pub metrics_history: &'a [MetricsEntry],
}

fn rule_views(rules: &[ExplanationRule<f64>]) -> Vec<RuleView<'_>> {
    rules.iter().map(|r| RuleView { rule: r, text: r.to_string() }).collect()
}

fn recommendation_view(p: &Pending<f64>) -> RecommendationView<'_> {
    RecommendationView {
        id: &p.id,
        kind: match p.recommendation {
            Recommendation::Split(_) => "split",
            Recommendation::Merge(_) => "merge",
        },
        labels: &p.labels,
        confidence: p.recommendation.confidence(),
        text: &p.text,
        compact: &p.compact,
        recommendation: &p.recommendation,
        explanations: rule_views(&p.explanations),
    }
}

/// Projection of a session for the review UI.
pub fn session_view(session: &Session<f64>) -> ApiResult<SessionView<'_>> {
    let ds = &session.dataset;
    let clusters = ds.clusters().ok_or_else(|| ApiError::from(SessionError::Unclustered))?;
    let m = ContingencyMatrix::from_labels(ds.expert_labels(), &clusters.ids, ds.expert().n_labels(), clusters.n_labels());
    let h = split_matrix::<f64>(&m, session.state.params.axis_mode);
    let mm = merge_matrix::<f64>(&m);
    let s = &session.state;
    Ok(SessionView {
        id: &s.id,
        iteration: s.iteration,
        token: s.iteration,
        converged: s.converged,
        kb_version: s.kb.version,
        params: &s.params,
        contingency: ContingencyView {
            expert_labels: ds.expert().names.clone(),
            cluster_labels: clusters.names.clone(),
            counts: (&m.counts).into(),
            h_split: (&h.values).into(),
            h_merge: (&mm.values).into(),
            h_sim: (&mm.sim).into(),
        },
        recommendations: s.pending.iter().map(recommendation_view).collect(),
        staged: &s.staged,
        metrics_history: &s.metrics_history,
    })
}

#[derive(Debug, Serialize)]
pub struct RuleMasks<'a> {
    #[serde(flatten)]
    pub rule: RuleView<'a>,
    /// One mask per condition over `rows`.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Serialize)]
pub struct ExplanationView<'a> {
    pub id: &'a str,
    pub features: &'a [String],
    /// Dataset rows the rules were induced on.
    pub rows: Vec<usize>,
    pub rules: Vec<RuleMasks<'a>>,
    pub bounding_boxes: Vec<BoundingBox<f64>>,
}

pub fn explanation_view<'a>(session: &'a Session<f64>, rid: &'a str) -> ApiResult<ExplanationView<'a>> {
    let p = session.pending(rid).ok_or_else(|| ApiError::from(SessionError::UnknownRecommendation(rid.to_owned())))?;
    let ds = &session.dataset;
    let expert = ds.expert_labels();
    let (rows, boxes): (Vec<usize>, Vec<(LabelKind, usize)>) = match &p.recommendation {
        Recommendation::Split(s) => (
            (0..ds.n_rows()).filter(|&r| expert[r] == s.expert_label).collect(),
            s.candidates.iter().map(|&c| (LabelKind::Cluster, c)).collect(),
        ),
        Recommendation::Merge(m) => (
            (0..ds.n_rows()).filter(|&r| expert[r] == m.pair.0 || expert[r] == m.pair.1).collect(),
            vec![(LabelKind::Expert, m.pair.0), (LabelKind::Expert, m.pair.1)],
        ),
    };
    let slice = ds.features().select_rows(&rows);
    let internal = |e: knac::explain::ExplainError| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
    let rules = p
        .explanations
        .iter()
        .map(|r| {
            Ok(RuleMasks {
                masks: r.condition_masks(&slice, ds.feature_names()).map_err(internal)?,
                rule: RuleView { rule: r, text: r.to_string() },
            })
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let bounding_boxes = boxes
        .into_iter()
        .map(|(kind, label)| bounding_box(ds, kind, label, (0.05, 0.95)).map_err(internal))
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(ExplanationView { id: &p.id, features: ds.feature_names(), rows, rules, bounding_boxes })
}

#[derive(Debug, Serialize)]
pub struct KbView<'a> {
    pub kb: &'a KnowledgeBase,
    pub text: String,
    pub table: String,
    pub versions: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Deserialize)]
pub struct DecisionPost {
    #[serde(default)]
    pub token: Option<u64>,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Default, Deserialize)]
pub struct IteratePost {
    #[serde(default)]
    pub token: Option<u64>,
    #[serde(default = "default_actor")]
    pub actor: String,
}

fn default_actor() -> String {
    "expert".into()
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    (status, Json(body)).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn check_token(session: &Session<f64>, token: Option<u64>) -> ApiResult<()> {
    match token {
        Some(t) if t != session.state.iteration => Err(ApiError::new(
            StatusCode::CONFLICT,
            "stale_token",
            format!("token {t} is stale; session is at iteration {}", session.state.iteration),
        )),
        _ => Ok(()),
    }
}

#[derive(Default)]
struct Upload {
    id: Option<String>,
    files: HashMap<String, Vec<u8>>,
    params: Option<RecommendParams>,
    explain: Option<InduceConfig>,
    kmeans: Option<usize>,
    seed: u64,
}

async fn read_upload(mut multipart: Multipart) -> ApiResult<Upload> {
    let mut up = Upload::default();
    let bad = |code, e: &dyn std::fmt::Display| ApiError::bad_request(code, e.to_string());
    while let Some(field) = multipart.next_field().await.map_err(|e| bad("invalid_upload", &e))? {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(|e| bad("invalid_upload", &e))?;
        let text = || String::from_utf8_lossy(&bytes).trim().to_owned();
        match name.as_str() {
            "data" | "expert" | "clusters" | "truth" => {
                up.files.insert(name, bytes.to_vec());
            }
            "params" => up.params = Some(serde_json::from_slice(&bytes).map_err(|e| bad("invalid_params", &e))?),
            "explain" => up.explain = Some(serde_json::from_slice(&bytes).map_err(|e| bad("invalid_params", &e))?),
            "kmeans" => up.kmeans = Some(text().parse().map_err(|e| bad("invalid_params", &e))?),
            "seed" => up.seed = text().parse().map_err(|e| bad("invalid_params", &e))?,
            "id" => up.id = Some(text()),
            other => return Err(ApiError::bad_request("invalid_upload", format!("unexpected field {other:?}"))),
        }
    }
    Ok(up)
}

fn create_session(state: &AppState, up: Upload) -> ApiResult<String> {
    let dir = tempfile::tempdir().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let mut paths = HashMap::new();
    for (name, bytes) in &up.files {
        let path = dir.path().join(format!("{name}.csv"));
        std::fs::write(&path, bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        paths.insert(name.as_str(), path);
    }
    let (Some(data), Some(expert)) = (paths.get("data"), paths.get("expert")) else {
        return Err(ApiError::bad_request("missing_file", "both `data` and `expert` files are required"));
    };
    let mut ds = load_dataset::<f64>(data, expert, paths.get("clusters").map(PathBuf::as_path))?;
    if ds.n_rows() > state.limits.max_rows {
        return Err(ApiError::bad_request(
            "too_many_rows",
            format!("{} rows exceed the limit of {}", ds.n_rows(), state.limits.max_rows),
        ));
    }
    if let Some(truth) = paths.get("truth") {
        ds = ds.with_ground_truth(load_truth(truth)?)?;
    }
    if ds.clusters().is_none() {
        let Some(k) = up.kmeans else {
            return Err(SessionError::Unclustered.into());
        };
        let labels = kmeans(ds.features(), &KMeansConfig::new(k, up.seed))
            .map_err(|e| ApiError::bad_request("invalid_params", e.to_string()))?
            .labels;
        ds = ds.with_cluster_ids(labels)?;
    }
    let id = up.id.unwrap_or_else(new_id);
    if !valid_id(&id) {
        return Err(ApiError::bad_request("invalid_id", format!("invalid session id {id:?}")));
    }
    let session = Session::start(id.clone(), ds, up.params.unwrap_or_default(), up.explain.unwrap_or_default())?;
    state.store.create(&session)?;
    Ok(id)
}

async fn create(State(state): State<Arc<AppState>>, multipart: Multipart) -> ApiResult<Response> {
    let up = read_upload(multipart).await?;
    let id = blocking(move || create_session(&state, up)).await?;
    Ok(json_response(StatusCode::CREATED, &Created { id }))
}

async fn list(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    Ok(json_response(StatusCode::OK, &state.store.list()?))
}

async fn load(state: Arc<AppState>, id: String) -> ApiResult<Session<f64>> {
    blocking(move || Ok(state.store.load::<f64>(&id)?)).await
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = load(state, id).await?;
    Ok(json_response(StatusCode::OK, &session_view(&session)?))
}

async fn get_explanation(State(state): State<Arc<AppState>>, Path((id, rid)): Path<(String, String)>) -> ApiResult<Response> {
    let session = load(state, id).await?;
    Ok(json_response(StatusCode::OK, &explanation_view(&session, &rid)?))
}

async fn post_decisions(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<DecisionPost>,
) -> ApiResult<Response> {
    let lock = state.session_lock(&id);
    let _guard = lock.lock().await;
    let session = load(state.clone(), id).await?;
    check_token(&session, body.token)?;
    let staged = session.stage(&body.decisions)?;
    let store_state = state.clone();
    let staged = blocking(move || {
        store_state.store.save(&staged, None)?;
        Ok(staged)
    })
    .await?;
    Ok(json_response(StatusCode::OK, &staged.state.staged))
}

async fn post_iterate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<IteratePost>>,
) -> ApiResult<Response> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let lock = state.session_lock(&id);
    let Ok(_guard) = lock.try_lock() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "iteration_in_progress", format!("session {id} is being updated")));
    };
    let session = load(state.clone(), id).await?;
    check_token(&session, body.token)?;
    let next = blocking(move || {
        let (next, report) = session.iterate_staged(&body.actor, chrono::Utc::now())?;
        state.store.save(&next, Some(&report))?;
        Ok(next)
    })
    .await?;
    Ok(json_response(StatusCode::OK, &session_view(&next)?))
}

async fn get_kb(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let versions = state.store.kb_versions(&id).unwrap_or_default();
    let session = load(state, id).await?;
    let kb = &session.state.kb;
    Ok(json_response(StatusCode::OK, &KbView { kb, text: kb.render_text(), table: kb.render_table(), versions }))
}

async fn get_kb_version(State(state): State<Arc<AppState>>, Path((id, version)): Path<(String, u64)>) -> ApiResult<Response> {
    let kb: KnowledgeBase = blocking(move || Ok(state.store.kb_version(&id, version)?)).await?;
    Ok(json_response(StatusCode::OK, &kb))
}

async fn get_metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = load(state, id).await?;
    Ok(json_response(StatusCode::OK, &session.state.metrics_history))
}

pub fn router(state: Arc<AppState>) -> Router {
    let upload_limit = state.limits.max_upload_bytes;
    let api = Router::new()
        .route("/api/sessions", post(create).get(list).layer(DefaultBodyLimit::max(upload_limit)))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/recommendations/{rid}/explanation", get(get_explanation))
        .route("/api/sessions/{id}/decisions", post(post_decisions))
        .route("/api/sessions/{id}/iterate", post(post_iterate))
        .route("/api/sessions/{id}/kb", get(get_kb))
        .route("/api/sessions/{id}/kb/{version}", get(get_kb_version))
        .route("/api/sessions/{id}/metrics", get(get_metrics));
    let api = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
