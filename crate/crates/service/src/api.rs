use std::path::Path;
use std::sync::{Arc, RwLock};

use albumseq::ingest::{parse_corpus_csv, parse_corpus_json, LoadConfig};
use albumseq::nn::load_checkpoint;
use albumseq::sequencer::{
    builtin_templates, direct_orders, extract_essence, find_template, fit_to_template,
};
use albumseq::{seeded_rng, Album, Corpus, OrderingModel, ProposedOrder};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::extract::is_audio_filename;
use crate::session::SessionStore;

/// Vocabulary bound used for uploads while no checkpoint is loaded.
pub const DEFAULT_MAX_TRACKS: usize = 20;
/// Upper bound on `n` for one sequencing request.
pub const MAX_ORDERS: usize = 100;
pub const POLYLINE_POINTS: usize = 64;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    sessions: SessionStore,
    // Readers clone the Arc; a reload swaps it under the write lock.
    model: RwLock<Option<Arc<OrderingModel>>>,
    upload_limit: usize,
}

impl AppState {
    pub fn new(config: &ServiceConfig) -> Self {
        AppState {
            inner: Arc::new(Inner {
                sessions: SessionStore::new(config.session_ttl),
                model: RwLock::new(None),
                upload_limit: config.upload_limit,
            }),
        }
    }

    pub fn with_model(self, model: OrderingModel) -> Self {
        self.set_model(model);
        self
    }

    pub fn set_model(&self, model: OrderingModel) {
        *self.inner.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    pub fn load_model(&self, path: impl AsRef<Path>) -> albumseq::Result<()> {
        let model = load_checkpoint(path)?;
        self.set_model(model);
        Ok(())
    }

    pub fn model(&self) -> Option<Arc<OrderingModel>> {
        self.inner
            .model
            .read()
            .expect("model lock poisoned")
            .clone()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.inner.sessions
    }
}

pub fn router(state: AppState, config: &ServiceConfig) -> Router {
    let cors = match &config.cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    let limit = state.inner.upload_limit;
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/api/templates", get(templates))
        .route("/api/albums", post(upload_albums))
        .route("/api/sequence", post(sequence))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state);
    match &config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Compact JSON with struct-declared field order, so equal values give
/// byte-identical bodies.
pub fn json_body<T: Serialize>(value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(bytes) => (
            [(
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/json"),
            )],
            bytes,
        )
            .into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// `x` rounded to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
    model_loaded: bool,
}

async fn healthz(State(state): State<AppState>) -> Response {
    json_body(&Health {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
        model_loaded: state.model().is_some(),
    })
}

#[derive(Serialize)]
struct TemplateView {
    name: String,
    control_points: Vec<(f64, f64)>,
    polyline: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct TemplateList {
    templates: Vec<TemplateView>,
}

async fn templates() -> Response {
    let templates = builtin_templates()
        .into_iter()
        .map(|t| TemplateView {
            polyline: t.polyline(POLYLINE_POINTS),
            name: t.name,
            control_points: t.control_points,
        })
        .collect();
    json_body(&TemplateList { templates })
}

#[derive(Serialize)]
struct AlbumSummary {
    album_id: String,
    tracks: usize,
    track_ids: Vec<String>,
    titles: Vec<Option<String>>,
}

#[derive(Serialize)]
struct UploadResponse {
    session_id: String,
    dimension: usize,
    expires_in_secs: u64,
    albums: Vec<AlbumSummary>,
}

enum Format {
    Csv,
    Json,
}

fn format_for_filename(name: &str) -> Format {
    if name.to_ascii_lowercase().ends_with(".json") {
        Format::Json
    } else {
        Format::Csv
    }
}

async fn read_upload(
    state: &AppState,
    headers: &HeaderMap,
    req: Request,
) -> Result<(Bytes, Format, String), ApiError> {
    let limit = state.inner.upload_limit;
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();

    if content_type.starts_with("multipart/form-data") {
        let mut multipart = Multipart::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        while let Some(field) = multipart
            .next_field()
            .await
            .map_err(|e| multipart_error(e, limit))?
        {
            let filename = field.file_name().map(str::to_string);
            if filename.is_none() && field.name() != Some("file") {
                continue;
            }
            let filename = filename.unwrap_or_else(|| "upload.csv".to_string());
            if is_audio_filename(&filename) {
                return Err(ApiError::new(
                    StatusCode::UNSUPPORTED_MEDIA_TYPE,
                    format!("{filename}: raw audio is not supported; upload a feature table (CSV or JSON)"),
                ));
            }
            let bytes = field.bytes().await.map_err(|e| multipart_error(e, limit))?;
            return Ok((bytes, format_for_filename(&filename), filename));
        }
        return Err(ApiError::bad_request("multipart upload has no file field"));
    }

    let bytes = Bytes::from_request(req, state).await.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::too_large(limit)
        } else {
            ApiError::new(e.status(), e.body_text())
        }
    })?;
    let format = if content_type.starts_with("application/json") {
        Format::Json
    } else {
        Format::Csv
    };
    Ok((bytes, format, "upload".to_string()))
}

fn multipart_error(e: axum::extract::multipart::MultipartError, limit: usize) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::too_large(limit)
    } else {
        ApiError::new(e.status(), e.body_text())
    }
}

/// Uploads are validated with the ingest rules but never silently filtered:
/// an album the model cannot sequence is a client error.
fn validate_for_inference(corpus: &Corpus, max_tracks: usize) -> Result<(), ApiError> {
    if corpus.is_empty() {
        return Err(ApiError::bad_request("upload contains no albums"));
    }
    for album in &corpus.albums {
        let m = album.len();
        if m < 2 {
            return Err(ApiError::bad_request(format!(
                "album {:?} has {m} track; sequencing needs at least 2",
                album.album_id
            )));
        }
        if m > max_tracks {
            return Err(ApiError::bad_request(format!(
                "album {:?} has {m} tracks; at most {max_tracks} are supported",
                album.album_id
            )));
        }
    }
    Ok(())
}

async fn upload_albums(
    State(state): State<AppState>,
    headers: HeaderMap,
    req: Request,
) -> Result<Response, ApiError> {
    if let Some(len) = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
    {
        if len > state.inner.upload_limit {
            return Err(ApiError::too_large(state.inner.upload_limit));
        }
    }
    let (bytes, format, source) = read_upload(&state, &headers, req).await?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| ApiError::bad_request(format!("{source}: not UTF-8 text: {e}")))?;

    let model = state.model();
    let config = LoadConfig {
        dimension: model.as_ref().map(|m| m.hyper().input_dim),
        min_tracks: 0,
        max_tracks: usize::MAX,
    };
    let loaded = match format {
        Format::Csv => parse_corpus_csv(text, &source, &config),
        Format::Json => parse_corpus_json(text, &source, &config),
    }
    .map_err(ApiError::from_ingest)?;
    let max_tracks = model.as_ref().map_or(DEFAULT_MAX_TRACKS, |m| m.max_len());
    validate_for_inference(&loaded.corpus, max_tracks)?;

    let albums = loaded
        .corpus
        .albums
        .iter()
        .map(|a| AlbumSummary {
            album_id: a.album_id.clone(),
            tracks: a.len(),
            track_ids: a.tracks.iter().map(|t| t.track_id.clone()).collect(),
            titles: a.tracks.iter().map(|t| t.display_title.clone()).collect(),
        })
        .collect();
    let dimension = loaded.corpus.dimension;
    let session_id = state.sessions().create(loaded.corpus);
    tracing::info!(session = %session_id, "stored upload");
    Ok(json_body(&UploadResponse {
        session_id,
        dimension,
        expires_in_secs: state.sessions().ttl().as_secs(),
        albums,
    }))
}

#[derive(Debug, Deserialize)]
struct SequenceRequest {
    session_id: String,
    album_id: String,
    method: String,
    #[serde(default)]
    template_name: Option<String>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct OrderView {
    order: Vec<usize>,
    track_ids: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    template: Option<String>,
    narrative_values: Vec<f64>,
}

#[derive(Serialize)]
struct SequenceResponse {
    album_id: String,
    method: &'static str,
    seed: u64,
    /// Fewer distinct orders than requested were found.
    shortfall: bool,
    orders: Vec<OrderView>,
}

fn view(album: &Album, p: ProposedOrder) -> OrderView {
    let order = p.order.into_vec();
    OrderView {
        track_ids: order
            .iter()
            .map(|&i| album.tracks[i].track_id.clone())
            .collect(),
        order,
        log_likelihood: p.log_likelihood,
        fit_cost: p.fit_cost,
        template: p.template,
        narrative_values: p
            .narrative_values
            .values()
            .iter()
            .map(|&v| round_sig6(v))
            .collect(),
    }
}

fn template_names() -> Vec<String> {
    builtin_templates().into_iter().map(|t| t.name).collect()
}

enum Plan {
    Direct { n: usize },
    Template { name: Option<String> },
}

async fn sequence(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SequenceRequest = serde_json::from_slice(&body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ApiError::unprocessable(e.to_string()),
        _ => ApiError::bad_request(format!("malformed JSON: {e}")),
    })?;
    let plan = match req.method.as_str() {
        "direct" => {
            let n = req.n.unwrap_or(1);
            if !(1..=MAX_ORDERS).contains(&n) {
                return Err(ApiError::unprocessable(format!(
                    "n must be between 1 and {MAX_ORDERS}"
                )));
            }
            Plan::Direct { n }
        }
        "template" => {
            if let Some(name) = &req.template_name {
                if find_template(name).is_none() {
                    return Err(
                        ApiError::unprocessable(format!("unknown template {name:?}"))
                            .with_valid(template_names()),
                    );
                }
            }
            Plan::Template {
                name: req.template_name.clone(),
            }
        }
        other => {
            return Err(ApiError::unprocessable(format!("unknown method {other:?}"))
                .with_valid(vec!["direct".into(), "template".into()]))
        }
    };
    let corpus = state
        .sessions()
        .get(&req.session_id)
        .ok_or_else(|| ApiError::not_found("unknown or expired session"))?;
    if corpus.album(&req.album_id).is_none() {
        return Err(ApiError::not_found(format!(
            "no album {:?} in this session",
            req.album_id
        )));
    }
    let model = state
        .model()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no model checkpoint is loaded"))?;
    let seed = req.seed.unwrap_or(0);
    let album_id = req.album_id;

    let response = tokio::task::spawn_blocking(move || -> Result<SequenceResponse, ApiError> {
        let album = corpus.album(&album_id).expect("checked above");
        let model_err = |e: albumseq::Error| ApiError::unprocessable(e.to_string());
        let (method, shortfall, orders) = match plan {
            Plan::Direct { n } => {
                let top =
                    direct_orders(&model, album, n, &mut seeded_rng(seed)).map_err(model_err)?;
                ("direct", top.shortfall, top.orders)
            }
            Plan::Template { name } => {
                let essence = extract_essence(&model, album).map_err(model_err)?;
                let templates = match name {
                    Some(n) => vec![find_template(&n).expect("checked above")],
                    None => builtin_templates(),
                };
                let fits = templates
                    .iter()
                    .map(|t| fit_to_template(&essence, t, album.len()))
                    .collect::<albumseq::Result<Vec<_>>>()
                    .map_err(model_err)?;
                ("template", false, fits)
            }
        };
        Ok(SequenceResponse {
            method,
            seed,
            shortfall,
            orders: orders.into_iter().map(|p| view(album, p)).collect(),
            album_id,
        })
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(json_body(&response))
}
