//! JSON-over-HTTP inference service.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use creative_morph::bundle::ModelBundle;
use creative_morph::fixtures::{load_fixtures, FixtureSample, FixtureSet};
use creative_morph::geometry::obj_string;
use creative_morph::grid::encode_png;
use creative_morph::pipeline::{transfer, TransferSpec};
use creative_morph::texture_style::Method;

/// Number of generated meshes kept for `/api/mesh`.
pub const MESH_CACHE_CAPACITY: usize = 256;
pub const THUMBNAIL_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub source_id: String,
    pub target_id: String,
    pub alpha: f64,
    pub switch_gates: [bool; 4],
    pub texture_method: Method,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field_error(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.to_string(),
        message: message.into(),
    }
}

const REQUEST_FIELDS: [&str; 6] = [
    "source_id",
    "target_id",
    "alpha",
    "switch_gates",
    "texture_method",
    "seed",
];

impl TransferRequest {
    /// Validates a decoded JSON body, collecting every field problem.
    /// `switch_gates` defaults to all false, `texture_method` to sadain and
    /// `seed` to 0.
    pub fn from_json(value: &Value) -> Result<Self, Vec<FieldError>> {
        let Some(obj) = value.as_object() else {
            return Err(vec![field_error("body", "expected a JSON object")]);
        };
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !REQUEST_FIELDS.contains(&key.as_str()) {
                errors.push(field_error(key, "unknown field"));
            }
        }
        let mut id = |name: &str| match obj.get(name) {
            Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
            Some(Value::String(_)) => {
                errors.push(field_error(name, "must not be empty"));
                None
            }
            Some(_) => {
                errors.push(field_error(name, "must be a string"));
                None
            }
            None => {
                errors.push(field_error(name, "is required"));
                None
            }
        };
        let source_id = id("source_id");
        let target_id = id("target_id");
        let alpha = match obj.get("alpha") {
            Some(Value::Number(n)) => match n.as_f64() {
                Some(a) if a.is_finite() && a.abs() <= 1.0 => Some(a),
                _ => {
                    errors.push(field_error("alpha", "must lie in [-1, 1]"));
                    None
                }
            },
            Some(_) => {
                errors.push(field_error("alpha", "must be a number"));
                None
            }
            None => {
                errors.push(field_error("alpha", "is required"));
                None
            }
        };
        let switch_gates = match obj.get("switch_gates") {
            None => Some([false; 4]),
            Some(Value::Array(items)) if items.len() == 4 && items.iter().all(Value::is_boolean) => {
                Some(std::array::from_fn(|i| items[i].as_bool().unwrap_or(false)))
            }
            Some(_) => {
                errors.push(field_error(
                    "switch_gates",
                    "must be an array of 4 booleans (head, neck, belly, back)",
                ));
                None
            }
        };
        let texture_method = match obj.get("texture_method") {
            None => Some(Method::Sadain),
            Some(Value::String(s)) => match s.parse::<Method>() {
                Ok(m) => Some(m),
                Err(_) => {
                    errors.push(field_error("texture_method", "must be one of sadain, slst, sefdm"));
                    None
                }
            },
            Some(_) => {
                errors.push(field_error("texture_method", "must be a string"));
                None
            }
        };
        let seed = match obj.get("seed") {
            None | Some(Value::Null) => Some(0),
            Some(v) => match v.as_u64() {
                Some(s) => Some(s),
                None => {
                    errors.push(field_error("seed", "must be a non-negative integer"));
                    None
                }
            },
        };
        match (source_id, target_id, alpha, switch_gates, texture_method, seed) {
            (Some(source_id), Some(target_id), Some(alpha), Some(switch_gates), Some(texture_method), Some(seed))
                if errors.is_empty() =>
            {
                Ok(Self {
                    source_id,
                    target_id,
                    alpha,
                    switch_gates,
                    texture_method,
                    seed,
                })
            }
            _ => Err(errors),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn job_id(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResponse {
    pub job_id: String,
    pub source_id: String,
    pub target_id: String,
    pub render_png_b64: String,
    pub texture_png_b64: String,
    pub mesh_url: String,
    pub alpha: f64,
    pub gates: [bool; 4],
    pub method: Method,
    pub seed: u64,
    pub timing_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub id: String,
    pub thumbnail_url: String,
}

#[derive(Default)]
struct MeshCache {
    order: VecDeque<String>,
    objs: HashMap<String, Arc<String>>,
}

impl MeshCache {
    fn insert(&mut self, id: String, obj: Arc<String>) {
        if self.objs.insert(id.clone(), obj).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > MESH_CACHE_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.objs.remove(&old);
            }
        }
    }
}

/// Read-only model and assets shared by all requests.
pub struct ServiceState {
    pub bundle: ModelBundle,
    pub assets: FixtureSet,
    pub checkpoint: String,
    meshes: Mutex<MeshCache>,
}

impl ServiceState {
    pub fn new(bundle: ModelBundle, assets: FixtureSet, checkpoint: String) -> Self {
        Self {
            bundle,
            assets,
            checkpoint,
            meshes: Mutex::new(MeshCache::default()),
        }
    }

    pub fn load(checkpoint: &Path, assets: &Path) -> creative_morph::Result<Self> {
        let bundle = ModelBundle::load(checkpoint, None)?;
        let assets = load_fixtures(assets)?;
        Ok(Self::new(bundle, assets, checkpoint.display().to_string()))
    }

    fn asset(&self, id: &str) -> Option<&FixtureSample> {
        self.assets.get(id)
    }

    /// Runs one transfer; the payload depends only on the request apart from
    /// `timing_ms`.
    pub fn run_transfer(&self, req: &TransferRequest) -> creative_morph::Result<TransferResponse> {
        let start = Instant::now();
        let missing = || creative_morph::Error::Invalid("asset vanished".into());
        let source = self.asset(&req.source_id).ok_or_else(missing)?;
        let target = self.asset(&req.target_id).ok_or_else(missing)?;
        let spec = TransferSpec {
            alpha: req.alpha,
            switch_gates: req.switch_gates,
            method: req.texture_method,
            seed: req.seed,
            ..TransferSpec::default()
        };
        let result = transfer(&self.bundle, source, target, &spec)?;
        let template = &self.bundle.shape.template;
        let obj = obj_string(&result.mesh, &template.topology, Some(&template.uv))?;
        let job_id = req.job_id();
        self.meshes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(job_id.clone(), Arc::new(obj));
        let b64 = base64::engine::general_purpose::STANDARD;
        Ok(TransferResponse {
            mesh_url: format!("/api/mesh/{job_id}.obj"),
            job_id,
            source_id: req.source_id.clone(),
            target_id: req.target_id.clone(),
            render_png_b64: b64.encode(encode_png(&result.render)?),
            texture_png_b64: b64.encode(encode_png(result.texture.grid())?),
            alpha: req.alpha,
            gates: req.switch_gates,
            method: req.texture_method,
            seed: req.seed,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn mesh(&self, job_id: &str) -> Option<Arc<String>> {
        self.meshes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .objs
            .get(job_id)
            .cloned()
    }
}

fn error_response(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

fn internal_error(err: impl std::fmt::Display) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    log::error!("request {id} failed: {err}");
    error_response(
        StatusCode::INTERNAL_SERVER_ERROR,
        json!({"error": "internal error", "id": id}),
    )
}

fn not_found(what: &str, field: Option<&str>, id: &str) -> Response {
    let mut body = json!({"error": format!("unknown {what}"), "id": id});
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    error_response(StatusCode::NOT_FOUND, body)
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "checkpoint": state.checkpoint,
        "assets": state.assets.len(),
        "decoders": state.bundle.texture.decoders.keys().collect::<Vec<_>>(),
    }))
}

async fn assets(State(state): State<Arc<ServiceState>>) -> Json<Vec<AssetEntry>> {
    Json(
        state
            .assets
            .samples
            .iter()
            .map(|s| AssetEntry {
                id: s.id.clone(),
                thumbnail_url: format!("/api/assets/{}/thumbnail.png", s.id),
            })
            .collect(),
    )
}

async fn thumbnail(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(sample) = state.asset(&id) else {
        return not_found("asset", None, &id);
    };
    match sample.image.downsample(THUMBNAIL_FACTOR).and_then(|g| encode_png(&g)) {
        Ok(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Err(e) => internal_error(e),
    }
}

async fn post_transfer(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                json!({"error": "validation failed", "fields": [field_error("body", format!("invalid JSON: {e}"))]}),
            )
        }
    };
    let req = match TransferRequest::from_json(&value) {
        Ok(r) => r,
        Err(fields) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                json!({"error": "validation failed", "fields": fields}),
            )
        }
    };
    for (field, id) in [("source_id", &req.source_id), ("target_id", &req.target_id)] {
        if state.asset(id).is_none() {
            return not_found("asset", Some(field), id);
        }
    }
    let worker = state.clone();
    match tokio::task::spawn_blocking(move || worker.run_transfer(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => internal_error(e),
        Err(e) => internal_error(e),
    }
}

async fn get_mesh(State(state): State<Arc<ServiceState>>, UrlPath(file): UrlPath<String>) -> Response {
    let Some(job_id) = file.strip_suffix(".obj") else {
        return not_found("mesh", None, &file);
    };
    match state.mesh(job_id) {
        Some(obj) => (
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            obj.as_str().to_owned(),
        )
            .into_response(),
        None => not_found("mesh", None, job_id),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/assets", get(assets))
        .route("/api/assets/{id}/thumbnail.png", get(thumbnail))
        .route("/api/transfer", post(post_transfer))
        .route("/api/mesh/{file}", get(get_mesh))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
