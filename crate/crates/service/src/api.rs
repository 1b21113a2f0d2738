//! HTTP routes over the store and the job queue.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use ssed::diffusion::SamplerConfig;
use ssed::trimask::{read_asset, AssetFilter, AssetKind, Plane, SceneMaskSet, Trimask, TrimaskError};
use ssed::voxel::{iou, miou, per_class_iou, ClassPalette, VoxelError};

use crate::jobs::{JobQueue, QueueError};
use crate::spec::{SceneSpec, SpecError};
use crate::store::{Store, StoreError};

pub struct AppState {
    pub store: Arc<Store>,
    pub jobs: JobQueue,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<TrimaskError> for ServiceError {
    fn from(e: TrimaskError) -> Self {
        match e {
            TrimaskError::MissingId(_) => Self::NotFound(e.to_string()),
            TrimaskError::DuplicateId(_) => Self::Conflict(e.to_string()),
            TrimaskError::Io(_) | TrimaskError::Manifest(_) => Self::Internal(e.to_string()),
            _ => Self::BadRequest(e.to_string()),
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => Self::NotFound(e.to_string()),
            StoreError::InvalidId(_) | StoreError::Voxel(_) => Self::BadRequest(e.to_string()),
            StoreError::Trimask(t) => t.into(),
            StoreError::Json(_) | StoreError::Io(_) => Self::Internal(e.to_string()),
        }
    }
}

impl From<SpecError> for ServiceError {
    fn from(e: SpecError) -> Self {
        match e {
            SpecError::MissingAsset(_) => Self::NotFound(e.to_string()),
            SpecError::Trimask(TrimaskError::MissingId(_)) => Self::NotFound(e.to_string()),
            _ => Self::BadRequest(e.to_string()),
        }
    }
}

impl From<QueueError> for ServiceError {
    fn from(e: QueueError) -> Self {
        match e {
            QueueError::Full(_) | QueueError::NoGenerator => Self::Unavailable(e.to_string()),
            QueueError::Store(s) => s.into(),
        }
    }
}

impl From<VoxelError> for ServiceError {
    fn from(e: VoxelError) -> Self {
        Self::BadRequest(e.to_string())
    }
}

type ApiResult<T> = Result<T, ServiceError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/assets", get(list_assets).post(upload_asset))
        .route("/assets/{id}", get(get_asset))
        .route("/masksets/{id}", get(get_maskset))
        .route("/scenes", post(upload_scene))
        .route("/scenes/compose", post(compose))
        .route("/scenes/{id}", get(get_scene))
        .route("/jobs", get(list_jobs).post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/eval", post(eval))
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "generator": s.jobs.has_generator(), "pending": s.jobs.pending() }))
}

#[derive(Deserialize)]
struct AssetQuery {
    class: Option<u16>,
    kind: Option<String>,
}

async fn list_assets(State(s): State<Arc<AppState>>, Query(q): Query<AssetQuery>) -> ApiResult<impl IntoResponse> {
    let kind = q.kind.map(|k| k.parse::<AssetKind>()).transpose()?;
    Ok(Json(s.store.list_assets(AssetFilter { class_id: q.class, kind })))
}

async fn upload_asset(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let asset = read_asset(body.as_ref())?;
    let entry = s.store.put_asset(&asset)?;
    Ok((StatusCode::CREATED, Json(entry)))
}

#[derive(Deserialize, Default)]
struct FormatQuery {
    format: Option<String>,
}

impl FormatQuery {
    fn json(&self) -> ApiResult<bool> {
        match self.format.as_deref() {
            None | Some("bin") => Ok(false),
            Some("json") => Ok(true),
            Some(f) => Err(ServiceError::BadRequest(format!("unknown format {f:?}"))),
        }
    }
}

/// A plane as rows of `'0'`/`'1'`.
#[derive(Serialize)]
pub struct PlaneView {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<String>,
}

impl PlaneView {
    fn of(p: &Plane) -> Self {
        let bits = p.bits().chunks(p.cols().max(1)).map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect()).collect();
        Self { rows: p.rows(), cols: p.cols(), bits }
    }
}

#[derive(Serialize)]
pub struct TrimaskView {
    pub class: u16,
    pub xy: PlaneView,
    pub xz: PlaneView,
    pub yz: PlaneView,
}

impl TrimaskView {
    fn of(t: &Trimask) -> Self {
        Self { class: t.class_id, xy: PlaneView::of(&t.xy), xz: PlaneView::of(&t.xz), yz: PlaneView::of(&t.yz) }
    }
}

fn bytes_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

async fn get_asset(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FormatQuery>) -> ApiResult<Response> {
    if !q.json()? {
        return Ok(bytes_response(s.store.get_asset_bytes(&id)?));
    }
    let a = s.store.get_asset(&id)?;
    Ok(Json(json!({
        "id": a.id,
        "kind": a.kind,
        "class_id": a.class_id(),
        "dims": a.dims(),
        "bbox": a.bbox(),
        "provenance": a.provenance,
        "trimask": TrimaskView::of(a.trimask()),
    }))
    .into_response())
}

/// Non-empty class planes of a mask set.
fn preview(set: &SceneMaskSet) -> Vec<TrimaskView> {
    set.masks().iter().skip(1).filter(|m| !m.is_zero()).map(TrimaskView::of).collect()
}

async fn get_maskset(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FormatQuery>) -> ApiResult<Response> {
    if !q.json()? {
        return Ok(bytes_response(s.store.get_maskset_bytes(&id)?));
    }
    let set = s.store.get_maskset(&id)?;
    Ok(Json(json!({ "id": id, "dims": set.dims(), "num_classes": set.num_classes(), "planes": preview(&set) })).into_response())
}

async fn compose(State(s): State<Arc<AppState>>, Json(spec): Json<SceneSpec>) -> ApiResult<impl IntoResponse> {
    let set = spec.compose(|id| {
        s.store.get_asset(id).map_err(|e| match e {
            StoreError::NotFound { .. } => SpecError::MissingAsset(id.to_string()),
            StoreError::Trimask(t) => SpecError::Trimask(t),
            other => SpecError::Invalid(other.to_string()),
        })
    })?;
    let id = s.store.put_maskset(&set)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "maskset": id, "dims": set.dims(), "num_classes": set.num_classes(), "planes": preview(&set) })),
    ))
}

#[derive(Serialize)]
pub struct VoxelView {
    pub id: String,
    pub dims: [usize; 3],
    pub num_classes: u16,
    pub palette: ClassPalette,
    /// Non-empty voxels as `[x, y, z, class]`.
    pub voxels: Vec<[usize; 4]>,
}

async fn get_scene(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FormatQuery>) -> ApiResult<Response> {
    if !q.json()? {
        return Ok(bytes_response(s.store.get_scene_bytes(&id)?));
    }
    let (grid, palette) = s.store.get_scene(&id)?;
    let view = VoxelView { id, dims: grid.dims(), num_classes: grid.num_classes(), palette, voxels: grid.sparse() };
    Ok(Json(view).into_response())
}

async fn upload_scene(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let id = s.store.put_scene_bytes(&body)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

#[derive(Deserialize)]
pub struct JobRequest {
    #[serde(default)]
    pub spec: Option<SceneSpec>,
    #[serde(default)]
    pub maskset: Option<String>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

async fn submit_job(State(s): State<Arc<AppState>>, Json(req): Json<JobRequest>) -> ApiResult<impl IntoResponse> {
    if !s.jobs.has_generator() {
        return Err(ServiceError::Unavailable("no checkpoints loaded".into()));
    }
    let maskset = match (&req.spec, req.maskset) {
        (Some(spec), None) => {
            let set = spec.compose(|id| s.store.get_asset(id).map_err(|_| SpecError::MissingAsset(id.to_string())))?;
            s.store.put_maskset(&set)?
        }
        (None, Some(id)) => {
            s.store.get_maskset_bytes(&id)?;
            id
        }
        _ => return Err(ServiceError::BadRequest("give exactly one of spec or maskset".into())),
    };
    let job = s.jobs.submit(maskset, req.spec, req.sampler, req.seed)?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    s.jobs.get(&id).map(Json).ok_or_else(|| ServiceError::NotFound(format!("unknown job {id}")))
}

async fn list_jobs(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    Json(s.jobs.list())
}

#[derive(Deserialize)]
pub struct EvalRequest {
    pub pred: String,
    pub gt: String,
}

async fn eval(State(s): State<Arc<AppState>>, Json(req): Json<EvalRequest>) -> ApiResult<impl IntoResponse> {
    let (pred, _) = s.store.get_scene(&req.pred)?;
    let (gt, _) = s.store.get_scene(&req.gt)?;
    Ok(Json(json!({
        "iou": iou(&pred, &gt)?,
        "miou": miou(&pred, &gt)?,
        "per_class": per_class_iou(&pred, &gt)?,
    })))
}
