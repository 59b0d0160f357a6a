//! JSON API over a precomputed analysis cache, plus live partial pruning.

mod error;
pub mod views;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use vitlens_core::importance::{record_from_traces, summarize_records, ImportanceRecord, ImportanceSummary, Metric};
use vitlens_core::patterns::{attention_mask, Direction, PatternTag};
use vitlens_core::precompute::{BaselineRecord, HeadPoint, ImagePoint, PatternRecord};
use vitlens_core::store::{model_digest, Cache, Dataset, Key, Kind};
use vitlens_core::strength::{EntropyDistribution, StrengthVector, ENTROPY_BINS};
use vitlens_core::{ForwardTrace, ModelConfig, ModelWeights, PruneMode, PruneSpec};

pub use error::{ApiError, ApiResult};
use views::{grid_rows, histogram, top_cells, Cell, Histogram, ATTENTION_HISTOGRAM_BINS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    /// `None` disables CORS headers; `"*"` allows any origin.
    pub cors_origin: Option<String>,
    /// Live-prune forwards allowed to run at once.
    pub prune_workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            cors_origin: None,
            prune_workers: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("model config {model:?} differs from the cache's {cache:?}")]
    ConfigMismatch { model: ModelConfig, cache: ModelConfig },
    #[error("model digest {model} differs from the cache's {cache}")]
    DigestMismatch { model: String, cache: String },
    #[error("dataset has no image `{0}` listed in the cache")]
    MissingImage(String),
    #[error("invalid CORS origin `{0}`")]
    CorsOrigin(String),
    #[error("prune_workers must be at least 1")]
    Workers,
}

/// Immutable state shared by all requests.
pub struct ApiState {
    model: ModelWeights,
    cache: Cache,
    dataset: Option<Dataset>,
    config: ServerConfig,
    complete: bool,
    image_index: HashMap<String, usize>,
    /// Baseline traces computed by the first prune on each image, reduced to
    /// what scoring needs.
    baselines: Vec<OnceLock<Arc<ForwardTrace>>>,
    prune_slots: Semaphore,
}

impl ApiState {
    /// `dataset` is only needed for live pruning; read endpoints use the
    /// cache alone.
    pub fn new(
        model: ModelWeights,
        cache: Cache,
        dataset: Option<Dataset>,
        config: ServerConfig,
    ) -> Result<Self, StartupError> {
        let meta = cache.meta();
        if model.config != meta.config {
            return Err(StartupError::ConfigMismatch {
                model: model.config,
                cache: meta.config,
            });
        }
        let digest = model_digest(&model);
        if digest != meta.model_sha256 {
            return Err(StartupError::DigestMismatch {
                model: digest,
                cache: meta.model_sha256.clone(),
            });
        }
        if let Some(data) = &dataset {
            for img in &meta.images {
                if !data.entries.iter().any(|e| e.image_id == img.image_id) {
                    return Err(StartupError::MissingImage(img.image_id.clone()));
                }
            }
        }
        if config.prune_workers == 0 {
            return Err(StartupError::Workers);
        }
        if let Some(origin) = &config.cors_origin {
            if origin != "*" && HeaderValue::from_str(origin).is_err() {
                return Err(StartupError::CorsOrigin(origin.clone()));
            }
        }
        let image_index = meta
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.image_id.clone(), i))
            .collect();
        let complete = cache.is_complete();
        if !complete {
            tracing::warn!(missing = cache.missing_keys().len(), "cache incomplete; read endpoints answer 503");
        }
        Ok(Self {
            baselines: (0..meta.images.len()).map(|_| OnceLock::new()).collect(),
            prune_slots: Semaphore::new(config.prune_workers),
            model,
            cache,
            dataset,
            config,
            complete,
            image_index,
        })
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    fn ready(&self) -> ApiResult<()> {
        if self.complete {
            Ok(())
        } else {
            Err(ApiError::unavailable("cache incomplete; run precompute"))
        }
    }

    fn image(&self, id: &str) -> ApiResult<usize> {
        self.image_index
            .get(id)
            .copied()
            .ok_or_else(|| ApiError::not_found(format!("unknown image `{id}`")))
    }

    fn head(&self, layer: usize, head: usize) -> ApiResult<()> {
        let c = self.model.config;
        if layer < c.layers && head < c.heads {
            Ok(())
        } else {
            Err(ApiError::not_found(format!(
                "unknown head ({layer}, {head}); model has {} layers x {} heads",
                c.layers, c.heads
            )))
        }
    }

    fn lines<T: DeserializeOwned>(&self, key: &Key) -> ApiResult<Vec<T>> {
        self.cache
            .read_lines(key)?
            .ok_or_else(|| ApiError::unavailable(format!("cache has no {key}")))
    }

    fn one<T: DeserializeOwned>(&self, key: &Key) -> ApiResult<T> {
        self.lines(key)?
            .into_iter()
            .next()
            .ok_or_else(|| ApiError::internal(format!("cache object for {key} is empty")))
    }

    fn pattern(&self, id: &str, layer: usize, head: usize) -> ApiResult<PatternRecord> {
        self.image(id)?;
        self.head(layer, head)?;
        self.one(&Key::image_head(Kind::Pattern, id, layer, head))
    }

    fn baseline_trace(&self, index: usize, id: &str) -> ApiResult<Arc<ForwardTrace>> {
        if let Some(t) = self.baselines[index].get() {
            return Ok(t.clone());
        }
        let image = self.load_image(id)?;
        let mut trace = self.model.forward(&image, None)?;
        trace.attentions.clear();
        trace.layer_o.clear();
        Ok(self.baselines[index].get_or_init(|| Arc::new(trace)).clone())
    }

    fn load_image(&self, id: &str) -> ApiResult<vitlens_core::Image> {
        let data = self
            .dataset
            .as_ref()
            .ok_or_else(|| ApiError::unavailable("live pruning needs the dataset; start the server with one"))?;
        let entry = data
            .entries
            .iter()
            .find(|e| e.image_id == id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image `{id}`")))?;
        Ok(data.load_image(entry, &self.model.config)?)
    }

    /// Scores one prune target with a live forward.
    pub fn prune(&self, req: &PruneRequest) -> ApiResult<ImportanceRecord> {
        let index = self.image(&req.image_id)?;
        self.head(req.layer, req.head)?;
        let mode = PruneMode::try_from(req.mode).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let label = self.cache.meta().images[index].class_index;
        let baseline = self.baseline_trace(index, &req.image_id)?;
        let image = self.load_image(&req.image_id)?;
        let spec = PruneSpec::new(req.layer, req.head, mode);
        let pruned = self.model.forward(&image, Some(spec))?;
        Ok(record_from_traces(&req.image_id, label, spec, &baseline, &pruned)?)
    }
}

type Shared = Arc<ApiState>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub metrics: Vec<String>,
    pub modes: Vec<u8>,
    pub image_count: usize,
    pub model_sha256: String,
    pub settings: serde_json::Value,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: String,
    pub label: usize,
    pub pred: usize,
    pub prob_true: f32,
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadValues {
    pub image_id: String,
    pub metric: Metric,
    pub layers: usize,
    pub heads: usize,
    /// Layer-major, one value per head.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRequest {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub mode: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub layer: usize,
    pub head: usize,
    pub bins: usize,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntropy {
    pub layer: usize,
    pub head: usize,
    pub entropy_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub space: String,
    pub points: Vec<HeadPoint>,
    /// The selected image's heads, empty when none was requested.
    pub selected: Vec<HeadPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionView {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub tokens: usize,
    pub topfrac: f64,
    /// Kept cells over the whole matrix in row-major order; row 0 and column 0
    /// belong to the class token.
    pub cells: Vec<Cell>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskView {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub token: usize,
    pub dir: Direction,
    pub grid: Vec<Vec<f32>>,
    pub tags: Vec<PatternTag>,
}

#[derive(Debug, Deserialize)]
struct MetricQuery {
    metric: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LayoutQuery {
    space: Option<String>,
    image: Option<String>,
}

#[derive(Debug, Deserialize)]
struct AttentionQuery {
    topfrac: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct MaskQuery {
    token: Option<usize>,
    dir: Option<String>,
}

fn metric(q: &MetricQuery) -> ApiResult<Metric> {
    match &q.metric {
        None => Ok(Metric::Prob),
        Some(m) => m.parse().map_err(|e: vitlens_core::Error| ApiError::bad_request(e.to_string())),
    }
}

fn query<T>(q: Result<Query<T>, axum::extract::rejection::QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

type HeadPath = Path<(String, usize, usize)>;

async fn meta(State(s): State<Shared>) -> Json<MetaResponse> {
    let m = s.cache.meta();
    Json(MetaResponse {
        config: m.config,
        class_names: m.class_names.clone(),
        metrics: Metric::ALL.iter().map(|m| m.as_str().to_string()).collect(),
        modes: PruneMode::ALL.iter().map(|m| m.index()).collect(),
        image_count: m.images.len(),
        model_sha256: m.model_sha256.clone(),
        settings: m.settings.clone(),
        complete: s.complete,
    })
}

async fn images(State(s): State<Shared>) -> ApiResult<Json<Vec<ImageSummary>>> {
    s.ready()?;
    let layout: Vec<ImagePoint> = s.lines(&Key::global(Kind::LayoutImages))?;
    let coords: HashMap<&str, [f64; 2]> = layout.iter().map(|p| (p.image_id.as_str(), [p.x, p.y])).collect();
    let mut out = Vec::with_capacity(s.cache.meta().images.len());
    for img in &s.cache.meta().images {
        let b: BaselineRecord = s.one(&Key::image(Kind::Baseline, &img.image_id))?;
        let xy = coords
            .get(img.image_id.as_str())
            .copied()
            .ok_or_else(|| ApiError::internal(format!("layout lacks image `{}`", img.image_id)))?;
        out.push(ImageSummary {
            id: b.image_id,
            label: b.label,
            pred: b.pred,
            prob_true: b.prob_true,
            coords: xy,
        });
    }
    Ok(Json(out))
}

fn full_records(s: &ApiState, id: &str) -> ApiResult<Vec<ImportanceRecord>> {
    let c = s.model.config;
    let mut out = Vec::with_capacity(c.total_heads());
    for l in 0..c.layers {
        for h in 0..c.heads {
            let records: Vec<ImportanceRecord> = s.lines(&Key::image_head(Kind::Importance, id, l, h))?;
            let full = records
                .into_iter()
                .find(|r| r.mode == PruneMode::Full)
                .ok_or_else(|| ApiError::internal(format!("no full-prune record for {id} ({l}, {h})")))?;
            out.push(full);
        }
    }
    Ok(out)
}

async fn image_importance(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<MetricQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<HeadValues>> {
    let q = query(q)?;
    let metric = metric(&q)?;
    s.image(&id)?;
    s.ready()?;
    let c = s.model.config;
    let values = full_records(&s, &id)?.iter().map(|r| r.view_value(metric)).collect();
    Ok(Json(HeadValues {
        image_id: id,
        metric,
        layers: c.layers,
        heads: c.heads,
        values,
    }))
}

async fn importance_summary(
    State(s): State<Shared>,
    q: Result<Query<MetricQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<ImportanceSummary>> {
    let metric = metric(&query(q)?)?;
    s.ready()?;
    let c = s.model.config;
    let mut records = Vec::with_capacity(s.cache.meta().images.len() * c.total_heads());
    for img in &s.cache.meta().images {
        records.extend(full_records(&s, &img.image_id)?);
    }
    Ok(Json(summarize_records(&records, c.layers, c.heads, metric)?))
}

async fn prune(
    State(s): State<Shared>,
    body: Result<Json<PruneRequest>, JsonRejection>,
) -> ApiResult<Json<ImportanceRecord>> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    // cheap checks before queueing for a worker
    s.image(&req.image_id)?;
    s.head(req.layer, req.head)?;
    PruneMode::try_from(req.mode).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let _permit = s
        .prune_slots
        .acquire()
        .await
        .map_err(|_| ApiError::unavailable("server shutting down"))?;
    let state = s.clone();
    let record = tokio::task::spawn_blocking(move || state.prune(&req))
        .await
        .map_err(|e| ApiError::internal(format!("prune worker failed: {e}")))??;
    Ok(Json(record))
}

async fn strength(State(s): State<Shared>, Path((id, l, h)): HeadPath) -> ApiResult<Json<StrengthVector>> {
    s.image(&id)?;
    s.head(l, h)?;
    s.ready()?;
    Ok(Json(s.one(&Key::image_head(Kind::Strength, &id, l, h))?))
}

async fn entropy_histogram(
    State(s): State<Shared>,
    Path((l, h)): Path<(usize, usize)>,
) -> ApiResult<Json<EntropyHistogram>> {
    s.head(l, h)?;
    s.ready()?;
    let d: EntropyDistribution = s.one(&Key::head(Kind::EntropyHistogram, l, h))?;
    Ok(Json(EntropyHistogram {
        layer: d.layer,
        head: d.head,
        bins: ENTROPY_BINS,
        counts: d.counts,
    }))
}

async fn strength_overview(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Vec<HeadEntropy>>> {
    s.image(&id)?;
    s.ready()?;
    let c = s.model.config;
    let mut out = Vec::with_capacity(c.total_heads());
    for l in 0..c.layers {
        for h in 0..c.heads {
            let v: StrengthVector = s.one(&Key::image_head(Kind::Strength, &id, l, h))?;
            out.push(HeadEntropy {
                layer: l,
                head: h,
                entropy_norm: v.entropy_norm,
            });
        }
    }
    Ok(Json(out))
}

async fn layout(
    State(s): State<Shared>,
    q: Result<Query<LayoutQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Layout>> {
    let q = query(q)?;
    let space = q.space.unwrap_or_else(|| "patch".into());
    let kind = match space.as_str() {
        "patch" => Kind::LayoutPatch,
        "cls" => Kind::LayoutCls,
        other => return Err(ApiError::bad_request(format!("space `{other}` is not patch|cls"))),
    };
    if let Some(id) = &q.image {
        s.image(id)?;
    }
    s.ready()?;
    let points: Vec<HeadPoint> = s.lines(&Key::global(kind))?;
    let selected = match &q.image {
        Some(id) => points.iter().filter(|p| &p.image_id == id).cloned().collect(),
        None => Vec::new(),
    };
    Ok(Json(Layout { space, points, selected }))
}

async fn attention(
    State(s): State<Shared>,
    Path((id, l, h)): HeadPath,
    q: Result<Query<AttentionQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<AttentionView>> {
    let topfrac = query(q)?.topfrac.unwrap_or(0.01);
    if !(0.0..=1.0).contains(&topfrac) {
        return Err(ApiError::bad_request(format!("topfrac {topfrac} not in [0, 1]")));
    }
    s.image(&id)?;
    s.head(l, h)?;
    s.ready()?;
    let rec = s.pattern(&id, l, h)?;
    let a = &rec.attention;
    Ok(Json(AttentionView {
        image_id: id,
        layer: l,
        head: h,
        tokens: a.rows(),
        topfrac,
        cells: top_cells(a, topfrac),
        histogram: histogram(a.data(), ATTENTION_HISTOGRAM_BINS),
    }))
}

async fn mask(
    State(s): State<Shared>,
    Path((id, l, h)): HeadPath,
    q: Result<Query<MaskQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<MaskView>> {
    let q = query(q)?;
    let dir: Direction = q
        .dir
        .as_deref()
        .unwrap_or("source")
        .parse()
        .map_err(|e: vitlens_core::Error| ApiError::bad_request(e.to_string()))?;
    let token = q.token.unwrap_or(0);
    if token >= s.model.config.tokens() {
        return Err(ApiError::bad_request(format!(
            "token {token} outside 0..{}",
            s.model.config.tokens()
        )));
    }
    s.image(&id)?;
    s.head(l, h)?;
    s.ready()?;
    let rec = s.pattern(&id, l, h)?;
    let grid = attention_mask(&rec.attention, token, dir)?;
    Ok(Json(MaskView {
        image_id: id,
        layer: l,
        head: h,
        token,
        dir,
        grid: grid_rows(&grid),
        tags: rec.tags,
    }))
}

/// All `/api` routes over `state`.
pub fn router(state: Arc<ApiState>) -> Router {
    let cors = state.config.cors_origin.as_deref().map(|origin| {
        let layer = CorsLayer::new()
            .allow_methods([Method::GET, Method::POST])
            .allow_headers(Any);
        if origin == "*" {
            layer.allow_origin(Any)
        } else {
            // validated in ApiState::new
            layer.allow_origin(HeaderValue::from_str(origin).expect("validated origin"))
        }
    });
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/images", get(images))
        .route("/api/images/{id}/importance", get(image_importance))
        .route("/api/importance/summary", get(importance_summary))
        .route("/api/prune", post(prune))
        .route("/api/images/{id}/heads/{l}/{h}/strength", get(strength))
        .route("/api/heads/{l}/{h}/entropy-histogram", get(entropy_histogram))
        .route("/api/images/{id}/strength-overview", get(strength_overview))
        .route("/api/patterns/layout", get(layout))
        .route("/api/images/{id}/heads/{l}/{h}/attention", get(attention))
        .route("/api/images/{id}/heads/{l}/{h}/mask", get(mask))
        .with_state(state);
    match cors {
        Some(c) => api.layer(c),
        None => api,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: ApiState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(Arc::new(state))).await
}
