//! HTTP front end over the loaded models.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cliplens_core::analysis::{
    contrastive_map, per_head_image_neighbors, per_head_text_neighbors, property_neighbors, topic_heatmap,
    AnalysisError, Combine, HeatMap, QueryImage, RankedNeighbors,
};
use cliplens_core::labeler::HeadProfile;
use cliplens_core::store::{Dump, HeadId, ModelMeta, StoreError, TokenContributions};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::Defaults;
use crate::models::LoadedModel;
use crate::sidecar::SidecarError;

pub const UPLOAD_PREFIX: &str = "upload:";

pub struct AppState {
    models: BTreeMap<String, Arc<LoadedModel>>,
    defaults: Defaults,
    // keyed by (model id, image digest)
    uploads: Mutex<HashMap<(String, String), Arc<Dump>>>,
}

impl AppState {
    pub fn new(models: Vec<LoadedModel>, defaults: Defaults) -> Self {
        Self {
            models: models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect(),
            defaults,
            uploads: Mutex::new(HashMap::new()),
        }
    }

    fn model(&self, id: &str) -> Result<Arc<LoadedModel>, ApiError> {
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_model", format!("no model `{id}`")))
    }

    pub fn upload_count(&self) -> usize {
        self.uploads.lock().unwrap().len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/models/{id}/heads", get(list_heads))
        .route("/models/{id}/profiles", get(get_profiles))
        .route("/models/{id}/metrics", get(get_metrics))
        .route("/encode-proxy", post(encode_proxy))
        .route("/analyze/neighbors/property", post(property_handler))
        .route("/analyze/neighbors/head-image", post(head_image_handler))
        .route("/analyze/neighbors/head-text", post(head_text_handler))
        .route("/analyze/segment", post(segment_handler))
        .route("/analyze/contrastive", post(contrastive_handler))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<SidecarError> for ApiError {
    fn from(e: SidecarError) -> Self {
        match e {
            SidecarError::Unreachable { .. } => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "sidecar_unreachable", e.to_string())
            }
            SidecarError::Status { status, .. } if status == 413 || status == 422 => {
                let code = StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_GATEWAY);
                Self::new(code, "sidecar_rejected", e.to_string())
            }
            _ => Self::new(StatusCode::BAD_GATEWAY, "sidecar_error", e.to_string()),
        }
    }
}

impl From<AnalysisError> for ApiError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::UnknownProperty { .. } => Self::not_found("unknown_property", e.to_string()),
            AnalysisError::Store(StoreError::HeadOutOfRange(_)) => Self::not_found("unknown_head", e.to_string()),
            AnalysisError::ZeroQuery => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "zero_query", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "analysis_failed", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Serialize)]
struct ModelSummary<'a> {
    id: &'a str,
    meta: &'a ModelMeta,
    images: usize,
    texts: usize,
    has_tokens: bool,
    labelled: bool,
    sidecar: Option<&'a str>,
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let models: Vec<ModelSummary> = state
        .models
        .values()
        .map(|m| ModelSummary {
            id: &m.id,
            meta: &m.dump.bank.meta,
            images: m.dump.bank.len(),
            texts: m.dump.texts.len(),
            has_tokens: !m.dump.tokens.is_empty(),
            labelled: m.labels.is_some(),
            sidecar: m.sidecar.as_ref().map(|s| s.base_url()),
        })
        .collect();
    Json(json!({ "models": models }))
}

async fn list_heads(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let model = state.model(&id)?;
    let labels = model.labels.as_ref().map(|l| &l.assignment.labels);
    let heads: Vec<_> = model
        .dump
        .bank
        .meta
        .analyzed_heads()
        .into_iter()
        .map(|h| {
            json!({
                "id": h.to_string(),
                "layer": h.layer,
                "head": h.head,
                "label": labels.and_then(|l| l.get(&h)),
            })
        })
        .collect();
    Ok(Json(json!({ "model": id, "heads": heads })))
}

fn labels_of(model: &LoadedModel) -> ApiResult<&crate::models::Labels> {
    model.labels.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "labels_unavailable",
            format!("model `{}` has no head labels; run the pipeline first", model.id),
        )
    })
}

async fn get_profiles(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let model = state.model(&id)?;
    let profiles: &[HeadProfile] = &labels_of(&model)?.profiles;
    Ok(Json(json!({ "model": id, "profiles": profiles })))
}

async fn get_metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let model = state.model(&id)?;
    let report = &labels_of(&model)?.report;
    Ok(Json(json!({ "model": id, "metrics": report })))
}

async fn encode_proxy(State(state): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Json<serde_json::Value>> {
    let mut model_id = None;
    let mut image = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("bad_multipart", e.to_string()))?
    {
        match field.name() {
            Some("model") => {
                model_id = Some(
                    field
                        .text()
                        .await
                        .map_err(|e| ApiError::bad_request("bad_multipart", e.to_string()))?,
                )
            }
            Some("image") => {
                image = Some(
                    field
                        .bytes()
                        .await
                        .map_err(|e| ApiError::bad_request("bad_multipart", e.to_string()))?,
                )
            }
            _ => {}
        }
    }
    let model_id = model_id.ok_or_else(|| ApiError::bad_request("missing_field", "multipart field `model` is required"))?;
    let image = image.ok_or_else(|| ApiError::bad_request("missing_field", "multipart field `image` is required"))?;
    if image.is_empty() {
        return Err(ApiError::bad_request("empty_image", "uploaded image is empty"));
    }
    let model = state.model(&model_id)?;
    let digest = hex::encode(Sha256::digest(&image));
    let key = (model.id.clone(), digest.clone());
    let cached = state.uploads.lock().unwrap().contains_key(&key);
    if !cached {
        let sidecar = model.sidecar.as_ref().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "sidecar_unreachable",
                format!("no sidecar configured for model `{}`", model.id),
            )
        })?;
        let dump = sidecar.encode(image.to_vec(), &model.dump.bank.meta).await?;
        state.uploads.lock().unwrap().insert(key, Arc::new(dump));
    }
    Ok(Json(json!({
        "model": model.id,
        "image_ref": format!("{UPLOAD_PREFIX}{digest}"),
        "cached": cached,
    })))
}

/// Request body shared by all analysis endpoints; which fields are
/// required depends on the endpoint.
#[derive(Debug, Default, Deserialize)]
struct AnalyzeBody {
    model: Option<String>,
    property: Option<String>,
    layer: Option<usize>,
    head: Option<usize>,
    image_ref: Option<String>,
    text: Option<String>,
    text_a: Option<String>,
    text_b: Option<String>,
    texts: Option<Vec<String>>,
    k: Option<usize>,
    combine: Option<Combine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Property,
    HeadImage,
    HeadText,
    Segment,
    Contrastive,
}

/// A request that passed arity checks; nothing here has touched tensors.
#[derive(Debug)]
struct Validated {
    model: String,
    head: Option<HeadId>,
    property: Option<String>,
    image_ref: Option<String>,
    texts: Vec<String>,
    k: usize,
    combine: Combine,
}

fn parse_body(bytes: &Bytes) -> ApiResult<AnalyzeBody> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request("malformed_request", e.to_string()))
}

fn required<T>(v: Option<T>, name: &str) -> ApiResult<T> {
    v.ok_or_else(|| ApiError::bad_request("missing_field", format!("field `{name}` is required")))
}

fn validate(kind: Kind, body: AnalyzeBody, defaults: &Defaults) -> ApiResult<Validated> {
    let model = required(body.model, "model")?;
    let mut texts: Vec<String> = body.texts.unwrap_or_default();
    texts.extend(body.text);
    texts.extend(body.text_a);
    texts.extend(body.text_b);
    let expected_texts = match kind {
        Kind::Property | Kind::HeadImage => 0,
        Kind::HeadText | Kind::Segment => 1,
        Kind::Contrastive => 2,
    };
    if texts.len() != expected_texts {
        return Err(ApiError::bad_request(
            "arity",
            format!("this analysis takes exactly {expected_texts} text(s), got {}", texts.len()),
        ));
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(ApiError::bad_request("arity", "texts must be nonempty"));
    }
    let head = match kind {
        Kind::Property => None,
        _ => Some(HeadId::new(required(body.layer, "layer")?, required(body.head, "head")?)),
    };
    let property = match kind {
        Kind::Property => Some(required(body.property, "property")?),
        _ => None,
    };
    let image_ref = match kind {
        Kind::HeadText => None,
        _ => Some(required(body.image_ref, "image_ref")?),
    };
    let k = body.k.unwrap_or(match kind {
        Kind::Property => defaults.property_k,
        Kind::HeadImage => defaults.head_image_k,
        _ => defaults.head_text_k,
    });
    if k == 0 {
        return Err(ApiError::bad_request("invalid_k", "k must be at least 1"));
    }
    Ok(Validated {
        model,
        head,
        property,
        image_ref,
        texts,
        k,
        combine: body.combine.unwrap_or_default(),
    })
}

fn check_head(model: &LoadedModel, head: HeadId) -> ApiResult<HeadId> {
    model
        .dump
        .bank
        .meta
        .check_head(head)
        .map(|_| head)
        .map_err(|_| ApiError::not_found("unknown_head", format!("head {head} is not analyzed in `{}`", model.id)))
}

enum ImageSource {
    Pool(usize),
    Upload(Arc<Dump>),
}

fn resolve_image(state: &AppState, model: &LoadedModel, image_ref: &str) -> ApiResult<ImageSource> {
    if let Some(digest) = image_ref.strip_prefix(UPLOAD_PREFIX) {
        let key = (model.id.clone(), digest.to_string());
        return state
            .uploads
            .lock()
            .unwrap()
            .get(&key)
            .cloned()
            .map(ImageSource::Upload)
            .ok_or_else(|| ApiError::not_found("unknown_image", format!("no upload `{image_ref}`; POST /encode-proxy first")));
    }
    model
        .dump
        .bank
        .image_index(image_ref)
        .map(ImageSource::Pool)
        .ok_or_else(|| ApiError::not_found("unknown_image", format!("no image `{image_ref}` in `{}`", model.id)))
}

fn query<'a>(source: &'a ImageSource) -> QueryImage<'a> {
    match source {
        ImageSource::Pool(i) => QueryImage::Pool(*i),
        ImageSource::Upload(d) => QueryImage::External(&d.bank, 0),
    }
}

fn tokens_for(model: &LoadedModel, source: &ImageSource, head: HeadId) -> ApiResult<TokenContributions> {
    let (dump, id): (&Dump, &str) = match source {
        ImageSource::Pool(i) => (&model.dump, &model.dump.bank.images[*i].id),
        ImageSource::Upload(d) => (d, &d.bank.images[0].id),
    };
    dump.tokens.get(id, head).map_err(|e| match e {
        StoreError::TokensNotExported(_) => ApiError::not_found(
            "tokens_unavailable",
            format!("image `{id}` was exported without token contributions"),
        ),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store_error", other.to_string()),
    })
}

/// Embeddings for `texts`: the dump's text bank first, the sidecar for the rest.
async fn resolve_texts(model: &LoadedModel, texts: &[String]) -> ApiResult<Vec<Array1<f64>>> {
    let bank = &model.dump.texts;
    let mut out: Vec<Option<Array1<f64>>> = texts
        .iter()
        .map(|t| bank.find(t).map(|i| bank.embeddings.row(i).mapv(f64::from)))
        .collect();
    let missing: Vec<String> = texts
        .iter()
        .zip(&out)
        .filter(|(_, e)| e.is_none())
        .map(|(t, _)| t.clone())
        .collect();
    if !missing.is_empty() {
        let sidecar = model.sidecar.as_ref().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "sidecar_unreachable",
                format!("text {:?} is not in the text bank and no sidecar is configured", missing[0]),
            )
        })?;
        let encoded = sidecar.encode_text(&missing, model.dump.bank.meta.embed_dim).await?;
        let mut rows = encoded.rows().into_iter();
        for slot in out.iter_mut().filter(|e| e.is_none()) {
            *slot = rows.next().map(|r| r.to_owned());
        }
    }
    Ok(out.into_iter().map(|e| e.expect("every text resolved")).collect())
}

#[derive(Serialize)]
struct NeighborOut<'a> {
    rank: usize,
    image_id: &'a str,
    uri: &'a str,
    score: f64,
}

fn neighbors_json(model: &LoadedModel, extra: serde_json::Value, ranked: &RankedNeighbors) -> Json<serde_json::Value> {
    let neighbors: Vec<NeighborOut> = ranked
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| NeighborOut {
            rank: i + 1,
            image_id: &n.image_id,
            uri: &model.dump.bank.images[n.index].uri,
            score: n.score,
        })
        .collect();
    let mut body = json!({ "model": model.id, "k": ranked.k, "neighbors": neighbors });
    if let (Some(obj), serde_json::Value::Object(more)) = (body.as_object_mut(), extra) {
        obj.extend(more);
    }
    Json(body)
}

fn heatmap_json(model: &LoadedModel, image_ref: &str, map: &HeatMap) -> Json<serde_json::Value> {
    Json(json!({
        "model": model.id,
        "image_ref": image_ref,
        "heads": map.heads.iter().map(HeadId::to_string).collect::<Vec<_>>(),
        "texts": map.texts,
        "normalization": map.normalization,
        "grid": [map.rows(), map.cols()],
        "values": map.grid.iter().copied().collect::<Vec<f64>>(),
    }))
}

async fn property_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req = validate(Kind::Property, parse_body(&body)?, &state.defaults)?;
    let model = state.model(&req.model)?;
    let labels = labels_of(&model)?;
    let property = req.property.expect("validated");
    let image_ref = req.image_ref.expect("validated");
    let source = resolve_image(&state, &model, &image_ref)?;
    let ranked = property_neighbors(&model.dump.bank, &labels.assignment, &property, query(&source), req.k, req.combine)?;
    let heads: Vec<String> = labels.assignment.heads_with(&property).iter().map(HeadId::to_string).collect();
    Ok(neighbors_json(&model, json!({ "property": property, "heads": heads, "image_ref": image_ref }), &ranked))
}

async fn head_image_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req = validate(Kind::HeadImage, parse_body(&body)?, &state.defaults)?;
    let model = state.model(&req.model)?;
    let head = check_head(&model, req.head.expect("validated"))?;
    let image_ref = req.image_ref.expect("validated");
    let source = resolve_image(&state, &model, &image_ref)?;
    let ranked = per_head_image_neighbors(&model.dump.bank, head, query(&source), req.k)?;
    Ok(neighbors_json(&model, json!({ "head": head.to_string(), "image_ref": image_ref }), &ranked))
}

async fn head_text_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req = validate(Kind::HeadText, parse_body(&body)?, &state.defaults)?;
    let model = state.model(&req.model)?;
    let head = check_head(&model, req.head.expect("validated"))?;
    let emb = resolve_texts(&model, &req.texts).await?;
    let ranked = per_head_text_neighbors(&model.dump.bank, head, emb[0].view(), req.k)?;
    Ok(neighbors_json(&model, json!({ "head": head.to_string(), "text": req.texts[0] }), &ranked))
}

async fn segment_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req = validate(Kind::Segment, parse_body(&body)?, &state.defaults)?;
    let model = state.model(&req.model)?;
    let head = check_head(&model, req.head.expect("validated"))?;
    let image_ref = req.image_ref.expect("validated");
    let source = resolve_image(&state, &model, &image_ref)?;
    let tokens = tokens_for(&model, &source, head)?;
    let emb = resolve_texts(&model, &req.texts).await?;
    let map = topic_heatmap(&tokens, &req.texts[0], emb[0].view(), model.dump.bank.meta.patch_grid)?;
    Ok(heatmap_json(&model, &image_ref, &map))
}

async fn contrastive_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req = validate(Kind::Contrastive, parse_body(&body)?, &state.defaults)?;
    let model = state.model(&req.model)?;
    let head = check_head(&model, req.head.expect("validated"))?;
    let image_ref = req.image_ref.expect("validated");
    let source = resolve_image(&state, &model, &image_ref)?;
    let tokens = tokens_for(&model, &source, head)?;
    let emb = resolve_texts(&model, &req.texts).await?;
    let map = contrastive_map(
        &tokens,
        (&req.texts[0], &req.texts[1]),
        emb[0].view(),
        emb[1].view(),
        model.dump.bank.meta.patch_grid,
    )?;
    Ok(heatmap_json(&model, &image_ref, &map))
}
