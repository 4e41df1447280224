//! HTTP service over a loaded model: `POST /query`, `POST /heatmap`,
//! `GET /schema` and `GET /healthz`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use geoaqp::dataset::{AttributeKind, HeadKind};
use geoaqp::eval::SampleEstimator;
use geoaqp::geocell::Rect;
use geoaqp::model::{io, DensityModel};
use geoaqp::query::{aggregate, heatmap, AggregateSpec, HeatCell, Predicate, Query, QueryError, QueryResult};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Baseline answers keyed by sampling rate.
pub type SampleEstimates = BTreeMap<String, Option<f64>>;

pub struct ServiceState {
    pub model: DensityModel,
    /// Sampling baselines; non-empty only in comparison mode.
    pub samples: Vec<SampleEstimator>,
    serialized_bytes: usize,
}

impl ServiceState {
    pub fn new(model: DensityModel, samples: Vec<SampleEstimator>) -> Result<Self, geoaqp::model::ModelError> {
        let serialized_bytes = io::serialized_size(&model)?;
        Ok(Self {
            model,
            samples,
            serialized_bytes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    #[serde(flatten)]
    pub result: QueryResult,
    pub elapsed_ms: f64,
    /// `null` entries mark samples without an answer (for example no
    /// qualifying rows for a MEAN).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_estimates: Option<SampleEstimates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapRequest {
    pub level: u8,
    /// Defaults to the whole domain.
    #[serde(default)]
    pub bbox: Option<Rect>,
    #[serde(default)]
    pub filters: Vec<Predicate>,
    #[serde(default)]
    pub aggregate: AggregateSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapResponse {
    pub level: u8,
    pub cells: Vec<HeatCell>,
    pub elapsed_ms: f64,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    max_level: Option<u8>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            max_level: None,
        }
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        let code = if e.is_data() { "schema" } else { "parse" };
        ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string())
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let message = e.to_string();
        match e {
            QueryError::Invalid(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid", message),
            QueryError::Unsupported(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unsupported", message),
            QueryError::EmptyResult(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_result", message),
            QueryError::LevelTooDeep { max, .. } => ApiError {
                max_level: Some(max),
                ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "level_too_deep", message)
            },
            QueryError::Model(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(max) = self.max_level {
            body["max_level"] = json!(max);
        }
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/query", post(handle_query))
        .route("/heatmap", post(handle_heatmap))
        .route("/schema", get(handle_schema))
        .route("/healthz", get(|| async { Json(json!({ "status": "ok" })) }))
        .with_state(state)
}

fn rate_key(rate: f64) -> String {
    rate.to_string()
}

/// The answer `POST /query` returns, minus the timing.
pub fn answer(state: &ServiceState, query: &Query) -> Result<(QueryResult, Option<SampleEstimates>), QueryError> {
    let result = aggregate(&state.model, query)?;
    let samples = (!state.samples.is_empty()).then(|| {
        state
            .samples
            .iter()
            .map(|s| (rate_key(s.rate), s.estimate(query).ok().flatten()))
            .collect()
    });
    Ok((result, samples))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn handle_query(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    let query: Query = serde_json::from_slice(&body)?;
    let started = Instant::now();
    let out = blocking(move || {
        let (result, sample_estimates) = answer(&state, &query)?;
        Ok(QueryResponse {
            result,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            sample_estimates,
        })
    })
    .await;
    log::info!("POST /query {} in {:.1} ms", status_word(&out), started.elapsed().as_secs_f64() * 1e3);
    out.map(Json)
}

async fn handle_heatmap(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<HeatmapResponse>, ApiError> {
    let req: HeatmapRequest = serde_json::from_slice(&body)?;
    let started = Instant::now();
    let out = blocking(move || {
        let bbox = req.bbox.unwrap_or_else(|| state.model.schema.domain.rect());
        let cells = heatmap(&state.model, req.level, &bbox, &req.filters, &req.aggregate)?;
        Ok(HeatmapResponse {
            level: req.level,
            cells,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    })
    .await;
    log::info!("POST /heatmap {} in {:.1} ms", status_word(&out), started.elapsed().as_secs_f64() * 1e3);
    out.map(Json)
}

fn status_word<T>(r: &Result<T, ApiError>) -> String {
    match r {
        Ok(_) => "200".into(),
        Err(e) => format!("{} {}", e.status.as_u16(), e.code),
    }
}

/// Schema, domain and model metadata for clients.
pub fn schema_document(state: &ServiceState) -> Value {
    let model = &state.model;
    let attributes: Vec<Value> = model
        .schema
        .attributes
        .iter()
        .map(|a| {
            let mut v = serde_json::to_value(a).expect("attribute specs serialize");
            if a.is_discrete() {
                v["values"] = json!(a.labels());
                v["cardinality"] = json!(a.cardinality());
            }
            if let AttributeKind::Continuous { head } = a.kind {
                v["aggregates"] = match head {
                    HeadKind::Gaussian { components: 1 } | HeadKind::Lognormal => {
                        json!(["COUNT", "SUM", "MEAN", "STDDEV", "PERCENTILE", "MIN", "MAX"])
                    }
                    _ => json!(["COUNT"]),
                };
            }
            v
        })
        .collect();
    let geo = &model.schema.attributes[model.schema.geo_index()].name;
    json!({
        "attributes": attributes,
        "geo_attribute": geo,
        "geo_max_level": model.schema.geo_levels(),
        "domain": model.schema.domain,
        "n_total": model.n_total,
        "model": {
            "hidden_sizes": model.hidden_sizes,
            "parameters": model.parameter_count(),
            "serialized_bytes": state.serialized_bytes,
        },
        "comparison_rates": state.samples.iter().map(|s| s.rate).collect::<Vec<_>>(),
    })
}

async fn handle_schema(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    Json(schema_document(&state))
}
