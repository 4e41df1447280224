#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use geoaqp::dataset::EncodedDataset;
use geoaqp::eval::SampleEstimator;
use geoaqp::model::DensityModel;
use geoaqp::synth::{generate, SynthConfig};
use geoaqp::trainer::{train, TrainConfig};
use geoaqp_cli::server::{router, ServiceState};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn synth_config() -> SynthConfig {
    SynthConfig {
        rows: 3000,
        seed: 5,
        months: 1,
        geo_levels: 10,
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        hidden_sizes: vec![16],
        learning_rate: 3e-3,
        batch_size: 128,
        max_epochs: 2,
        patience: 1,
        probe_rows: 500,
        ..Default::default()
    }
}

pub fn tiny_model() -> (DensityModel, EncodedDataset) {
    let data = generate(&synth_config()).unwrap();
    let (model, _) = train(&data, &train_config(), |_| {}).unwrap();
    (model, data)
}

pub fn state(rates: &[f64]) -> Arc<ServiceState> {
    let (model, data) = tiny_model();
    let samples = rates.iter().map(|&r| SampleEstimator::new(&data, r, 1).unwrap()).collect();
    Arc::new(ServiceState::new(model, samples).unwrap())
}

pub async fn call(state: &Arc<ServiceState>, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}
