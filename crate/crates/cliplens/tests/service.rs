mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cliplens::config::{ModelConfig, ServiceConfig};
use cliplens::models::load_all;
use cliplens::server::{router, AppState};
use cliplens_core::analysis::{per_head_image_neighbors, per_head_text_neighbors, QueryImage};
use cliplens_core::labeler::LabelMode;
use cliplens_core::store::{read_dump, HeadId};
use cliplens_core::synthetic::text_description;
use http_body_util::BodyExt;
use ndarray::Array1;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::*;

struct Harness {
    app: Router,
    _dir: tempfile::TempDir,
    dump: std::path::PathBuf,
}

fn harness(sidecar: Option<String>, mode: LabelMode) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let (dump, manual) = fixture(dir.path());
    let cfg = ServiceConfig {
        sidecar,
        mode,
        manual: Some(manual),
        models: vec![ModelConfig {
            id: Some("syn".into()),
            dump: dump.clone(),
            sidecar: None,
            manual: None,
        }],
        ..ServiceConfig::default()
    };
    let models = load_all(&cfg).unwrap();
    let app = router(Arc::new(AppState::new(models, cfg.defaults)));
    Harness { app, _dir: dir, dump }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

async fn upload(app: &Router, model: &str, image: &[u8]) -> (StatusCode, Value) {
    let boundary = "cliplens-test-boundary";
    let mut body = Vec::new();
    body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"model\"\r\n\r\n{model}\r\n").bytes());
    body.extend(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n"
        )
        .bytes(),
    );
    body.extend(image);
    body.extend(format!("\r\n--{boundary}--\r\n").bytes());
    let req = Request::post("/encode-proxy")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    call(app, req).await
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or("")
}

fn pairs(body: &Value) -> Vec<(String, f64)> {
    body["neighbors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| (n["image_id"].as_str().unwrap().to_string(), n["score"].as_f64().unwrap()))
        .collect()
}

#[tokio::test]
async fn models_heads_profiles_and_metrics() {
    let h = harness(None, LabelMode::Manual);
    let (s, body) = get(&h.app, "/models").await;
    assert_eq!(s, StatusCode::OK);
    let m = &body["models"][0];
    assert_eq!(m["id"], "syn");
    assert_eq!(m["meta"]["embed_dim"], DIM);
    assert_eq!(m["meta"]["patch_grid"], json!([2, 2]));
    assert_eq!(m["images"], IMAGES);
    assert_eq!(m["labelled"], true);

    let (s, body) = get(&h.app, "/models/syn/heads").await;
    assert_eq!(s, StatusCode::OK);
    let heads = body["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 8);
    assert_eq!(heads[0]["id"], "2.0");
    assert_eq!(heads[0]["label"], "colors");

    let (s, body) = get(&h.app, "/models/syn/profiles").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["profiles"].as_array().unwrap().len(), 8);

    let (s, body) = get(&h.app, "/models/syn/metrics").await;
    assert_eq!(s, StatusCode::OK);
    // colors ×3, animals ×2: 3·2 + 2·1 ordered pairs out of 8·7
    assert_eq!(body["metrics"]["entanglement"].as_f64().unwrap(), 8.0 / 56.0);
    assert_eq!(body["metrics"]["association"].as_f64().unwrap(), 1.0);

    let (s, body) = get(&h.app, "/models/nope/metrics").await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_model"));
}

#[tokio::test]
async fn head_image_neighbors_match_engine() {
    let h = harness(None, LabelMode::Manual);
    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-image",
        json!({"model": "syn", "layer": 3, "head": 1, "image_ref": "img0005", "k": 8}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let got = pairs(&body);
    assert_eq!(got.len(), 8);
    assert!(got.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(got.iter().all(|(id, _)| id != "img0005"));

    let dump = read_dump(&h.dump).unwrap();
    let want = per_head_image_neighbors(&dump.bank, HeadId::new(3, 1), QueryImage::Pool(5), 8).unwrap();
    let want: Vec<(String, f64)> = want.neighbors.into_iter().map(|n| (n.image_id, n.score)).collect();
    assert_eq!(got, want);
    assert!(body["neighbors"][0]["uri"].is_string());
}

#[tokio::test]
async fn property_neighbors_use_default_k() {
    let h = harness(None, LabelMode::Manual);
    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/property",
        json!({"model": "syn", "property": " Colors ", "image_ref": "img0001"}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["k"], 4);
    assert_eq!(body["heads"], json!(["2.0", "2.1", "5.0"]));
    assert_eq!(pairs(&body).len(), 4);

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/property",
        json!({"model": "syn", "property": "weather", "image_ref": "img0001"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_property"));
}

#[tokio::test]
async fn validation_errors() {
    let h = harness(None, LabelMode::Manual);
    let (s, body) = post(
        &h.app,
        "/analyze/contrastive",
        json!({"model": "syn", "layer": 5, "head": 0, "image_ref": "img0000", "text_a": "a red object"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::BAD_REQUEST, "arity"));

    // arity is checked before the model is looked up
    let (s, _) = post(&h.app, "/analyze/contrastive", json!({"model": "nope", "layer": 5, "head": 0, "image_ref": "x"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let req = Request::post("/analyze/segment")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (s, body) = call(&h.app, req).await;
    assert_eq!((s, error_code(&body)), (StatusCode::BAD_REQUEST, "malformed_request"));

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-image",
        json!({"model": "syn", "layer": 0, "head": 0, "image_ref": "img0000"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_head"));

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-image",
        json!({"model": "syn", "layer": 5, "head": 7, "image_ref": "img0000"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_head"));

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-image",
        json!({"model": "syn", "layer": 5, "head": 0, "image_ref": "missing.jpg"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_image"));

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-image",
        json!({"model": "syn", "layer": 5, "head": 0, "image_ref": "upload:abc"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_image"));
}

#[tokio::test]
async fn segmentation_from_bank_texts() {
    let h = harness(None, LabelMode::Manual);
    let (s, body) = post(
        &h.app,
        "/analyze/segment",
        json!({"model": "syn", "layer": 4, "head": 0, "image_ref": "img0002", "text": text_description(0)}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["grid"], json!([2, 2]));
    assert_eq!(body["normalization"], "minmax");
    let values: Vec<f64> = body["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));

    let pair = |a: String, b: String| {
        json!({"model": "syn", "layer": 4, "head": 0, "image_ref": "img0002", "text_a": a, "text_b": b})
    };
    let (s, ab) = post(&h.app, "/analyze/contrastive", pair(text_description(0), text_description(3))).await;
    assert_eq!(s, StatusCode::OK, "{ab}");
    assert_eq!(ab["normalization"], "signed");
    let (_, ba) = post(&h.app, "/analyze/contrastive", pair(text_description(3), text_description(0))).await;
    for (x, y) in ab["values"].as_array().unwrap().iter().zip(ba["values"].as_array().unwrap()) {
        assert!((x.as_f64().unwrap() + y.as_f64().unwrap()).abs() <= 1e-6);
    }
}

#[tokio::test]
async fn free_text_goes_through_sidecar() {
    let (url, calls) = start_sidecar().await;
    let h = harness(Some(url), LabelMode::Manual);
    let text = "a watercolor of a lighthouse";
    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-text",
        json!({"model": "syn", "layer": 2, "head": 1, "text": text}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(calls.encode_text.load(Ordering::SeqCst), 1);
    assert_eq!(body["k"], 8);

    let dump = read_dump(&h.dump).unwrap();
    let emb = Array1::from(stub_text_embedding(text));
    let want = per_head_text_neighbors(&dump.bank, HeadId::new(2, 1), emb.view(), 8).unwrap();
    let want: Vec<(String, f64)> = want.neighbors.into_iter().map(|n| (n.image_id, n.score)).collect();
    assert_eq!(pairs(&body), want);

    // bank texts never reach the sidecar
    let (s, _) = post(
        &h.app,
        "/analyze/neighbors/head-text",
        json!({"model": "syn", "layer": 2, "head": 1, "text": text_description(1)}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(calls.encode_text.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn uploads_are_encoded_once_and_analyzable() {
    let (url, calls) = start_sidecar().await;
    let h = harness(Some(url), LabelMode::Manual);
    let image = b"\x89PNG fake image bytes";
    let (s, first) = upload(&h.app, "syn", image).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    assert_eq!(first["cached"], false);
    let image_ref = first["image_ref"].as_str().unwrap().to_string();
    assert!(image_ref.starts_with("upload:"));

    let (_, second) = upload(&h.app, "syn", image).await;
    assert_eq!(second["image_ref"], image_ref.as_str());
    assert_eq!(second["cached"], true);
    assert_eq!(calls.encode.load(Ordering::SeqCst), 1);

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-image",
        json!({"model": "syn", "layer": 5, "head": 1, "image_ref": image_ref, "k": 3}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(pairs(&body).len(), 3);

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/property",
        json!({"model": "syn", "property": "animals", "image_ref": image_ref, "k": IMAGES}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    // an upload is not part of the pool, so nothing is excluded
    assert_eq!(pairs(&body).len(), IMAGES);

    let (s, body) = post(
        &h.app,
        "/analyze/segment",
        json!({"model": "syn", "layer": 5, "head": 1, "image_ref": image_ref, "text": text_description(2)}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["values"].as_array().unwrap().len(), 4);

    let (s, body) = upload(&h.app, "other", image).await;
    assert_eq!((s, error_code(&body)), (StatusCode::NOT_FOUND, "unknown_model"));
}

#[tokio::test]
async fn unreachable_sidecar_is_503() {
    let h = harness(Some(dead_url()), LabelMode::Manual);
    let (s, body) = upload(&h.app, "syn", b"bytes").await;
    assert_eq!((s, error_code(&body)), (StatusCode::SERVICE_UNAVAILABLE, "sidecar_unreachable"));

    let (s, body) = post(
        &h.app,
        "/analyze/neighbors/head-text",
        json!({"model": "syn", "layer": 2, "head": 0, "text": "not in the bank"}),
    )
    .await;
    assert_eq!((s, error_code(&body)), (StatusCode::SERVICE_UNAVAILABLE, "sidecar_unreachable"));
}

#[tokio::test]
async fn missing_labels_do_not_block_other_endpoints() {
    // cache-only with an empty cache: no labels, but per-head analyses work
    let dir = tempfile::tempdir().unwrap();
    let (dump, _) = fixture(dir.path());
    let cfg = ServiceConfig {
        mode: LabelMode::CacheOnly,
        models: vec![ModelConfig {
            id: None,
            dump,
            sidecar: None,
            manual: None,
        }],
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(AppState::new(load_all(&cfg).unwrap(), cfg.defaults)));
    let (_, models) = get(&app, "/models").await;
    assert_eq!(models["models"][0]["id"], "synthetic-fixture");
    assert_eq!(models["models"][0]["labelled"], false);
    let (s, body) = get(&app, "/models/synthetic-fixture/metrics").await;
    assert_eq!((s, error_code(&body)), (StatusCode::CONFLICT, "labels_unavailable"));
    let (s, _) = post(
        &app,
        "/analyze/neighbors/head-image",
        json!({"model": "synthetic-fixture", "layer": 2, "head": 0, "image_ref": "img0000"}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let h = harness(None, LabelMode::Manual);
    let body = json!({"model": "syn", "property": "colors", "image_ref": "img0003", "k": 6});
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = h.app.clone();
            let body = body.clone();
            tokio::spawn(async move { post(&app, "/analyze/neighbors/property", body).await })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    assert!(results.iter().all(|r| r == &results[0]));
}
