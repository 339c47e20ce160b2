#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use cliplens_core::store::encode_dump;
use cliplens_core::synthetic::{generate, SyntheticSpec};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const IMAGES: usize = 24;
pub const DIM: usize = 8;

pub fn spec(images: usize) -> SyntheticSpec {
    SyntheticSpec {
        images,
        embed_dim: DIM,
        heads_per_layer: 2,
        with_tokens: true,
        ..SyntheticSpec::default()
    }
}

/// Writes a synthetic dump plus annotations for all eight heads.
pub fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let f = generate(&spec(IMAGES), 21);
    let dump = dir.join("model.hcd");
    cliplens_core::store::write_dump(&f.bank, &f.tokens, &f.texts, &dump).unwrap();
    let labels = ["colors", "colors", "animals", "location", "texture", "animals", "colors", "style"];
    let mut notes = serde_json::Map::new();
    for (h, label) in f.bank.meta.analyzed_heads().iter().zip(labels) {
        notes.insert(
            h.to_string(),
            json!({"label": label, "match_flags": [1, 1, 0, 1, 0]}),
        );
    }
    let manual = dir.join("notes.json");
    std::fs::write(&manual, serde_json::to_string(&notes).unwrap()).unwrap();
    (dump, manual)
}

#[derive(Default)]
pub struct SidecarCalls {
    pub encode: AtomicUsize,
    pub encode_text: AtomicUsize,
}

fn seed_of(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Deterministic stand-in embedding for a text.
pub fn stub_text_embedding(text: &str) -> Vec<f64> {
    let d = Sha256::digest(text.as_bytes());
    (0..DIM).map(|i| d[i] as f64 / 255.0 - 0.5).collect()
}

async fn encode(State(calls): State<Arc<SidecarCalls>>, body: Bytes) -> Vec<u8> {
    calls.encode.fetch_add(1, Ordering::SeqCst);
    let f = generate(&spec(1), seed_of(&body));
    let mut out = Vec::new();
    encode_dump(&f.bank, &f.tokens, &f.texts, &mut out).unwrap();
    out
}

async fn encode_text(State(calls): State<Arc<SidecarCalls>>, Json(body): Json<Value>) -> Json<Value> {
    calls.encode_text.fetch_add(1, Ordering::SeqCst);
    let texts = body["texts"].as_array().unwrap();
    let rows: Vec<Vec<f64>> = texts.iter().map(|t| stub_text_embedding(t.as_str().unwrap())).collect();
    Json(json!({ "embeddings": rows }))
}

/// Serves the sidecar protocol on an ephemeral port.
pub async fn start_sidecar() -> (String, Arc<SidecarCalls>) {
    let calls = Arc::new(SidecarCalls::default());
    let app = Router::new()
        .route(
            "/health",
            get(|| async {
                Json(json!({
                    "protocol": 1,
                    "model_id": "synthetic",
                    "pretrain_tag": "fixture",
                    "patch_grid": [2, 2],
                    "embed_dim": DIM,
                }))
            }),
        )
        .route("/encode", post(encode))
        .route("/encode-text", post(encode_text))
        .with_state(calls.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), calls)
}

/// An address nothing listens on.
pub fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}
