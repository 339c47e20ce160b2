//! Client for the encode sidecar, the process that actually runs the model.
//!
//! Wire protocol (version 1):
//! - `GET /health` returns `{"protocol": 1, "model_id", "pretrain_tag", "patch_grid", "embed_dim"}`
//! - `POST /encode` takes raw image bytes and returns a single-image dump with tokens
//! - `POST /encode-text` takes `{"texts": [...]}` and returns `{"embeddings": [[...], ...]}`

use std::time::Duration;

use cliplens_core::store::{read_dump_bytes, Dump, ModelMeta};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SidecarError {
    #[error("sidecar at {url} is unreachable: {reason}")]
    Unreachable { url: String, reason: String },
    #[error("sidecar returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("sidecar protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub protocol: u32,
    pub model_id: String,
    pub pretrain_tag: String,
    pub patch_grid: (usize, usize),
    pub embed_dim: usize,
}

#[derive(Serialize)]
struct EncodeTextRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeTextResponse {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SidecarClient {
    base: String,
    http: reqwest::Client,
}

impl SidecarClient {
    pub fn new(base_url: &str) -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client builds with static settings");
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<reqwest::Response, SidecarError> {
        let resp = req.send().await.map_err(|e| SidecarError::Unreachable {
            url: self.base.clone(),
            reason: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(SidecarError::Status {
                status: status.as_u16(),
                body,
            });
        }
        Ok(resp)
    }

    pub async fn health(&self) -> Result<Health, SidecarError> {
        let resp = self.send(self.http.get(self.url("/health"))).await?;
        let health: Health = resp
            .json()
            .await
            .map_err(|e| SidecarError::Protocol(format!("health body: {e}")))?;
        if health.protocol != PROTOCOL_VERSION {
            return Err(SidecarError::Protocol(format!(
                "protocol {} not supported (expected {PROTOCOL_VERSION})",
                health.protocol
            )));
        }
        Ok(health)
    }

    /// Encodes one image and checks the returned dump against `meta`.
    pub async fn encode(&self, image: Vec<u8>, meta: &ModelMeta) -> Result<Dump, SidecarError> {
        let req = self
            .http
            .post(self.url("/encode"))
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(image);
        let bytes = self
            .send(req)
            .await?
            .bytes()
            .await
            .map_err(|e| SidecarError::Protocol(format!("encode body: {e}")))?;
        let dump = read_dump_bytes(bytes.to_vec()).map_err(|e| SidecarError::Protocol(format!("encode dump: {e}")))?;
        check_upload(&dump, meta)?;
        Ok(dump)
    }

    pub async fn encode_text(&self, texts: &[String], embed_dim: usize) -> Result<Array2<f64>, SidecarError> {
        let req = self.http.post(self.url("/encode-text")).json(&EncodeTextRequest { texts });
        let body: EncodeTextResponse = self
            .send(req)
            .await?
            .json()
            .await
            .map_err(|e| SidecarError::Protocol(format!("encode-text body: {e}")))?;
        if body.embeddings.len() != texts.len() {
            return Err(SidecarError::Protocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        let mut out = Array2::zeros((texts.len(), embed_dim));
        for (i, row) in body.embeddings.iter().enumerate() {
            if row.len() != embed_dim {
                return Err(SidecarError::Protocol(format!(
                    "embedding width {} does not match model width {embed_dim}",
                    row.len()
                )));
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
        }
        Ok(out)
    }
}

fn check_upload(dump: &Dump, meta: &ModelMeta) -> Result<(), SidecarError> {
    let got = &dump.bank.meta;
    if dump.bank.len() != 1 {
        return Err(SidecarError::Protocol(format!(
            "encode returned {} images, expected 1",
            dump.bank.len()
        )));
    }
    let same_layout = got.embed_dim == meta.embed_dim
        && got.analyzed_layers == meta.analyzed_layers
        && got.heads_per_layer == meta.heads_per_layer
        && got.patch_grid == meta.patch_grid;
    if !same_layout {
        return Err(SidecarError::Protocol(format!(
            "sidecar model {} ({}) does not match the dump layout of {} ({})",
            got.model_id, got.pretrain_tag, meta.model_id, meta.pretrain_tag
        )));
    }
    if !dump.tokens.has_tokens(&dump.bank.images[0].id) {
        return Err(SidecarError::Protocol("encode dump carries no token tensor".into()));
    }
    Ok(())
}
