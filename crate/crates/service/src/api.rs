use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use keylab_core::keystore::SupplyKey;
use keylab_core::kmlink::LinkError;

use crate::node::{DigestReport, IngestSummary, Node, NodeError, NodeStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    #[serde(rename = "key_ID")]
    pub key_id: Uuid,
    /// Base64 of the key material.
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyContainer {
    pub keys: Vec<KeyEntry>,
}

impl KeyContainer {
    fn from_keys(keys: &[SupplyKey]) -> Self {
        Self {
            keys: keys
                .iter()
                .map(|k| KeyEntry {
                    key_id: k.uuid,
                    key: B64.encode(&k.material),
                })
                .collect(),
        }
    }
}

/// Raw key handed over by the quantum layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawKey {
    pub stream: u64,
    /// Base64 of the key material.
    pub key: String,
}

pub struct ApiError {
    error: NodeError,
    retry_after_s: f64,
}

#[derive(Serialize)]
struct ErrorBody {
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    retry_after_s: Option<f64>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.error {
            NodeError::BadRequest(_) => StatusCode::BAD_REQUEST,
            NodeError::UnknownSae(_) | NodeError::UnknownKey(_) => StatusCode::NOT_FOUND,
            NodeError::Unavailable | NodeError::Rejected(_) | NodeError::PeerTimeout => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            NodeError::Link(LinkError::Wire(_)) => StatusCode::BAD_REQUEST,
            NodeError::Link(_) => StatusCode::CONFLICT,
        };
        let unavailable = status == StatusCode::SERVICE_UNAVAILABLE;
        let body = ErrorBody {
            message: self.error.to_string(),
            retry_after_s: unavailable.then_some(self.retry_after_s),
        };
        let mut resp = (status, Json(body)).into_response();
        if unavailable {
            // The header carries whole seconds only.
            let secs = self.retry_after_s.ceil().max(1.0) as u64;
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

type Shared = State<Arc<Node>>;

fn fail(node: &Node, error: NodeError) -> ApiError {
    ApiError {
        error,
        retry_after_s: node.config().hold_time.as_secs_f64(),
    }
}

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, name: &str, default: T) -> Result<T, NodeError> {
    match q.get(name) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| NodeError::BadRequest(format!("`{name}` is not a valid value: {v:?}"))),
    }
}

async fn enc_keys(
    State(node): Shared,
    Path(slave_id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<KeyContainer>, ApiError> {
    let default_bits = (node.config().settings.default_key_size_bytes * 8) as u32;
    let number = param(&q, "number", 1usize).map_err(|e| fail(&node, e))?;
    let size = param(&q, "size", default_bits).map_err(|e| fail(&node, e))?;
    let keys = node
        .enc_keys(&slave_id, number, size)
        .await
        .map_err(|e| fail(&node, e))?;
    Ok(Json(KeyContainer::from_keys(&keys)))
}

async fn dec_keys(
    State(node): Shared,
    Path(master_id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<KeyContainer>, ApiError> {
    let Some(raw) = q.get("key_ID") else {
        return Err(fail(&node, NodeError::BadRequest("`key_ID` is required".into())));
    };
    let uuid = Uuid::parse_str(raw)
        .map_err(|_| fail(&node, NodeError::BadRequest(format!("`key_ID` is not a UUID: {raw:?}"))))?;
    let key = node.dec_key(&master_id, &uuid).map_err(|e| fail(&node, e))?;
    Ok(Json(KeyContainer::from_keys(&[key])))
}

async fn status(State(node): Shared, Path(slave_id): Path<String>) -> Result<Json<NodeStatus>, ApiError> {
    node.status(&slave_id).map(Json).map_err(|e| fail(&node, e))
}

async fn kmlink(State(node): Shared, body: Bytes) -> Result<StatusCode, ApiError> {
    node.receive(&body).map_err(|e| {
        tracing::error!(error = %e, "link message refused");
        fail(&node, e)
    })?;
    Ok(StatusCode::NO_CONTENT)
}

async fn qkd_keys(State(node): Shared, Json(raw): Json<RawKey>) -> Result<Json<IngestSummary>, ApiError> {
    let material = B64
        .decode(raw.key.as_bytes())
        .map_err(|e| fail(&node, NodeError::BadRequest(format!("key is not base64: {e}"))))?;
    if material.is_empty() {
        return Err(fail(&node, NodeError::BadRequest("key is empty".into())));
    }
    node.ingest(raw.stream, &material).map(Json).map_err(|e| fail(&node, e))
}

async fn digest(State(node): Shared) -> Json<DigestReport> {
    Json(node.digest())
}

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/api/v1/keys/{slave_id}/enc_keys", get(enc_keys))
        .route("/api/v1/keys/{master_id}/dec_keys", get(dec_keys))
        .route("/api/v1/keys/{slave_id}/status", get(status))
        .route("/api/v1/kmlink", post(kmlink))
        .route("/api/v1/qkd/keys", post(qkd_keys))
        .route("/api/v1/admin/digest", get(digest))
        .with_state(node)
}

/// Serves `node` on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, node: Arc<Node>) -> std::io::Result<()> {
    axum::serve(listener, router(node)).await
}
