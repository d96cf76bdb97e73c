use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use super::activity::EventKind;
use super::service::{SearchEngine, SearchRequest};
use crate::catalog::ImageBlob;
use crate::error::{Error, Result};
use crate::towers::ImagePatchGrid;

/// Body of `POST /search`. `image_b64` is a base64 PGM image.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBody {
    pub request_id: Option<String>,
    pub image_b64: Option<String>,
    pub vector: Option<Vec<f64>>,
    pub i2i_vector: Option<Vec<f64>>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventBody {
    pub request_id: String,
    pub kind: EventKind,
    pub product_id: String,
}

fn error_response(e: Error) -> Response {
    let status = match e {
        Error::Request(_) | Error::Usage(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(json!({ "error": e.to_string() }))).into_response()
}

fn decode_request(engine: &SearchEngine, body: SearchBody) -> Result<SearchRequest> {
    let image = match body.image_b64 {
        Some(b64) => {
            let bytes = B64
                .decode(b64.as_bytes())
                .map_err(|e| Error::Request(format!("image_b64: {e}")))?;
            let (size, patch) = engine.model().config().grid();
            Some(ImagePatchGrid::from_blob(&ImageBlob(bytes), size, patch).map_err(|e| Error::Request(e.to_string()))?)
        }
        None => None,
    };
    Ok(SearchRequest {
        request_id: body.request_id,
        image,
        vector: body.vector,
        i2i_vector: body.i2i_vector,
        page_size: body.page_size,
    })
}

async fn search(State(engine): State<Arc<SearchEngine>>, body: Bytes) -> Response {
    let work = tokio::task::spawn_blocking(move || {
        let body = match serde_json::from_slice::<SearchBody>(&body) {
            Ok(b) => b,
            Err(e) => return Err(engine.reject_payload(None, Error::Request(format!("invalid search body: {e}")))),
        };
        let id = body.request_id.clone();
        match decode_request(&engine, body) {
            Ok(req) => engine.handle_search(&req),
            Err(e) => Err(engine.reject_payload(id.as_deref(), e)),
        }
    });
    match work.await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(Error::State(format!("search task failed: {e}"))),
    }
}

async fn event(State(engine): State<Arc<SearchEngine>>, body: Bytes) -> Response {
    let r = serde_json::from_slice::<EventBody>(&body)
        .map_err(|e| Error::Request(format!("invalid event body: {e}")))
        .and_then(|b| engine.record_event(&b.request_id, b.kind, &b.product_id));
    match r {
        Ok(()) => Json(json!({ "ok": true })).into_response(),
        Err(e) => error_response(e),
    }
}

async fn healthz(State(engine): State<Arc<SearchEngine>>) -> Response {
    let (i2i, miem) = engine.indexes().counts();
    Json(json!({ "status": "ok", "index_counts": { "i2i": i2i, "miem": miem } })).into_response()
}

/// `POST /search`, `POST /event` and `GET /healthz`.
pub fn router(engine: Arc<SearchEngine>) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/event", post(event))
        .route("/healthz", get(healthz))
        .with_state(engine)
}

/// Serves until Ctrl-C, then flushes the activity log.
pub async fn serve(engine: Arc<SearchEngine>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    engine.activity_log().flush()
}
