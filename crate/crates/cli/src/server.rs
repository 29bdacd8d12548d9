//! HTTP front end: every request goes through [`Gateway::handle_request`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{ConnectInfo, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use meshgate::gateway::Gateway;
use serde_json::json;
use tokio::net::TcpListener;

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new().fallback(handle).with_state(gw)
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    v.strip_prefix("Bearer ").map(|t| t.trim().to_string())
}

async fn handle(
    State(gw): State<Arc<Gateway>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let token = bearer(&headers);
    let path = uri.path_and_query().map_or_else(|| uri.path().to_string(), |p| p.as_str().to_string());
    let joined = tokio::task::spawn_blocking(move || {
        let ctx = gw.request(method.as_str(), &path, token.as_deref(), body.to_vec(), peer.ip());
        gw.handle_request(ctx)
    })
    .await;
    match joined {
        Ok(r) => {
            let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(r.body)).into_response()
        }
        Err(e) => {
            log::error!("request handler panicked: {e}");
            (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "INTERNAL", "message": "handler failed"}))).into_response()
        }
    }
}

/// Serves until the process exits.
pub async fn serve(gw: Arc<Gateway>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(gw).into_make_service_with_connect_info::<SocketAddr>()).await
}
