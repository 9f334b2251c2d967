//! HTTP front end: every request is handed to [`Api::route`] on the
//! blocking pool.

use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::IntoResponse;
use axum::Router;

use mc_core::service::Api;

async fn dispatch(api: Arc<Api>, method: Method, uri: Uri, body: Bytes) -> impl IntoResponse {
    let path = uri.path_and_query().map_or_else(|| uri.path().to_string(), |p| p.as_str().to_string());
    let body = String::from_utf8_lossy(&body).into_owned();
    let response = tokio::task::spawn_blocking(move || api.route(method.as_str(), &path, &body))
        .await
        .expect("api handler panicked");
    let status = StatusCode::from_u16(response.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let json = serde_json::to_string(&response).expect("response serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], json)
}

pub fn serve(api: Api, addr: &str) -> Result<()> {
    let api = Arc::new(api);
    let app = Router::new().fallback(move |method: Method, uri: Uri, body: Bytes| dispatch(api.clone(), method, uri, body));
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await.context("server")
    })
}
