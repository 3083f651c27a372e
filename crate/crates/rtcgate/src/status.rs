//! `GET /status` endpoint shared by the gateways.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::get;
use axum::{Json, Router};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub type Snapshot = Arc<dyn Fn() -> Value + Send + Sync>;

pub async fn serve(listen: SocketAddr, snapshot: Snapshot) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let app = Router::new().route("/status", get(move || async move { Json(snapshot()) }));
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "status endpoint stopped");
        }
    });
    Ok((addr, task))
}

/// Fetches and decodes a status document.
pub async fn fetch(addr: SocketAddr) -> Result<Value, reqwest::Error> {
    reqwest::get(format!("http://{addr}/status")).await?.json().await
}
