//! Long-polling pubsub server and its HTTP client.
//!
//! `POST /ch/{id}` publishes, `GET /ch/{id}?since=&wait=` long-polls,
//! `POST /route` hands allocate and set-credentials envelopes to a gateway's
//! private channel, and `POST|DELETE /lgat/{id}` is how the central gateway
//! announces which local gateways are reachable.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use rtcgate_core::signal::{
    check_size, lgat_channel, unknown_lgat_reply, validate_publish, ChannelLog, Envelope, RoutedEnvelope, SignalError,
    MAX_PAYLOAD,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::Notify;

/// Longest a single poll may block.
pub const MAX_WAIT: Duration = Duration::from_secs(30);

#[derive(Default)]
struct Channel {
    log: ChannelLog,
    notify: Arc<Notify>,
}

/// Shared server state: every channel, plus the gateways currently reachable
/// through the central gateway.
pub struct SignalState {
    origin: Instant,
    channels: Mutex<HashMap<String, Channel>>,
    lgats: Mutex<BTreeSet<String>>,
}

impl Default for SignalState {
    fn default() -> Self {
        SignalState {
            origin: Instant::now(),
            channels: Mutex::new(HashMap::new()),
            lgats: Mutex::new(BTreeSet::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishResponse {
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollResponse {
    pub messages: Vec<Envelope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub delivered: bool,
    pub channel: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerStatus {
    pub channels: usize,
    pub messages: usize,
    pub lgats: Vec<String>,
}

impl SignalState {
    /// Appends without the reserved-prefix check; used by routing.
    pub fn append(&self, channel: &str, envelope: Envelope) -> u64 {
        let now = self.origin.elapsed();
        let mut channels = self.channels.lock();
        let ch = channels.entry(channel.to_string()).or_default();
        let seq = ch.log.append(envelope, now);
        ch.notify.notify_waiters();
        seq
    }

    pub fn publish(&self, channel: &str, envelope: Envelope) -> Result<u64, SignalError> {
        let encoded = serde_json::to_vec(&envelope).map(|v| v.len()).unwrap_or(usize::MAX);
        validate_publish(channel, encoded)?;
        Ok(self.append(channel, envelope))
    }

    /// Envelopes after `since`, waiting up to `wait` for the first one.
    pub async fn poll(&self, channel: &str, since: u64, wait: Duration) -> Vec<Envelope> {
        let deadline = tokio::time::Instant::now() + wait.min(MAX_WAIT);
        let notify = self
            .channels
            .lock()
            .entry(channel.to_string())
            .or_default()
            .notify
            .clone();
        loop {
            let notified = notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let messages = self.since(channel, since);
            if !messages.is_empty() {
                return messages;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Vec::new();
            }
        }
    }

    fn since(&self, channel: &str, since: u64) -> Vec<Envelope> {
        let now = self.origin.elapsed();
        let mut channels = self.channels.lock();
        match channels.get_mut(channel) {
            Some(ch) => {
                ch.log.prune(now);
                ch.log.since(since)
            }
            None => Vec::new(),
        }
    }

    /// Delivers a gateway-bound envelope on the gateway's control channel, or
    /// an unknown-lgat reply to the requester.
    pub fn route(&self, envelope: Envelope) -> Result<RouteResponse, SignalError> {
        let target = envelope.target_lgat()?;
        if self.lgats.lock().contains(&target) {
            let channel = lgat_channel(&target);
            let seq = self.append(&channel, envelope);
            return Ok(RouteResponse {
                delivered: true,
                channel,
                seq,
            });
        }
        let RoutedEnvelope { channel, envelope } =
            unknown_lgat_reply(&envelope, "signal").ok_or_else(|| SignalError::UnknownLgat(target.clone()))?;
        let seq = self.publish(&channel, envelope)?;
        Ok(RouteResponse {
            delivered: false,
            channel,
            seq,
        })
    }

    pub fn register_lgat(&self, lgat_id: &str) {
        self.lgats.lock().insert(lgat_id.to_string());
    }

    pub fn unregister_lgat(&self, lgat_id: &str) -> bool {
        self.lgats.lock().remove(lgat_id)
    }

    pub fn status(&self) -> ServerStatus {
        let channels = self.channels.lock();
        ServerStatus {
            channels: channels.len(),
            messages: channels.values().map(|c| c.log.len()).sum(),
            lgats: self.lgats.lock().iter().cloned().collect(),
        }
    }
}

struct ApiError(StatusCode, String, String);

impl From<SignalError> for ApiError {
    fn from(e: SignalError) -> Self {
        let (status, code) = match &e {
            SignalError::PayloadTooLarge { .. } => (StatusCode::PAYLOAD_TOO_LARGE, "payload-too-large"),
            SignalError::ReservedChannel(_) => (StatusCode::FORBIDDEN, "reserved-channel"),
            SignalError::EmptyChannel => (StatusCode::BAD_REQUEST, "empty-channel"),
            SignalError::UnknownLgat(_) => (StatusCode::NOT_FOUND, "unknown-lgat"),
            SignalError::NotRoutable(_) => (StatusCode::BAD_REQUEST, "not-routable"),
            SignalError::BadBody(_) => (StatusCode::BAD_REQUEST, "bad-body"),
        };
        ApiError(status, code.into(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

fn parse_envelope(body: &[u8]) -> Result<Envelope, ApiError> {
    check_size(body.len())?;
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, "bad-envelope".into(), e.to_string()))
}

#[derive(Deserialize)]
struct PollParams {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    wait: u64,
}

async fn publish(
    State(hub): State<Arc<SignalState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<PublishResponse>, ApiError> {
    let envelope = parse_envelope(&body)?;
    let seq = hub.publish(&id, envelope)?;
    Ok(Json(PublishResponse { seq }))
}

async fn poll(
    State(hub): State<Arc<SignalState>>,
    Path(id): Path<String>,
    Query(p): Query<PollParams>,
) -> Json<PollResponse> {
    let messages = hub.poll(&id, p.since, Duration::from_millis(p.wait)).await;
    Json(PollResponse { messages })
}

async fn route(State(hub): State<Arc<SignalState>>, body: Bytes) -> Result<Json<RouteResponse>, ApiError> {
    let envelope = parse_envelope(&body)?;
    Ok(Json(hub.route(envelope)?))
}

async fn register(State(hub): State<Arc<SignalState>>, Path(id): Path<String>) -> StatusCode {
    hub.register_lgat(&id);
    StatusCode::NO_CONTENT
}

async fn unregister(State(hub): State<Arc<SignalState>>, Path(id): Path<String>) -> StatusCode {
    if hub.unregister_lgat(&id) {
        StatusCode::NO_CONTENT
    } else {
        StatusCode::NOT_FOUND
    }
}

async fn status(State(hub): State<Arc<SignalState>>) -> Json<ServerStatus> {
    Json(hub.status())
}

pub fn router(hub: Arc<SignalState>) -> Router {
    Router::new()
        .route("/ch/{*id}", post(publish).get(poll))
        .route("/route", post(route))
        .route("/lgat/{id}", post(register).delete(unregister))
        .route("/status", get(status))
        // Leave headroom so oversize bodies reach the handler and get the
        // JSON error rather than a bare 413.
        .layer(DefaultBodyLimit::max(MAX_PAYLOAD * 16))
        .with_state(hub)
}

/// A bound, running server.
pub struct SignalServer {
    pub addr: SocketAddr,
    pub hub: Arc<SignalState>,
    task: tokio::task::JoinHandle<()>,
}

impl SignalServer {
    pub async fn bind(listen: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen).await?;
        let addr = listener.local_addr()?;
        let hub = Arc::new(SignalState::default());
        let app = router(hub.clone());
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!(error = %e, "signal server stopped");
            }
        });
        Ok(SignalServer { addr, hub, task })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn join(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for SignalServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server refused with {status}: {body}")]
    Refused { status: u16, body: String },
}

/// HTTP client for one participant.
#[derive(Debug, Clone)]
pub struct SignalClient {
    base: String,
    http: reqwest::Client,
}

impl SignalClient {
    pub fn new(base: &str) -> Self {
        SignalClient {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::builder()
                .timeout(MAX_WAIT + Duration::from_secs(10))
                .build()
                .expect("http client"),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn check(response: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let body = response.text().await.unwrap_or_default();
        Err(ClientError::Refused {
            status: status.as_u16(),
            body,
        })
    }

    pub async fn publish(&self, channel: &str, envelope: &Envelope) -> Result<u64, ClientError> {
        let response = self
            .http
            .post(format!("{}/ch/{channel}", self.base))
            .json(envelope)
            .send()
            .await?;
        Ok(Self::check(response).await?.json::<PublishResponse>().await?.seq)
    }

    pub async fn poll(&self, channel: &str, since: u64, wait: Duration) -> Result<Vec<Envelope>, ClientError> {
        let url = format!("{}/ch/{channel}?since={since}&wait={}", self.base, wait.as_millis());
        let response = self.http.get(url).send().await?;
        Ok(Self::check(response).await?.json::<PollResponse>().await?.messages)
    }

    pub async fn route(&self, envelope: &Envelope) -> Result<RouteResponse, ClientError> {
        let response = self
            .http
            .post(format!("{}/route", self.base))
            .json(envelope)
            .send()
            .await?;
        Ok(Self::check(response).await?.json().await?)
    }

    pub async fn register_lgat(&self, lgat_id: &str) -> Result<(), ClientError> {
        let response = self.http.post(format!("{}/lgat/{lgat_id}", self.base)).send().await?;
        Self::check(response).await.map(drop)
    }

    pub async fn unregister_lgat(&self, lgat_id: &str) -> Result<(), ClientError> {
        let response = self.http.delete(format!("{}/lgat/{lgat_id}", self.base)).send().await?;
        Self::check(response).await.map(drop)
    }

    pub async fn status(&self) -> Result<ServerStatus, ClientError> {
        let response = self.http.get(format!("{}/status", self.base)).send().await?;
        Ok(Self::check(response).await?.json().await?)
    }
}

/// Follows one channel, yielding each envelope once in sequence order.
pub struct Subscription {
    client: SignalClient,
    channel: String,
    since: u64,
    wait: Duration,
}

impl Subscription {
    pub fn new(client: SignalClient, channel: &str, wait: Duration) -> Self {
        Subscription {
            client,
            channel: channel.to_string(),
            since: 0,
            wait,
        }
    }

    pub fn channel(&self) -> &str {
        &self.channel
    }

    /// Moves past everything already on the channel.
    pub async fn skip_existing(&mut self) -> Result<(), ClientError> {
        let messages = self.client.poll(&self.channel, self.since, Duration::ZERO).await?;
        if let Some(last) = messages.last() {
            self.since = self.since.max(last.seq);
        }
        Ok(())
    }

    /// One long-poll round. Errors are retried after a short pause.
    pub async fn next_batch(&mut self) -> Vec<Envelope> {
        loop {
            match self.client.poll(&self.channel, self.since, self.wait).await {
                Ok(messages) => {
                    let fresh: Vec<Envelope> = messages.into_iter().filter(|m| m.seq > self.since).collect();
                    if let Some(last) = fresh.last() {
                        self.since = last.seq;
                    }
                    return fresh;
                }
                Err(e) => {
                    tracing::debug!(channel = %self.channel, error = %e, "poll failed");
                    tokio::time::sleep(Duration::from_millis(200)).await;
                }
            }
        }
    }
}
