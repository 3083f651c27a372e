//! Central gateway process: accepts one tunnel per local gateway, routes data
//! frames between them, and relays control envelopes between the pubsub
//! server and the gateways.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rtcgate_core::cgat::{ConnId, Hub, HubAction, RouterCounters};
use rtcgate_core::signal::{lgat_channel, unknown_lgat_reply, RoutedEnvelope};
use rtcgate_core::tunnel::{Codec, FrameType, TunnelFrame};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::events::emit;
use crate::signal::{SignalClient, Subscription};
use crate::status;
use crate::tunnel_io::{spawn_writer, FrameReader, FrameSender, Hop};

#[derive(Debug, Clone)]
pub struct CgatOptions {
    pub listen: SocketAddr,
    pub signal: Option<String>,
    pub status: SocketAddr,
    pub lease_ttl: Duration,
    pub checksum: bool,
    /// Emulated network on every frame the central gateway writes.
    pub hop: Hop,
}

impl Default for CgatOptions {
    fn default() -> Self {
        CgatOptions {
            listen: "127.0.0.1:8080".parse().unwrap(),
            signal: None,
            status: "127.0.0.1:0".parse().unwrap(),
            lease_ttl: rtcgate_core::tunnel::DEFAULT_LEASE_TTL,
            checksum: false,
            hop: Hop::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnStatus {
    pub conn: u64,
    pub remote: SocketAddr,
    pub lgat_id: Option<String>,
    pub frames_in: u64,
    pub frames_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStatus {
    pub session_id: String,
    pub owner_lgat: String,
    pub peer_lgat: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgatStatus {
    pub lgats: BTreeMap<String, u64>,
    pub connections: Vec<ConnStatus>,
    pub sessions: Vec<RouteStatus>,
    pub counters: RouterCounters,
    /// Data frames carried, by frame type name.
    pub frames: BTreeMap<String, u64>,
    pub control_relayed: u64,
    pub published: u64,
}

struct Conn {
    sender: FrameSender,
    remote: SocketAddr,
    lgat_id: Option<String>,
    frames_in: u64,
    frames_out: u64,
}

struct Shared {
    origin: Instant,
    hub: Mutex<Hub>,
    conns: Mutex<HashMap<ConnId, Conn>>,
    pollers: Mutex<HashMap<String, JoinHandle<()>>>,
    frames: Mutex<BTreeMap<String, u64>>,
    next_conn: AtomicU64,
    control_relayed: AtomicU64,
    published: AtomicU64,
    publish_tx: Option<mpsc::UnboundedSender<RoutedEnvelope>>,
    signal: Option<SignalClient>,
    options: CgatOptions,
}

/// A running central gateway.
pub struct Cgat {
    pub addr: SocketAddr,
    pub status_addr: SocketAddr,
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

fn frame_name(t: FrameType) -> &'static str {
    match t {
        FrameType::Hello => "hello",
        FrameType::LeaseOpen => "lease-open",
        FrameType::LeaseOpenAck => "lease-open-ack",
        FrameType::LeaseRenew => "lease-renew",
        FrameType::LeaseClose => "lease-close",
        FrameType::Data => "data",
        FrameType::Error => "error",
        FrameType::Control => "control",
    }
}

impl Cgat {
    pub async fn start(options: CgatOptions) -> std::io::Result<Cgat> {
        let listener = TcpListener::bind(options.listen).await?;
        let addr = listener.local_addr()?;
        let signal = options.signal.as_deref().map(SignalClient::new);

        let mut tasks = Vec::new();
        let publish_tx = signal.clone().map(|client| {
            let (tx, rx) = mpsc::unbounded_channel();
            tasks.push(tokio::spawn(publisher(client, rx)));
            tx
        });

        let shared = Arc::new(Shared {
            origin: Instant::now(),
            hub: Mutex::new(Hub::new(options.lease_ttl)),
            conns: Mutex::new(HashMap::new()),
            pollers: Mutex::new(HashMap::new()),
            frames: Mutex::new(BTreeMap::new()),
            next_conn: AtomicU64::new(1),
            control_relayed: AtomicU64::new(0),
            published: AtomicU64::new(0),
            publish_tx,
            signal,
            options,
        });

        let snapshot = {
            let shared = shared.clone();
            Arc::new(move || serde_json::to_value(shared.status()).unwrap_or_default())
        };
        let (status_addr, status_task) = status::serve(shared.options.status, snapshot).await?;
        tasks.push(status_task);
        tasks.push(tokio::spawn(accept_loop(listener, shared.clone())));
        tasks.push(tokio::spawn(ticker(shared.clone())));

        Ok(Cgat {
            addr,
            status_addr,
            shared,
            tasks,
        })
    }

    pub fn status(&self) -> CgatStatus {
        self.shared.status()
    }

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
        for (_, t) in self.shared.pollers.lock().drain() {
            t.abort();
        }
        self.shared.conns.lock().clear();
    }
}

impl Drop for Cgat {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Shared {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn status(&self) -> CgatStatus {
        let hub = self.hub.lock();
        let router = hub.router();
        let lgats = router.registered().map(|r| (r.lgat_id.clone(), r.conn.0)).collect();
        let mut sessions: Vec<RouteStatus> = router
            .routes()
            .map(|r| RouteStatus {
                session_id: r.session_id.to_string(),
                owner_lgat: r.owner_lgat.clone(),
                peer_lgat: r.peer_lgat.clone(),
            })
            .collect();
        sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let counters = router.counters();
        drop(hub);
        let mut connections: Vec<ConnStatus> = self
            .conns
            .lock()
            .iter()
            .map(|(id, c)| ConnStatus {
                conn: id.0,
                remote: c.remote,
                lgat_id: c.lgat_id.clone(),
                frames_in: c.frames_in,
                frames_out: c.frames_out,
            })
            .collect();
        connections.sort_by_key(|c| c.conn);
        CgatStatus {
            lgats,
            connections,
            sessions,
            counters,
            frames: self.frames.lock().clone(),
            control_relayed: self.control_relayed.load(Ordering::Relaxed),
            published: self.published.load(Ordering::Relaxed),
        }
    }

    fn on_frame(self: &Arc<Self>, conn: ConnId, frame: TunnelFrame) {
        *self
            .frames
            .lock()
            .entry(frame_name(frame.frame_type).into())
            .or_default() += 1;
        if let Some(c) = self.conns.lock().get_mut(&conn) {
            c.frames_in += 1;
        }
        let actions = self.hub.lock().on_frame(conn, frame, self.now());
        self.apply(actions);
    }

    fn apply(self: &Arc<Self>, actions: Vec<HubAction>) {
        for action in actions {
            match action {
                HubAction::Send { conn, frame } => {
                    let mut conns = self.conns.lock();
                    if let Some(c) = conns.get_mut(&conn) {
                        c.frames_out += 1;
                        c.sender.send(frame);
                    }
                }
                HubAction::Publish(routed) => {
                    if frame_is_session_reply(&routed) {
                        emit(
                            "cgat",
                            "reply",
                            json!({ "channel": routed.channel, "kind": routed.envelope.kind }),
                        );
                    }
                    match &self.publish_tx {
                        Some(tx) => {
                            self.published.fetch_add(1, Ordering::Relaxed);
                            let _ = tx.send(routed);
                        }
                        None => tracing::warn!(channel = %routed.channel, "no signal server to publish to"),
                    }
                }
                HubAction::Registered { lgat_id, conn } => {
                    if let Some(c) = self.conns.lock().get_mut(&conn) {
                        c.lgat_id = Some(lgat_id.clone());
                    }
                    emit("cgat", "lgat-registered", json!({ "lgat_id": lgat_id, "conn": conn.0 }));
                    self.follow(&lgat_id);
                }
                HubAction::Disconnect(conn) => {
                    self.conns.lock().remove(&conn);
                }
            }
        }
    }

    /// Starts relaying the gateway's control channel, once per id.
    fn follow(self: &Arc<Self>, lgat_id: &str) {
        let Some(client) = self.signal.clone() else { return };
        let mut pollers = self.pollers.lock();
        if pollers.contains_key(lgat_id) {
            let client = client.clone();
            let id = lgat_id.to_string();
            tokio::spawn(async move { register(&client, &id).await });
            return;
        }
        let shared = self.clone();
        let id = lgat_id.to_string();
        pollers.insert(
            id.clone(),
            tokio::spawn(async move {
                register(&client, &id).await;
                let mut sub = Subscription::new(client, &lgat_channel(&id), Duration::from_secs(20));
                loop {
                    for envelope in sub.next_batch().await {
                        let action = shared.hub.lock().forward_control(&id, envelope.clone());
                        match action {
                            Some(action) => {
                                shared.control_relayed.fetch_add(1, Ordering::Relaxed);
                                shared.apply(vec![action]);
                            }
                            None => {
                                if let Some(reply) = unknown_lgat_reply(&envelope, "cgat") {
                                    shared.apply(vec![HubAction::Publish(reply)]);
                                }
                            }
                        }
                    }
                }
            }),
        );
    }

    fn disconnected(self: &Arc<Self>, conn: ConnId) {
        self.conns.lock().remove(&conn);
        let lgat = self.hub.lock().disconnected(conn);
        if let Some(id) = lgat {
            emit("cgat", "lgat-disconnected", json!({ "lgat_id": id, "conn": conn.0 }));
            if let Some(client) = self.signal.clone() {
                tokio::spawn(async move {
                    if let Err(e) = client.unregister_lgat(&id).await {
                        tracing::debug!(error = %e, "unregister failed");
                    }
                });
            }
        }
    }
}

fn frame_is_session_reply(routed: &RoutedEnvelope) -> bool {
    use rtcgate_core::signal::EnvelopeKind;
    matches!(
        routed.envelope.kind,
        EnvelopeKind::AllocateReply | EnvelopeKind::SetCredentialsAck
    )
}

async fn register(client: &SignalClient, lgat_id: &str) {
    for attempt in 0..20u32 {
        match client.register_lgat(lgat_id).await {
            Ok(()) => {
                emit("cgat", "lgat-routable", json!({ "lgat_id": lgat_id }));
                return;
            }
            Err(e) => {
                tracing::warn!(error = %e, attempt, "registering with the signal server failed");
                tokio::time::sleep(Duration::from_millis(250)).await;
            }
        }
    }
}

/// Publishes in order, one at a time, so replies keep their sequence.
async fn publisher(client: SignalClient, mut rx: mpsc::UnboundedReceiver<RoutedEnvelope>) {
    while let Some(routed) = rx.recv().await {
        for attempt in 0..5u32 {
            match client.publish(&routed.channel, &routed.envelope).await {
                Ok(_) => break,
                Err(e) => {
                    tracing::warn!(error = %e, attempt, channel = %routed.channel, "publish failed");
                    tokio::time::sleep(Duration::from_millis(100)).await;
                }
            }
        }
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        match listener.accept().await {
            Ok((stream, remote)) => {
                tokio::spawn(serve_conn(stream, remote, shared.clone()));
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

async fn serve_conn(stream: TcpStream, remote: SocketAddr, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let conn = ConnId(shared.next_conn.fetch_add(1, Ordering::Relaxed));
    let codec = if shared.options.checksum {
        Codec::with_checksum()
    } else {
        Codec::default()
    };
    let (read, write) = stream.into_split();
    let (sender, _writer) = spawn_writer(write, codec, shared.options.hop);
    shared.conns.lock().insert(
        conn,
        Conn {
            sender,
            remote,
            lgat_id: None,
            frames_in: 0,
            frames_out: 0,
        },
    );
    tracing::info!(conn = conn.0, %remote, "tunnel accepted");

    let mut reader = FrameReader::new(read, codec);
    loop {
        match reader.next().await {
            Ok(Some(frame)) => {
                shared.on_frame(conn, frame);
                if !shared.conns.lock().contains_key(&conn) {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                tracing::info!(conn = conn.0, error = %e, "tunnel read failed");
                break;
            }
        }
    }
    shared.disconnected(conn);
}

async fn ticker(shared: Arc<Shared>) {
    let mut interval = tokio::time::interval(Duration::from_secs(1));
    loop {
        interval.tick().await;
        let actions = shared.hub.lock().on_tick(shared.now());
        shared.apply(actions);
    }
}
