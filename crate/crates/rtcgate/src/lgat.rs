//! Local gateway process: one outbound tunnel to the central gateway and one
//! UDP socket per session facing the local browsers.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, SocketAddr, SocketAddrV4};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcgate_core::lgat::{Action, Gateway, GatewayStatus, LgatConfig, SessionState};
use rtcgate_core::session::SessionId;
use rtcgate_core::signal::{lgat_channel, RoutedEnvelope};
use rtcgate_core::tunnel::{Codec, FrameType, TunnelFrame};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::{TcpStream, UdpSocket};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use crate::events::emit;
use crate::signal::{SignalClient, Subscription};
use crate::status;
use crate::tunnel_io::{spawn_writer, FrameReader, FrameSender, Hop};

#[derive(Debug, Clone)]
pub struct LgatOptions {
    pub gateway: LgatConfig,
    pub cgat: String,
    /// Signaling server for control requests that arrive while the tunnel
    /// is down, so they can be refused instead of going unanswered.
    pub signal: Option<String>,
    pub status: SocketAddr,
    pub checksum: bool,
    /// Emulated network on every frame written to the tunnel.
    pub hop: Hop,
    /// Extra one-way delay on the local network leg, both directions.
    pub local_delay: Duration,
    pub reconnect: Duration,
    pub seed: u64,
}

impl LgatOptions {
    pub fn new(gateway: LgatConfig, cgat: &str) -> Self {
        LgatOptions {
            gateway,
            cgat: cgat.into(),
            signal: None,
            status: "127.0.0.1:0".parse().unwrap(),
            checksum: false,
            hop: Hop::default(),
            local_delay: Duration::ZERO,
            reconnect: Duration::from_millis(500),
            seed: rand::random(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgatRuntimeStatus {
    pub lgat_id: String,
    pub tunnel_up: bool,
    /// Live outbound TCP connections to the central gateway.
    pub tcp_connections: usize,
    /// Connections made over the process lifetime.
    pub tcp_connects: u64,
    /// Bound UDP ports, ascending.
    pub udp_ports: Vec<u16>,
    /// Data frames written to the tunnel, and how many of those carried STUN.
    pub tunnel_data_frames: u64,
    pub tunnel_stun_frames: u64,
    pub frames_dropped_offline: u64,
    pub gateway: GatewayStatus,
}

struct Inner {
    gateway: Gateway,
    rng: ChaCha8Rng,
    states: BTreeMap<SessionId, SessionState>,
}

struct Socket {
    socket: Arc<UdpSocket>,
    task: JoinHandle<()>,
}

struct Shared {
    origin: Instant,
    inner: Mutex<Inner>,
    sockets: Mutex<HashMap<u16, Socket>>,
    tunnel: Mutex<Option<FrameSender>>,
    udp_out: mpsc::UnboundedSender<UdpJob>,
    udp_in: mpsc::UnboundedSender<Inbound>,
    tcp_connections: AtomicUsize,
    tcp_connects: AtomicU64,
    tunnel_data_frames: AtomicU64,
    tunnel_stun_frames: AtomicU64,
    dropped_offline: AtomicU64,
    /// Replies to publish directly while the tunnel is down.
    offline_replies: Option<mpsc::UnboundedSender<RoutedEnvelope>>,
    tunnel_down: Notify,
    options: LgatOptions,
}

/// A running local gateway.
pub struct Lgat {
    pub status_addr: SocketAddr,
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl Lgat {
    pub async fn start(options: LgatOptions) -> anyhow::Result<Lgat> {
        let gateway = Gateway::new(options.gateway.clone()).map_err(|e| anyhow::anyhow!("lgat config: {e}"))?;
        let (udp_out, udp_rx) = mpsc::unbounded_channel();
        let (udp_in, inbound_rx) = mpsc::unbounded_channel();
        let signal = options.signal.as_deref().map(SignalClient::new);
        let (offline_replies, replies_rx) = match &signal {
            Some(_) => {
                let (tx, rx) = mpsc::unbounded_channel();
                (Some(tx), Some(rx))
            }
            None => (None, None),
        };
        let shared = Arc::new(Shared {
            origin: Instant::now(),
            inner: Mutex::new(Inner {
                gateway,
                rng: ChaCha8Rng::seed_from_u64(options.seed),
                states: BTreeMap::new(),
            }),
            sockets: Mutex::new(HashMap::new()),
            tunnel: Mutex::new(None),
            udp_out,
            udp_in,
            tcp_connections: AtomicUsize::new(0),
            tcp_connects: AtomicU64::new(0),
            tunnel_data_frames: AtomicU64::new(0),
            tunnel_stun_frames: AtomicU64::new(0),
            dropped_offline: AtomicU64::new(0),
            offline_replies,
            tunnel_down: Notify::new(),
            options,
        });
        let snapshot = {
            let shared = shared.clone();
            Arc::new(move || serde_json::to_value(shared.status()).unwrap_or_default())
        };
        let (status_addr, status_task) = status::serve(shared.options.status, snapshot).await?;
        let mut tasks = vec![
            status_task,
            tokio::spawn(udp_sender(udp_rx, shared.options.local_delay)),
            tokio::spawn(delayed_inbound(Arc::downgrade(&shared), inbound_rx)),
            tokio::spawn(tunnel_loop(shared.clone())),
            tokio::spawn(ticker(shared.clone())),
        ];
        if let (Some(client), Some(rx)) = (signal, replies_rx) {
            tasks.push(tokio::spawn(offline_publisher(client.clone(), rx)));
            tasks.push(tokio::spawn(offline_control(Arc::downgrade(&shared), client)));
        }
        Ok(Lgat {
            status_addr,
            shared,
            tasks,
        })
    }

    pub fn status(&self) -> LgatRuntimeStatus {
        self.shared.status()
    }

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
        for (_, s) in self.shared.sockets.lock().drain() {
            s.task.abort();
        }
        self.shared.tunnel.lock().take();
    }
}

impl Drop for Lgat {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn state_name(s: SessionState) -> &'static str {
    match s {
        SessionState::Allocated => "allocated",
        SessionState::Credentialed => "credentialed",
        SessionState::Verified => "verified",
        SessionState::Streaming => "streaming",
        SessionState::Closed => "closed",
    }
}

impl Shared {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn id(&self) -> &str {
        &self.options.gateway.lgat_id
    }

    fn status(&self) -> LgatRuntimeStatus {
        let gateway = self.inner.lock().gateway.status();
        let mut udp_ports: Vec<u16> = self.sockets.lock().keys().copied().collect();
        udp_ports.sort_unstable();
        LgatRuntimeStatus {
            lgat_id: self.id().to_string(),
            tunnel_up: self.tunnel.lock().is_some(),
            tcp_connections: self.tcp_connections.load(Ordering::Relaxed),
            tcp_connects: self.tcp_connects.load(Ordering::Relaxed),
            udp_ports,
            tunnel_data_frames: self.tunnel_data_frames.load(Ordering::Relaxed),
            tunnel_stun_frames: self.tunnel_stun_frames.load(Ordering::Relaxed),
            frames_dropped_offline: self.dropped_offline.load(Ordering::Relaxed),
            gateway,
        }
    }

    /// Runs `f` against the gateway, then executes what it asked for and
    /// reports session state changes.
    fn with_gateway<F>(self: &Arc<Self>, f: F)
    where
        F: FnOnce(&mut Gateway, &mut ChaCha8Rng, Duration) -> Vec<Action>,
    {
        let now = self.now();
        let (actions, changes) = {
            let mut inner = self.inner.lock();
            let Inner { gateway, rng, states } = &mut *inner;
            let actions = f(gateway, rng, now);
            (actions, diff_states(gateway, states))
        };
        for (id, state) in changes {
            emit(
                "lgat",
                "session-state",
                json!({ "lgat_id": self.id(), "session_id": id.to_string(), "state": state_name(state) }),
            );
        }
        self.apply(actions);
    }

    fn apply(self: &Arc<Self>, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::SendUdp {
                    local_port,
                    to,
                    payload,
                } => {
                    let socket = self.sockets.lock().get(&local_port).map(|s| s.socket.clone());
                    if let Some(socket) = socket {
                        let _ = self.udp_out.send((tokio::time::Instant::now(), socket, to, payload));
                    }
                }
                Action::SendFrame(frame) => {
                    if frame.frame_type == FrameType::Data {
                        self.tunnel_data_frames.fetch_add(1, Ordering::Relaxed);
                        if rtcgate_core::stun::peek_is_stun(&frame.payload) {
                            self.tunnel_stun_frames.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    let frame = match self.tunnel.lock().as_ref() {
                        Some(t) if t.send(frame.clone()) => continue,
                        _ => frame,
                    };
                    let reply = (frame.frame_type == FrameType::Control)
                        .then(|| frame.json::<RoutedEnvelope>().ok())
                        .flatten();
                    match (reply, &self.offline_replies) {
                        (Some(reply), Some(tx)) => {
                            let _ = tx.send(reply);
                        }
                        _ => {
                            self.dropped_offline.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                Action::CloseUdp { local_port } => {
                    if let Some(s) = self.sockets.lock().remove(&local_port) {
                        s.task.abort();
                    }
                }
            }
        }
    }

    fn on_control(self: &Arc<Self>, routed: RoutedEnvelope) {
        let ip = self.options.gateway.local_ip;
        let mut bound: Vec<(u16, std::net::UdpSocket)> = Vec::new();
        self.with_gateway(|gw, rng, now| {
            let mut bind = |port: u16| match std::net::UdpSocket::bind(SocketAddrV4::new(ip, port)) {
                Ok(socket) => {
                    bound.push((port, socket));
                    true
                }
                Err(e) => {
                    tracing::warn!(port, error = %e, "cannot bind session port");
                    false
                }
            };
            gw.on_control(&routed, now, rng, &mut bind)
        });
        for (port, socket) in bound {
            if let Err(e) = self.adopt(port, socket) {
                tracing::error!(port, error = %e, "cannot register session socket");
                self.with_gateway(|gw, _, now| {
                    let id = gw.session_for_port(port).map(|s| s.session_id);
                    id.map(|id| gw.close_session(&id, now, true)).unwrap_or_default()
                });
            }
        }
    }

    fn adopt(self: &Arc<Self>, port: u16, socket: std::net::UdpSocket) -> std::io::Result<()> {
        socket.set_nonblocking(true)?;
        let socket = Arc::new(UdpSocket::from_std(socket)?);
        let task = tokio::spawn(udp_receiver(self.clone(), port, socket.clone()));
        emit("lgat", "port-bound", json!({ "lgat_id": self.id(), "port": port }));
        if let Some(old) = self.sockets.lock().insert(port, Socket { socket, task }) {
            old.task.abort();
        }
        Ok(())
    }
}

fn diff_states(gateway: &Gateway, known: &mut BTreeMap<SessionId, SessionState>) -> Vec<(SessionId, SessionState)> {
    let mut changes = Vec::new();
    for s in gateway.sessions() {
        if known.get(&s.session_id) != Some(&s.state) {
            known.insert(s.session_id, s.state);
            changes.push((s.session_id, s.state));
        }
    }
    let gone: Vec<SessionId> = known
        .keys()
        .filter(|id| gateway.session(id).is_none())
        .copied()
        .collect();
    for id in gone {
        known.remove(&id);
        changes.push((id, SessionState::Closed));
    }
    changes
}

async fn udp_receiver(shared: Arc<Shared>, port: u16, socket: Arc<UdpSocket>) {
    let mut buf = vec![0u8; 65536];
    let delay = shared.options.local_delay;
    loop {
        let (n, from) = match socket.recv_from(&mut buf).await {
            Ok(r) => r,
            Err(e) => {
                // ICMP port unreachable surfaces here on some platforms.
                tracing::debug!(port, error = %e, "udp receive error");
                continue;
            }
        };
        let SocketAddr::V4(from) = from else { continue };
        let datagram = buf[..n].to_vec();
        if delay.is_zero() {
            shared.with_gateway(|gw, rng, now| gw.on_udp_datagram(port, &datagram, from, now, rng));
        } else {
            let _ = shared
                .udp_in
                .send((tokio::time::Instant::now() + delay, port, from, datagram));
        }
    }
}

type Inbound = (tokio::time::Instant, u16, SocketAddrV4, Vec<u8>);

/// Holds inbound datagrams back by the local delay, preserving order.
async fn delayed_inbound(shared: std::sync::Weak<Shared>, mut rx: mpsc::UnboundedReceiver<Inbound>) {
    while let Some((due, port, from, datagram)) = rx.recv().await {
        tokio::time::sleep_until(due).await;
        let Some(shared) = shared.upgrade() else { return };
        shared.with_gateway(|gw, rng, now| gw.on_udp_datagram(port, &datagram, from, now, rng));
    }
}

type UdpJob = (tokio::time::Instant, Arc<UdpSocket>, SocketAddrV4, Vec<u8>);

async fn udp_sender(mut rx: mpsc::UnboundedReceiver<UdpJob>, delay: Duration) {
    while let Some((queued, socket, to, payload)) = rx.recv().await {
        if !delay.is_zero() {
            tokio::time::sleep_until(queued + delay).await;
        }
        if let Err(e) = socket.send_to(&payload, to).await {
            tracing::debug!(%to, error = %e, "udp send failed");
        }
    }
}

async fn tunnel_loop(shared: Arc<Shared>) {
    let codec = if shared.options.checksum {
        Codec::with_checksum()
    } else {
        Codec::default()
    };
    let mut announced = false;
    loop {
        let stream = match TcpStream::connect(&shared.options.cgat).await {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(cgat = %shared.options.cgat, error = %e, "tunnel connect failed");
                tokio::time::sleep(shared.options.reconnect).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let local = stream.local_addr().ok();
        let (read, write) = stream.into_split();
        let (sender, writer) = spawn_writer(write, codec, shared.options.hop);
        shared.tcp_connections.fetch_add(1, Ordering::Relaxed);
        shared.tcp_connects.fetch_add(1, Ordering::Relaxed);
        *shared.tunnel.lock() = Some(sender);
        shared.with_gateway(|gw, _, _| gw.tunnel_connected());
        emit(
            "lgat",
            "tunnel-up",
            json!({ "lgat_id": shared.id(), "cgat": shared.options.cgat, "local": local }),
        );
        if !announced {
            announced = true;
            tracing::info!(lgat = shared.id(), "tunnel established");
        }

        let mut reader = FrameReader::new(read, codec);
        loop {
            match reader.next().await {
                Ok(Some(frame)) => on_frame(&shared, frame),
                Ok(None) => break,
                Err(e) => {
                    tracing::warn!(error = %e, "tunnel read failed");
                    break;
                }
            }
        }

        shared.tunnel.lock().take();
        writer.abort();
        shared.tcp_connections.fetch_sub(1, Ordering::Relaxed);
        shared.inner.lock().gateway.tunnel_lost();
        emit("lgat", "tunnel-down", json!({ "lgat_id": shared.id() }));
        shared.tunnel_down.notify_one();
        tokio::time::sleep(shared.options.reconnect).await;
    }
}

fn on_frame(shared: &Arc<Shared>, frame: TunnelFrame) {
    if frame.frame_type == FrameType::Control {
        match frame.json::<RoutedEnvelope>() {
            Ok(routed) => {
                emit(
                    "lgat",
                    "control",
                    json!({ "lgat_id": shared.id(), "kind": routed.envelope.kind, "sender": routed.envelope.sender }),
                );
                shared.on_control(routed);
            }
            Err(e) => tracing::warn!(error = %e, "bad control frame"),
        }
        return;
    }
    if frame.frame_type == FrameType::Error {
        if let Ok(body) = frame.json::<rtcgate_core::tunnel::TunnelErrorBody>() {
            emit(
                "lgat",
                "tunnel-error",
                json!({ "lgat_id": shared.id(), "session_id": frame.session_id.to_string(), "code": body.code }),
            );
        }
    }
    shared.with_gateway(|gw, _, now| gw.on_tunnel_frame(frame, now));
}

async fn offline_publisher(client: SignalClient, mut rx: mpsc::UnboundedReceiver<RoutedEnvelope>) {
    while let Some(routed) = rx.recv().await {
        if let Err(e) = client.publish(&routed.channel, &routed.envelope).await {
            tracing::warn!(channel = %routed.channel, error = %e, "offline reply failed");
        }
    }
}

/// Answers control requests from the signaling server while the tunnel is
/// down. The central gateway takes over the channel once it is up.
async fn offline_control(shared: std::sync::Weak<Shared>, client: SignalClient) {
    let Some(id) = shared.upgrade().map(|s| s.id().to_string()) else {
        return;
    };
    let channel = lgat_channel(&id);
    let mut sub = Subscription::new(client.clone(), &channel, Duration::from_secs(20));
    while let Err(e) = sub.skip_existing().await {
        tracing::debug!(error = %e, "signal server unreachable");
        tokio::time::sleep(Duration::from_millis(500)).await;
    }
    let mut register = true;
    loop {
        let Some(s) = shared.upgrade() else { return };
        if register && s.tunnel.lock().is_none() {
            match client.register_lgat(&id).await {
                Ok(()) => {
                    register = false;
                    emit("lgat", "signal-registered", json!({ "lgat_id": id }));
                }
                Err(e) => tracing::debug!(error = %e, "offline registration failed"),
            }
        }
        let batch = tokio::select! {
            batch = sub.next_batch() => batch,
            _ = s.tunnel_down.notified() => {
                register = true;
                continue;
            }
        };
        for envelope in batch {
            if s.tunnel.lock().is_some() {
                continue;
            }
            emit(
                "lgat",
                "control",
                json!({ "lgat_id": id, "kind": envelope.kind, "sender": envelope.sender, "via": "signal" }),
            );
            s.on_control(RoutedEnvelope {
                channel: channel.clone(),
                envelope,
            });
        }
    }
}

async fn ticker(shared: Arc<Shared>) {
    let mut interval = tokio::time::interval(Duration::from_secs(1));
    loop {
        interval.tick().await;
        shared.with_gateway(|gw, _, now| gw.on_tick(now));
    }
}

/// Parses `lo-hi`.
pub fn parse_port_range(s: &str) -> Result<(u16, u16), String> {
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| format!("{s:?} is not of the form lo-hi"))?;
    let lo: u16 = lo.trim().parse().map_err(|_| format!("bad low port in {s:?}"))?;
    let hi: u16 = hi.trim().parse().map_err(|_| format!("bad high port in {s:?}"))?;
    Ok((lo, hi))
}

/// The address allocate replies should advertise for a listen address.
pub fn advertised_ip(ip: IpAddr) -> std::net::Ipv4Addr {
    match ip {
        IpAddr::V4(v4) if !v4.is_unspecified() => v4,
        _ => std::net::Ipv4Addr::LOCALHOST,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn port_ranges_parse() {
        assert_eq!(parse_port_range("50000-50099"), Ok((50000, 50099)));
        assert!(parse_port_range("50000").is_err());
        assert!(parse_port_range("a-b").is_err());
    }
}
