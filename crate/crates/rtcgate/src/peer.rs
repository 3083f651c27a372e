//! Simulated browser peer on real sockets: signaling over HTTP long-polls,
//! connectivity checks and media over UDP.

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::time::Duration;

use anyhow::Context;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcgate_core::cgat::RoutingMode;
use rtcgate_core::peersim::{median, IceState, Milestones, Peer, PeerConfig, PeerOutput, StatsSummary};
use rtcgate_core::signal::Envelope;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::UdpSocket;
use tokio::sync::mpsc;
use tokio::time::Instant;

use crate::events::emit;
use crate::signal::{SignalClient, Subscription};

#[derive(Debug, Clone)]
pub struct PeerOptions {
    pub peer_id: String,
    pub lgat_id: String,
    pub signal: String,
    pub room: String,
    pub offer: bool,
    /// Media packets per second.
    pub rate: f64,
    pub duration: Duration,
    /// Round trips before this much time into the call are left out of the
    /// steady-state figures.
    pub warmup: Duration,
    pub seed: u64,
    pub payload_len: usize,
    pub bind: Ipv4Addr,
    /// How long to keep reflecting the far end's media after finishing.
    pub linger: Duration,
    /// Gives up if the call has not finished by then.
    pub deadline: Duration,
    pub stats_every: Duration,
}

impl PeerOptions {
    pub fn new(peer_id: &str, lgat_id: &str, signal: &str, room: &str) -> Self {
        PeerOptions {
            peer_id: peer_id.into(),
            lgat_id: lgat_id.into(),
            signal: signal.into(),
            room: room.into(),
            offer: false,
            rate: 50.0,
            duration: Duration::from_secs(10),
            warmup: Duration::ZERO,
            seed: 1,
            payload_len: 160,
            bind: Ipv4Addr::LOCALHOST,
            linger: Duration::from_secs(2),
            deadline: Duration::from_secs(60),
            stats_every: Duration::from_secs(1),
        }
    }

    pub fn packets(&self) -> u32 {
        (self.rate * self.duration.as_secs_f64()).round().max(1.0) as u32
    }

    pub fn interval(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.rate.max(0.001))
    }
}

/// Milestones in milliseconds from the start of the call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MilestonesMs {
    pub stream_setup_ms: Option<f64>,
    pub connected_ms: Option<f64>,
    pub media_setup_ms: Option<f64>,
    pub finished_ms: Option<f64>,
}

impl MilestonesMs {
    pub fn from_milestones(m: &Milestones) -> Self {
        let start = m.call_started.unwrap_or_default();
        let rel = |t: Option<Duration>| t.map(|t| t.saturating_sub(start).as_secs_f64() * 1000.0);
        MilestonesMs {
            stream_setup_ms: rel(m.stream_setup),
            connected_ms: rel(m.connected),
            media_setup_ms: rel(m.media_setup),
            finished_ms: rel(m.finished),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSummary {
    pub peer_id: String,
    pub room: String,
    pub offerer: bool,
    pub mode: Option<String>,
    pub ice: IceState,
    pub local_addr: SocketAddrV4,
    pub milestones: MilestonesMs,
    pub media: StatsSummary,
    /// Round-trip figures after the warmup.
    pub steady_rtt_median_ms: Option<f64>,
    pub steady_rtt_mean_ms: Option<f64>,
    pub steady_rtt_stddev_ms: Option<f64>,
    pub delivered_candidates: Vec<String>,
    pub failure: Option<String>,
}

impl PeerSummary {
    /// Media went both ways without loss or corruption.
    pub fn media_ok(&self) -> bool {
        self.failure.is_none()
            && self.media.sent > 0
            && self.media.received > 0
            && self.media.lost == 0
            && self.media.corrupted == 0
    }
}

fn mode_name(mode: RoutingMode) -> &'static str {
    match mode {
        RoutingMode::Direct => "direct",
        RoutingMode::Tunneled => "tunneled",
    }
}

enum Outbound {
    Publish(String, Envelope),
    Route(Envelope),
}

async fn signal_writer(client: SignalClient, peer_id: String, mut rx: mpsc::UnboundedReceiver<Outbound>) {
    while let Some(item) = rx.recv().await {
        let (what, result) = match &item {
            Outbound::Publish(channel, envelope) => ("publish", client.publish(channel, envelope).await.map(drop)),
            Outbound::Route(envelope) => ("route", client.route(envelope).await.map(drop)),
        };
        if let Err(e) = result {
            tracing::warn!(peer = %peer_id, error = %e, "{what} failed");
        }
    }
}

fn follow(client: SignalClient, channel: String, tx: mpsc::UnboundedSender<Envelope>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut sub = Subscription::new(client, &channel, Duration::from_secs(20));
        loop {
            for envelope in sub.next_batch().await {
                if tx.send(envelope).is_err() {
                    return;
                }
            }
        }
    })
}

fn stddev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}

struct Runner {
    peer: Peer,
    rng: ChaCha8Rng,
    socket: UdpSocket,
    out: mpsc::UnboundedSender<Outbound>,
    origin: Instant,
    reported: Milestones,
    reported_candidates: usize,
    reported_mode: bool,
    reported_collision: bool,
}

impl Runner {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    async fn handle(&mut self, outputs: Vec<PeerOutput>) {
        for output in outputs {
            match output {
                PeerOutput::Publish(routed) => {
                    emit(
                        "peer",
                        "signal-out",
                        json!({ "peer_id": self.peer.config().peer_id, "channel": routed.channel, "kind": routed.envelope.kind }),
                    );
                    let _ = self.out.send(Outbound::Publish(routed.channel, routed.envelope));
                }
                PeerOutput::Route(envelope) => {
                    emit(
                        "peer",
                        "signal-route",
                        json!({ "peer_id": self.peer.config().peer_id, "kind": envelope.kind, "lgat_id": envelope.target_lgat().ok() }),
                    );
                    let _ = self.out.send(Outbound::Route(envelope));
                }
                PeerOutput::SendUdp { to, payload } => {
                    if let Err(e) = self.socket.send_to(&payload, to).await {
                        tracing::debug!(%to, error = %e, "udp send failed");
                    }
                }
                PeerOutput::Failed(reason) => {
                    emit(
                        "peer",
                        "failed",
                        json!({ "peer_id": self.peer.config().peer_id, "reason": reason }),
                    );
                }
            }
        }
        self.report_progress();
    }

    fn report_progress(&mut self) {
        let id = self.peer.config().peer_id.clone();
        if !self.reported_mode {
            if let Some(mode) = self.peer.mode() {
                self.reported_mode = true;
                emit("peer", "mode", json!({ "peer_id": id, "mode": mode_name(mode) }));
            }
        }
        if !self.reported_collision && self.peer.interceptor().counters().identical_ufrags > 0 {
            self.reported_collision = true;
            tracing::warn!(peer = %id, "both sides use the same ufrag; credential usernames collide");
            emit(
                "peer",
                "credential-warning",
                json!({ "peer_id": id, "reason": "identical-ufrags" }),
            );
        }
        let delivered = self.peer.delivered_candidates();
        for line in &delivered[self.reported_candidates..] {
            emit(
                "peer",
                "candidate-delivered",
                json!({ "peer_id": id, "candidate": line }),
            );
        }
        self.reported_candidates = delivered.len();

        let m = self.peer.milestones();
        let start = m.call_started.unwrap_or_default();
        let steps = [
            ("stream-setup", m.stream_setup, self.reported.stream_setup),
            ("connected", m.connected, self.reported.connected),
            ("media-setup", m.media_setup, self.reported.media_setup),
            ("finished", m.finished, self.reported.finished),
        ];
        for (name, now, before) in steps {
            if let (Some(t), None) = (now, before) {
                let ms = t.saturating_sub(start).as_secs_f64() * 1000.0;
                emit("peer", name, json!({ "peer_id": id, "at_ms": ms }));
            }
        }
        self.reported = m;
    }

    fn stats_line(&self, since: Duration) {
        let stats = self.peer.stats();
        let mut window: Vec<f64> = stats.rtt_since(since).map(|d| d.as_secs_f64() * 1000.0).collect();
        let mean = (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64);
        let summary = stats.summary();
        emit(
            "peer",
            "stats",
            json!({
                "peer_id": self.peer.config().peer_id,
                "sent": summary.sent,
                "received": summary.received,
                "lost": summary.lost,
                "jitter_ms": summary.jitter_ms,
                "rtt_samples": window.len(),
                "rtt_mean_ms": mean,
                "rtt_median_ms": median(&mut window),
            }),
        );
    }

    fn summary(&self, options: &PeerOptions) -> PeerSummary {
        let stats = self.peer.stats();
        let start = self.peer.milestones().call_started.unwrap_or_default();
        let mut steady: Vec<f64> = stats
            .rtt_since(start + options.warmup)
            .map(|d| d.as_secs_f64() * 1000.0)
            .collect();
        let steady_mean = (!steady.is_empty()).then(|| steady.iter().sum::<f64>() / steady.len() as f64);
        let steady_stddev = stddev(&steady);
        PeerSummary {
            peer_id: options.peer_id.clone(),
            room: options.room.clone(),
            offerer: options.offer,
            mode: self.peer.mode().map(|m| mode_name(m).to_string()),
            ice: self.peer.ice_state(),
            local_addr: self.peer.config().local_addr,
            milestones: MilestonesMs::from_milestones(&self.peer.milestones()),
            media: self.peer.summary(),
            steady_rtt_median_ms: median(&mut steady),
            steady_rtt_mean_ms: steady_mean,
            steady_rtt_stddev_ms: steady_stddev,
            delivered_candidates: self.peer.delivered_candidates().to_vec(),
            failure: self.peer.failure().map(String::from),
        }
    }
}

/// Runs one call to completion and returns its summary, which is also
/// emitted as the final event line.
pub async fn run(options: PeerOptions) -> anyhow::Result<PeerSummary> {
    let socket = UdpSocket::bind(SocketAddrV4::new(options.bind, 0))
        .await
        .context("binding the media socket")?;
    let SocketAddr::V4(local_addr) = socket.local_addr()? else {
        anyhow::bail!("media socket is not IPv4");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let peer = Peer::new(
        PeerConfig {
            peer_id: options.peer_id.clone(),
            room: options.room.clone(),
            lgat_id: options.lgat_id.clone(),
            offerer: options.offer,
            local_addr,
            interval: options.interval(),
            packets: options.packets(),
            payload_len: options.payload_len,
        },
        &mut rng,
    );

    let client = SignalClient::new(&options.signal);
    let (env_tx, mut env_rx) = mpsc::unbounded_channel();
    let followers = [
        follow(client.clone(), options.room.clone(), env_tx.clone()),
        follow(client.clone(), peer.inbox(), env_tx),
    ];
    let (out_tx, out_rx) = mpsc::unbounded_channel();
    let mut writer = tokio::spawn(signal_writer(client, options.peer_id.clone(), out_rx));

    emit(
        "peer",
        "ready",
        json!({ "peer_id": options.peer_id, "addr": local_addr, "room": options.room, "lgat_id": options.lgat_id, "offer": options.offer }),
    );

    let mut runner = Runner {
        peer,
        rng,
        socket,
        out: out_tx,
        origin: Instant::now(),
        reported: Milestones::default(),
        reported_candidates: 0,
        reported_mode: false,
        reported_collision: false,
    };

    let start = runner.peer.start(runner.now());
    runner.handle(start).await;

    let give_up = runner.origin + options.deadline;
    let mut stats_tick = tokio::time::interval_at(runner.origin + options.stats_every, options.stats_every);
    let mut stats_since = Duration::ZERO;
    let mut done_at: Option<Instant> = None;
    let mut buf = vec![0u8; 65536];
    let far = runner.origin + Duration::from_secs(24 * 3600);

    loop {
        let timer = runner.peer.poll_timeout().map_or(far, |t| runner.origin + t);
        let linger_end = done_at.map_or(far, |t| t + options.linger);
        tokio::select! {
            received = runner.socket.recv_from(&mut buf) => {
                if let Ok((n, SocketAddr::V4(from))) = received {
                    let now = runner.now();
                    let out = runner.peer.on_datagram(from, &buf[..n], now);
                    runner.handle(out).await;
                }
            }
            Some(envelope) = env_rx.recv() => {
                let now = runner.now();
                let out = runner.peer.on_envelope(&envelope, now);
                runner.handle(out).await;
            }
            _ = tokio::time::sleep_until(timer) => {
                let now = runner.now();
                let Runner { peer, rng, .. } = &mut runner;
                let out = peer.poll(now, rng);
                runner.handle(out).await;
            }
            _ = stats_tick.tick() => {
                let now = runner.now();
                runner.stats_line(stats_since);
                stats_since = now;
            }
            _ = tokio::time::sleep_until(linger_end) => break,
            _ = tokio::time::sleep_until(give_up) => {
                emit("peer", "failed", json!({ "peer_id": options.peer_id, "reason": "deadline" }));
                break;
            }
        }
        if done_at.is_none() && runner.peer.is_done() {
            done_at = Some(Instant::now());
            if runner.peer.failure().is_some() {
                break;
            }
        }
    }

    for f in followers {
        f.abort();
    }
    let mut summary = runner.summary(&options);
    if summary.failure.is_none() && runner.peer.milestones().finished.is_none() {
        summary.failure = Some("deadline".into());
    }
    // Closing the queue lets the writer finish what is already queued.
    drop(runner);
    if tokio::time::timeout(Duration::from_millis(200), &mut writer)
        .await
        .is_err()
    {
        writer.abort();
    }
    emit("peer", "summary", &summary);
    Ok(summary)
}
