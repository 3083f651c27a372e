use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::net::SocketAddrV4;
use core::time::Duration;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::ice::{IceAgent, IceConfig, IceEvent, IceState};
use super::interceptor::{create_description, Delivery, DescriptionKind, Interceptor, InterceptorConfig, Output};
use super::media::{is_probe, media_datagram, probe, MediaStats, StatsSummary};
use crate::cgat::RoutingMode;
use crate::sdp::{extract_credentials, parse_candidate, Candidate, SessionCredentials};
use crate::signal::{Envelope, RoutedEnvelope};
use crate::stun;

pub const PROBE_INTERVAL: Duration = Duration::from_millis(100);
/// How long a finished sender keeps listening for stragglers.
pub const DRAIN: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerConfig {
    pub peer_id: String,
    pub room: String,
    pub lgat_id: String,
    pub offerer: bool,
    /// Where this peer receives UDP; advertised as its host candidate.
    pub local_addr: SocketAddrV4,
    pub interval: Duration,
    pub packets: u32,
    pub payload_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeerOutput {
    Publish(RoutedEnvelope),
    Route(Envelope),
    SendUdp { to: SocketAddrV4, payload: Vec<u8> },
    Failed(String),
}

/// Timestamps of a call's milestones, all on the caller's clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestones {
    pub call_started: Option<Duration>,
    /// Offer/answer exchange complete from this peer's point of view.
    pub stream_setup: Option<Duration>,
    pub connected: Option<Duration>,
    /// First media packet both sent and received.
    pub media_setup: Option<Duration>,
    pub finished: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediaPhase {
    Waiting,
    Probing,
    Streaming,
    Draining,
    Done,
}

/// One simulated browser: interceptor, connectivity checks and a paced
/// media stream. Media starts once checks succeed and the far end has been
/// heard from, which stands in for the DTLS handshake of a real browser.
#[derive(Debug)]
pub struct Peer {
    config: PeerConfig,
    interceptor: Interceptor,
    credentials: SessionCredentials,
    ssrc: u32,
    tie_breaker: u64,
    remote: Option<SessionCredentials>,
    target: Option<SocketAddrV4>,
    delivered: Vec<String>,
    agent: Option<IceAgent>,
    phase: MediaPhase,
    next_media: Duration,
    sent_index: u32,
    stats: MediaStats,
    milestones: Milestones,
    failure: Option<String>,
}

impl Peer {
    pub fn new<R: RngCore + ?Sized>(config: PeerConfig, rng: &mut R) -> Self {
        let interceptor = Interceptor::new(InterceptorConfig {
            peer_id: config.peer_id.clone(),
            room: config.room.clone(),
            lgat_id: config.lgat_id.clone(),
        });
        let ssrc = rng.next_u32() | 1;
        Peer {
            credentials: SessionCredentials::generate(rng),
            tie_breaker: rng.next_u64(),
            stats: MediaStats::new(ssrc, config.interval, Duration::ZERO),
            ssrc,
            interceptor,
            remote: None,
            target: None,
            delivered: Vec::new(),
            agent: None,
            phase: MediaPhase::Waiting,
            next_media: Duration::ZERO,
            sent_index: 0,
            milestones: Milestones::default(),
            failure: None,
            config,
        }
    }

    pub fn config(&self) -> &PeerConfig {
        &self.config
    }

    pub fn interceptor(&self) -> &Interceptor {
        &self.interceptor
    }

    pub fn inbox(&self) -> String {
        self.interceptor.inbox()
    }

    pub fn credentials(&self) -> &SessionCredentials {
        &self.credentials
    }

    pub fn mode(&self) -> Option<RoutingMode> {
        self.interceptor.mode()
    }

    pub fn ice_state(&self) -> IceState {
        self.agent.as_ref().map_or(IceState::New, IceAgent::state)
    }

    pub fn agent(&self) -> Option<&IceAgent> {
        self.agent.as_ref()
    }

    pub fn phase(&self) -> MediaPhase {
        self.phase
    }

    pub fn milestones(&self) -> Milestones {
        self.milestones
    }

    pub fn stats(&self) -> &MediaStats {
        &self.stats
    }

    pub fn summary(&self) -> StatsSummary {
        self.stats.summary()
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// Candidate lines handed to the browser side, in delivery order.
    pub fn delivered_candidates(&self) -> &[String] {
        &self.delivered
    }

    /// Where checks and media go.
    pub fn target(&self) -> Option<SocketAddrV4> {
        self.target
    }

    pub fn is_done(&self) -> bool {
        self.phase == MediaPhase::Done || self.failure.is_some()
    }

    fn local_candidate(&self) -> String {
        Candidate::host(
            "1",
            2_122_260_223,
            *self.config.local_addr.ip(),
            self.config.local_addr.port(),
        )
        .to_string()
    }

    /// Starts the call. Only the offerer has anything to send.
    pub fn start(&mut self, now: Duration) -> Vec<PeerOutput> {
        self.milestones.call_started = Some(now);
        self.stats = MediaStats::new(self.ssrc, self.config.interval, now);
        if !self.config.offerer {
            return Vec::new();
        }
        let sdp = create_description(&self.credentials, u64::from(self.ssrc), DescriptionKind::Offer);
        let mut out = self.interceptor.local_description(DescriptionKind::Offer, &sdp);
        out.extend(self.interceptor.local_candidate(&self.local_candidate()));
        self.convert(out, now)
    }

    pub fn on_envelope(&mut self, envelope: &Envelope, now: Duration) -> Vec<PeerOutput> {
        let out = self.interceptor.on_envelope(envelope);
        self.convert(out, now)
    }

    fn convert(&mut self, outputs: Vec<Output>, now: Duration) -> Vec<PeerOutput> {
        let mut result = Vec::with_capacity(outputs.len());
        let mut queue: Vec<Output> = outputs;
        while !queue.is_empty() {
            for output in core::mem::take(&mut queue) {
                match output {
                    Output::Publish(r) => result.push(PeerOutput::Publish(r)),
                    Output::Route(e) => result.push(PeerOutput::Route(e)),
                    Output::Failed(reason) => {
                        self.fail(&reason);
                        result.push(PeerOutput::Failed(reason));
                    }
                    Output::Deliver(delivery) => queue.extend(self.deliver(delivery, now)),
                }
            }
        }
        result
    }

    /// The browser side reacting to what the interceptor handed over.
    fn deliver(&mut self, delivery: Delivery, now: Duration) -> Vec<Output> {
        match delivery {
            Delivery::Description { kind, sdp } => {
                match extract_credentials(&sdp) {
                    Ok(creds) => self.remote = Some(creds),
                    Err(e) => return vec![Output::Failed(format!("remote description: {e}"))],
                }
                self.milestones.stream_setup.get_or_insert(now);
                self.maybe_start_checks(now);
                if kind == DescriptionKind::Offer {
                    let sdp = create_description(&self.credentials, u64::from(self.ssrc), DescriptionKind::Answer);
                    let mut out = self.interceptor.local_description(DescriptionKind::Answer, &sdp);
                    out.extend(self.interceptor.local_candidate(&self.local_candidate()));
                    return out;
                }
                Vec::new()
            }
            Delivery::Candidate(line) => {
                if self.target.is_none() {
                    if let Ok(c) = parse_candidate(&line) {
                        self.target = Some(SocketAddrV4::new(c.ip, c.port));
                    }
                }
                self.delivered.push(line);
                self.maybe_start_checks(now);
                Vec::new()
            }
        }
    }

    fn maybe_start_checks(&mut self, now: Duration) {
        if self.agent.is_some() {
            return;
        }
        let (Some(remote), Some(_)) = (&self.remote, self.target) else {
            return;
        };
        let agent = IceAgent::new(IceConfig {
            local: self.credentials.clone(),
            remote: remote.clone(),
            controlling: self.config.offerer,
            tie_breaker: self.tie_breaker,
            priority: 2_122_260_223,
        });
        match agent {
            Ok(mut agent) => {
                agent.start(now);
                self.agent = Some(agent);
            }
            Err(e) => self.fail(&format!("ice: {e}")),
        }
    }

    fn fail(&mut self, reason: &str) {
        if self.failure.is_none() {
            self.failure = Some(reason.into());
        }
    }

    pub fn on_datagram(&mut self, from: SocketAddrV4, datagram: &[u8], now: Duration) -> Vec<PeerOutput> {
        if stun::peek_is_stun(datagram) {
            let Some(agent) = self.agent.as_mut() else {
                return Vec::new();
            };
            let event = agent.handle_stun(datagram, from, now);
            self.after_ice(now);
            return match event {
                IceEvent::Respond(payload) => vec![PeerOutput::SendUdp { to: from, payload }],
                IceEvent::Confirmed | IceEvent::Rejected => Vec::new(),
            };
        }
        if is_probe(datagram) {
            self.heard_from_remote(now);
            return Vec::new();
        }
        let Ok(reflection) = self.stats.record_received(datagram, now) else {
            return Vec::new();
        };
        if reflection.is_some() {
            self.heard_from_remote(now);
            self.check_media_setup(now);
        }
        reflection
            .map(|payload| PeerOutput::SendUdp { to: from, payload })
            .into_iter()
            .collect()
    }

    fn after_ice(&mut self, now: Duration) {
        let Some(agent) = &self.agent else { return };
        match agent.state() {
            IceState::Connected if self.milestones.connected.is_none() => {
                self.milestones.connected = Some(now);
                if self.phase == MediaPhase::Waiting {
                    self.phase = MediaPhase::Probing;
                    self.next_media = now;
                }
            }
            IceState::Failed => self.fail("ice failed"),
            _ => {}
        }
    }

    fn heard_from_remote(&mut self, now: Duration) {
        if self.phase == MediaPhase::Probing {
            self.phase = MediaPhase::Streaming;
            self.next_media = now;
        }
    }

    fn check_media_setup(&mut self, now: Duration) {
        if self.milestones.media_setup.is_none() && self.stats.sent() > 0 && self.stats.received() > 0 {
            self.milestones.media_setup = Some(now);
        }
    }

    /// Ends the stream early; the peer drains and finishes.
    pub fn stop(&mut self, now: Duration) {
        if matches!(
            self.phase,
            MediaPhase::Waiting | MediaPhase::Probing | MediaPhase::Streaming
        ) {
            self.phase = MediaPhase::Draining;
            self.next_media = now + DRAIN;
        }
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        if self.failure.is_some() {
            return None;
        }
        let ice = self.agent.as_ref().and_then(IceAgent::poll_timeout);
        let media = match self.phase {
            MediaPhase::Probing | MediaPhase::Streaming | MediaPhase::Draining => Some(self.next_media),
            MediaPhase::Waiting | MediaPhase::Done => None,
        };
        match (ice, media) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs timers: connectivity checks and paced media.
    pub fn poll<R: RngCore + ?Sized>(&mut self, now: Duration, rng: &mut R) -> Vec<PeerOutput> {
        let mut out = Vec::new();
        if self.failure.is_some() {
            return out;
        }
        let Some(target) = self.target else { return out };
        if let Some(agent) = self.agent.as_mut() {
            if let Some(payload) = agent.poll_transmit(now, rng) {
                out.push(PeerOutput::SendUdp { to: target, payload });
            }
            self.after_ice(now);
            if let Some(reason) = &self.failure {
                out.push(PeerOutput::Failed(reason.clone()));
                return out;
            }
        }
        if now < self.next_media {
            return out;
        }
        match self.phase {
            MediaPhase::Probing => {
                out.push(PeerOutput::SendUdp {
                    to: target,
                    payload: probe(self.ssrc),
                });
                self.next_media = now + PROBE_INTERVAL;
            }
            MediaPhase::Streaming => {
                let index = self.sent_index;
                let payload = media_datagram(self.ssrc, index, self.config.interval, self.config.payload_len);
                self.stats.record_sent(index, now);
                self.check_media_setup(now);
                self.sent_index += 1;
                out.push(PeerOutput::SendUdp { to: target, payload });
                // Pace against the schedule so late wakeups do not drift.
                self.next_media += self.config.interval;
                if self.next_media < now {
                    self.next_media = now;
                }
                if self.sent_index >= self.config.packets {
                    self.phase = MediaPhase::Draining;
                    self.next_media = now + DRAIN;
                }
            }
            MediaPhase::Draining => {
                self.phase = MediaPhase::Done;
                self.milestones.finished = Some(now);
            }
            MediaPhase::Waiting | MediaPhase::Done => {}
        }
        out
    }
}
