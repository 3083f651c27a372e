//! Local gateway state machine.
//!
//! The gateway owns one UDP port per session on the local network. On that
//! port it impersonates the remote browser: it answers the local browser's
//! connectivity checks itself and mirrors a request back, so checks never
//! cross the tunnel. Everything else arriving on the port is media and goes
//! into the tunnel untouched.
//!
//! The type is sans-IO. Callers feed it datagrams, tunnel frames and clock
//! ticks and execute the returned [`Action`]s.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::net::{Ipv4Addr, SocketAddrV4};
use core::time::Duration;

use hashbrown::HashMap;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sdp::{CredentialMap, CredentialPair};
use crate::session::SessionId;
use crate::signal::{
    lgat_channel, AllocateReply, AllocateRequest, Allocation, CandidateAddress, Envelope, EnvelopeKind, RoutedEnvelope,
    SetCredentials, SetCredentialsAck,
};
use crate::stun::{self, MessageClass, PasswordLookup, ShortTermKey};
use crate::tunnel::{FrameType, LeaseAnnouncement, TunnelErrorBody, TunnelFrame, DEFAULT_LEASE_TTL, RENEW_INTERVAL};

pub const DEFAULT_STUN_DROPS: u32 = 3;
pub const PENDING_MEDIA_CAP: usize = 32;
pub const PORT_LINGER: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LgatError {
    #[error("no free UDP port in {0}-{1}")]
    PortsExhausted(u16, u16),
    #[error("tunnel to the central gateway is down")]
    TunnelUnavailable,
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LgatConfig {
    pub lgat_id: String,
    /// Address handed out in allocate replies.
    pub local_ip: Ipv4Addr,
    pub port_range: (u16, u16),
    pub stun_drop_count: u32,
    pub lease_ttl: Duration,
}

impl LgatConfig {
    pub fn new(lgat_id: &str, local_ip: Ipv4Addr, port_range: (u16, u16)) -> Self {
        LgatConfig {
            lgat_id: lgat_id.into(),
            local_ip,
            port_range,
            stun_drop_count: DEFAULT_STUN_DROPS,
            lease_ttl: DEFAULT_LEASE_TTL,
        }
    }

    pub fn validate(&self) -> Result<(), LgatError> {
        let (low, high) = self.port_range;
        if low > high {
            return Err(LgatError::InvalidConfig("port range low exceeds high"));
        }
        if low < 1024 {
            return Err(LgatError::InvalidConfig("port range must stay within 1024-65535"));
        }
        if self.lgat_id.is_empty() {
            return Err(LgatError::InvalidConfig("lgat id must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Allocated,
    Credentialed,
    Verified,
    Streaming,
    Closed,
}

/// Lowest-free-port allocator. Released ports linger before reuse.
#[derive(Debug)]
pub struct PortAllocator {
    low: u16,
    high: u16,
    in_use: BTreeSet<u16>,
    lingering: BTreeMap<u16, Duration>,
    unusable: BTreeSet<u16>,
}

impl PortAllocator {
    pub fn new(low: u16, high: u16) -> Self {
        PortAllocator {
            low,
            high,
            in_use: BTreeSet::new(),
            lingering: BTreeMap::new(),
            unusable: BTreeSet::new(),
        }
    }

    pub fn allocate(&mut self, now: Duration) -> Option<u16> {
        self.lingering.retain(|_, until| *until > now);
        let port = (self.low..=self.high)
            .find(|p| !self.in_use.contains(p) && !self.lingering.contains_key(p) && !self.unusable.contains(p))?;
        self.in_use.insert(port);
        Some(port)
    }

    pub fn release(&mut self, port: u16, now: Duration, linger: Duration) {
        if self.in_use.remove(&port) && linger > Duration::ZERO {
            self.lingering.insert(port, now + linger);
        }
    }

    /// Takes a port out of rotation, e.g. because something else holds it.
    pub fn mark_unusable(&mut self, port: u16) {
        self.in_use.remove(&port);
        self.unusable.insert(port);
    }

    pub fn in_use(&self) -> usize {
        self.in_use.len()
    }
}

#[derive(Debug, Clone)]
pub struct GatewaySession {
    pub session_id: SessionId,
    pub remote_lgat: String,
    pub peer_candidate: CandidateAddress,
    pub local_port: u16,
    pub browser_addr: Option<SocketAddrV4>,
    pub credentials: Option<CredentialMap>,
    pub stun_drops_remaining: u32,
    pub state: SessionState,
    pub last_activity: Duration,
    last_renewed: Duration,
}

impl GatewaySession {
    fn advance(&mut self, to: SessionState) {
        if to > self.state {
            self.state = to;
        }
    }
}

/// A session owned by another gateway whose traffic ends at one of our
/// local browsers.
#[derive(Debug, Clone, PartialEq, Eq)]
struct RemoteSession {
    owner_lgat: String,
    browser_addr: SocketAddrV4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    SendUdp {
        local_port: u16,
        to: SocketAddrV4,
        payload: Vec<u8>,
    },
    SendFrame(TunnelFrame),
    CloseUdp {
        local_port: u16,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LgatCounters {
    pub stun_dropped_configured: u64,
    pub stun_answered: u64,
    pub stun_responses_seen: u64,
    pub dropped_unparseable: u64,
    pub no_credentials_yet: u64,
    pub bad_integrity: u64,
    pub unknown_username: u64,
    pub media_to_tunnel: u64,
    pub media_to_browser: u64,
    pub media_buffered: u64,
    pub buffer_overflow: u64,
    pub unknown_session: u64,
    pub unknown_port: u64,
    pub tunnel_errors: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStatus {
    pub lgat_id: String,
    pub sessions: usize,
    pub remote_sessions: usize,
    pub udp_ports: usize,
    pub states: BTreeMap<String, usize>,
    pub counters: LgatCounters,
}

#[derive(Debug)]
pub struct Gateway {
    config: LgatConfig,
    ports: PortAllocator,
    sessions: HashMap<SessionId, GatewaySession>,
    by_port: HashMap<u16, SessionId>,
    remote: HashMap<SessionId, RemoteSession>,
    pending: HashMap<SessionId, VecDeque<Vec<u8>>>,
    tunnel_up: bool,
    counters: LgatCounters,
}

impl Gateway {
    pub fn new(config: LgatConfig) -> Result<Self, LgatError> {
        config.validate()?;
        let (low, high) = config.port_range;
        Ok(Gateway {
            ports: PortAllocator::new(low, high),
            config,
            sessions: HashMap::new(),
            by_port: HashMap::new(),
            remote: HashMap::new(),
            pending: HashMap::new(),
            tunnel_up: false,
            counters: LgatCounters::default(),
        })
    }

    pub fn config(&self) -> &LgatConfig {
        &self.config
    }

    pub fn counters(&self) -> LgatCounters {
        self.counters
    }

    pub fn session(&self, id: &SessionId) -> Option<&GatewaySession> {
        self.sessions.get(id)
    }

    pub fn session_for_port(&self, port: u16) -> Option<&GatewaySession> {
        self.by_port.get(&port).and_then(|id| self.sessions.get(id))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &GatewaySession> {
        self.sessions.values()
    }

    pub fn is_tunnel_up(&self) -> bool {
        self.tunnel_up
    }

    /// Called when the tunnel (re)connects. Returns the hello frame followed
    /// by lease-open frames re-announcing every live session.
    pub fn tunnel_connected(&mut self) -> Vec<Action> {
        self.tunnel_up = true;
        let mut actions = Vec::with_capacity(self.sessions.len() + 1);
        actions.push(Action::SendFrame(TunnelFrame::hello(&self.config.lgat_id)));
        let mut live: Vec<&GatewaySession> = self.sessions.values().collect();
        live.sort_by_key(|s| s.local_port);
        for s in live {
            actions.push(Action::SendFrame(self.announcement(s, None)));
        }
        actions
    }

    pub fn tunnel_lost(&mut self) {
        self.tunnel_up = false;
    }

    fn announcement(&self, session: &GatewaySession, reply: Option<RoutedEnvelope>) -> TunnelFrame {
        TunnelFrame::lease(
            FrameType::LeaseOpen,
            session.session_id,
            &LeaseAnnouncement {
                owner_lgat: self.config.lgat_id.clone(),
                peer_lgat: session.remote_lgat.clone(),
                peer_addr: SocketAddrV4::new(session.peer_candidate.ip, session.peer_candidate.port),
                reply,
            },
        )
    }

    /// Opens a session fronting `request.candidate`. The returned actions
    /// carry the lease-open frame with the allocate reply for the requester.
    /// The caller binds the UDP port before executing them and calls
    /// [`Gateway::abort_allocation`] if that fails.
    pub fn handle_allocate<R: RngCore + ?Sized>(
        &mut self,
        request: &AllocateRequest,
        now: Duration,
        rng: &mut R,
    ) -> Result<(Allocation, Vec<Action>), LgatError> {
        if !self.tunnel_up {
            return Err(LgatError::TunnelUnavailable);
        }
        let (low, high) = self.config.port_range;
        let port = self.ports.allocate(now).ok_or(LgatError::PortsExhausted(low, high))?;
        let mut session_id = SessionId::random(rng);
        while self.sessions.contains_key(&session_id) || self.remote.contains_key(&session_id) {
            session_id = SessionId::random(rng);
        }
        let session = GatewaySession {
            session_id,
            remote_lgat: request.remote_lgat.clone(),
            peer_candidate: request.candidate,
            local_port: port,
            browser_addr: None,
            credentials: None,
            stun_drops_remaining: self.config.stun_drop_count,
            state: SessionState::Allocated,
            last_activity: now,
            last_renewed: now,
        };
        let allocation = Allocation {
            session_id,
            ip: self.config.local_ip,
            port,
        };
        let reply = Envelope::new(
            &self.config.lgat_id,
            EnvelopeKind::AllocateReply,
            &AllocateReply {
                request_id: request.request_id,
                allocation: Some(allocation),
                error: None,
            },
        )
        .with_lgat(&self.config.lgat_id);
        let frame = self.announcement(
            &session,
            Some(RoutedEnvelope {
                channel: request.reply_channel.clone(),
                envelope: reply,
            }),
        );
        self.by_port.insert(port, session_id);
        self.sessions.insert(session_id, session);
        Ok((allocation, vec![Action::SendFrame(frame)]))
    }

    pub fn abort_allocation(&mut self, session_id: &SessionId, port_unusable: bool) {
        if let Some(s) = self.sessions.remove(session_id) {
            self.by_port.remove(&s.local_port);
            if port_unusable {
                self.ports.mark_unusable(s.local_port);
            } else {
                self.ports.release(s.local_port, Duration::ZERO, Duration::ZERO);
            }
        }
    }

    /// Handles an envelope relayed from the central gateway. `bind` opens
    /// the UDP port for a new session and reports whether that worked; ports
    /// that fail to bind are skipped for good.
    pub fn on_control<R: RngCore + ?Sized>(
        &mut self,
        routed: &RoutedEnvelope,
        now: Duration,
        rng: &mut R,
        bind: &mut dyn FnMut(u16) -> bool,
    ) -> Vec<Action> {
        let envelope = &routed.envelope;
        match envelope.kind {
            EnvelopeKind::AllocateRequest => {
                let Ok(request) = envelope.body_as::<AllocateRequest>() else {
                    self.counters.tunnel_errors += 1;
                    return Vec::new();
                };
                loop {
                    match self.handle_allocate(&request, now, rng) {
                        Ok((allocation, actions)) => {
                            if bind(allocation.port) {
                                return actions;
                            }
                            self.abort_allocation(&allocation.session_id, true);
                        }
                        Err(err) => {
                            return vec![Action::SendFrame(TunnelFrame::control(
                                &self.allocate_error(&request, &err),
                            ))];
                        }
                    }
                }
            }
            EnvelopeKind::SetCredentials => match envelope.body_as::<SetCredentials>() {
                Ok(request) => vec![self.handle_set_credentials(&request)],
                Err(_) => {
                    self.counters.tunnel_errors += 1;
                    Vec::new()
                }
            },
            _ => Vec::new(),
        }
    }

    /// Error reply for an allocate request that could not be served.
    pub fn allocate_error(&self, request: &AllocateRequest, error: &LgatError) -> RoutedEnvelope {
        let code = match error {
            LgatError::PortsExhausted(..) => "ports-exhausted",
            LgatError::TunnelUnavailable => "tunnel-unavailable",
            _ => "allocate-failed",
        };
        RoutedEnvelope {
            channel: request.reply_channel.clone(),
            envelope: Envelope::new(
                &self.config.lgat_id,
                EnvelopeKind::AllocateReply,
                &AllocateReply {
                    request_id: request.request_id,
                    allocation: None,
                    error: Some(code.into()),
                },
            )
            .with_lgat(&self.config.lgat_id),
        }
    }

    /// Installs the credential map. Idempotent, and fine before or after the
    /// first connectivity check shows up.
    pub fn set_credentials(&mut self, session_id: &SessionId, pairs: &[CredentialPair]) -> Result<(), LgatError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or(LgatError::UnknownSession(*session_id))?;
        let map = session.credentials.get_or_insert_with(CredentialMap::new);
        for pair in pairs {
            map.insert(pair.clone());
        }
        session.advance(SessionState::Credentialed);
        Ok(())
    }

    /// Handles a set-credentials envelope and builds the ack routed back to
    /// the requester.
    pub fn handle_set_credentials(&mut self, request: &SetCredentials) -> Action {
        let error = self
            .set_credentials(&request.session_id, &request.pairs)
            .err()
            .map(|e| match e {
                LgatError::UnknownSession(_) => "unknown-session".to_string(),
                other => other.to_string(),
            });
        let ack = Envelope::new(
            &self.config.lgat_id,
            EnvelopeKind::SetCredentialsAck,
            &SetCredentialsAck {
                session_id: request.session_id,
                error,
            },
        )
        .with_lgat(&self.config.lgat_id);
        Action::SendFrame(TunnelFrame::control(&RoutedEnvelope {
            channel: request.reply_channel.clone(),
            envelope: ack,
        }))
    }

    /// A datagram arrived on one of the session ports.
    pub fn on_udp_datagram<R: RngCore + ?Sized>(
        &mut self,
        local_port: u16,
        datagram: &[u8],
        source: SocketAddrV4,
        now: Duration,
        rng: &mut R,
    ) -> Vec<Action> {
        let Some(session_id) = self.by_port.get(&local_port).copied() else {
            self.counters.unknown_port += 1;
            return Vec::new();
        };
        let session = self.sessions.get_mut(&session_id).expect("port maps to live session");
        session.last_activity = now;

        if !stun::peek_is_stun(datagram) {
            if session.state < SessionState::Credentialed {
                self.counters.no_credentials_yet += 1;
                return Vec::new();
            }
            session.advance(SessionState::Streaming);
            self.counters.media_to_tunnel += 1;
            return vec![Action::SendFrame(TunnelFrame::data(session_id, datagram.to_vec()))];
        }

        let request = match stun::decode(datagram) {
            Ok(m) => m,
            Err(_) => {
                self.counters.dropped_unparseable += 1;
                return Vec::new();
            }
        };
        if request.class != MessageClass::BindingRequest {
            self.counters.stun_responses_seen += 1;
            return Vec::new();
        }
        if session.stun_drops_remaining > 0 {
            session.stun_drops_remaining -= 1;
            self.counters.stun_dropped_configured += 1;
            return Vec::new();
        }
        let Some(credentials) = session.credentials.as_ref() else {
            self.counters.no_credentials_yet += 1;
            return Vec::new();
        };
        let Some(key) = request
            .username()
            .and_then(|u| credentials.password(u))
            .and_then(|p| ShortTermKey::new(p).ok())
        else {
            self.counters.unknown_username += 1;
            return Vec::new();
        };
        if stun::verify_integrity(datagram, &key) != Ok(true) {
            self.counters.bad_integrity += 1;
            return Vec::new();
        }
        let response = stun::build_binding_response(&request, source, &key).and_then(|r| r.encode());
        let mirrored = stun::build_mirrored_request(&request, credentials, rng).and_then(|r| r.encode());
        let (Ok(response), Ok(mirrored)) = (response, mirrored) else {
            self.counters.unknown_username += 1;
            return Vec::new();
        };

        self.counters.stun_answered += 1;
        let learned = session.browser_addr.is_none();
        if learned {
            session.browser_addr = Some(source);
        }
        session.advance(SessionState::Verified);

        let mut actions = vec![
            Action::SendUdp {
                local_port,
                to: source,
                payload: response,
            },
            Action::SendUdp {
                local_port,
                to: source,
                payload: mirrored,
            },
        ];
        if learned {
            self.flush_pending(&session_id, &mut actions);
        }
        actions
    }

    /// Delivers buffered media that was waiting for `session_id`'s browser
    /// address.
    fn flush_pending(&mut self, session_id: &SessionId, actions: &mut Vec<Action>) {
        let session = &self.sessions[session_id];
        let Some(browser) = session.browser_addr else { return };
        let local_port = session.local_port;
        let remote_lgat = session.remote_lgat.clone();

        let mut sources: Vec<SessionId> = vec![*session_id];
        sources.extend(
            self.remote
                .iter()
                .filter(|(_, r)| r.owner_lgat == remote_lgat && r.browser_addr == browser)
                .map(|(id, _)| *id),
        );
        for id in sources {
            if let Some(queue) = self.pending.remove(&id) {
                for payload in queue {
                    self.counters.media_to_browser += 1;
                    actions.push(Action::SendUdp {
                        local_port,
                        to: browser,
                        payload,
                    });
                }
            }
        }
    }

    fn buffer(&mut self, session_id: SessionId, payload: Vec<u8>) {
        let queue = self.pending.entry(session_id).or_default();
        if queue.len() == PENDING_MEDIA_CAP {
            queue.pop_front();
            self.counters.buffer_overflow += 1;
        }
        queue.push_back(payload);
        self.counters.media_buffered += 1;
    }

    /// Local session that terminates traffic of a remote session.
    fn resolve_remote(&self, remote: &RemoteSession) -> Option<&GatewaySession> {
        self.sessions.values().find(|s| {
            s.remote_lgat == remote.owner_lgat
                && s.browser_addr == Some(remote.browser_addr)
                && s.state != SessionState::Closed
        })
    }

    pub fn on_tunnel_frame(&mut self, frame: TunnelFrame, now: Duration) -> Vec<Action> {
        match frame.frame_type {
            FrameType::Data => self.on_tunnel_data(frame.session_id, frame.payload, now),
            FrameType::LeaseOpen => {
                let Ok(announcement) = frame.json::<LeaseAnnouncement>() else {
                    self.counters.tunnel_errors += 1;
                    return Vec::new();
                };
                self.remote.insert(
                    frame.session_id,
                    RemoteSession {
                        owner_lgat: announcement.owner_lgat,
                        browser_addr: announcement.peer_addr,
                    },
                );
                vec![Action::SendFrame(TunnelFrame::new(
                    FrameType::LeaseOpenAck,
                    frame.session_id,
                    Vec::new(),
                ))]
            }
            FrameType::LeaseClose => {
                self.remote.remove(&frame.session_id);
                self.pending.remove(&frame.session_id);
                if self.sessions.contains_key(&frame.session_id) {
                    return self.close_session(&frame.session_id, now, false);
                }
                Vec::new()
            }
            FrameType::Error => {
                self.counters.tunnel_errors += 1;
                let expired = matches!(
                    frame.json::<TunnelErrorBody>(),
                    Ok(TunnelErrorBody {
                        code: crate::tunnel::TunnelErrorCode::LeaseExpired
                    })
                );
                match self.sessions.get(&frame.session_id) {
                    // The central gateway lost our lease; announce it again.
                    Some(s) if expired => vec![Action::SendFrame(self.announcement(s, None))],
                    _ => Vec::new(),
                }
            }
            FrameType::LeaseOpenAck | FrameType::LeaseRenew | FrameType::Hello | FrameType::Control => Vec::new(),
        }
    }

    /// Media from the far side of the tunnel, forwarded as a single datagram.
    pub fn on_tunnel_data(&mut self, session_id: SessionId, payload: Vec<u8>, now: Duration) -> Vec<Action> {
        let target = match self.sessions.get(&session_id) {
            Some(own) => Some((own.local_port, own.browser_addr)),
            None => self.remote.get(&session_id).map(|remote| {
                self.resolve_remote(remote)
                    .map_or((0, None), |s| (s.local_port, s.browser_addr))
            }),
        };
        match target {
            None => {
                self.counters.unknown_session += 1;
                Vec::new()
            }
            Some((local_port, Some(to))) => {
                if let Some(s) = self.by_port.get(&local_port).and_then(|id| self.sessions.get_mut(id)) {
                    s.last_activity = now;
                }
                self.counters.media_to_browser += 1;
                vec![Action::SendUdp {
                    local_port,
                    to,
                    payload,
                }]
            }
            Some((_, None)) => {
                self.buffer(session_id, payload);
                Vec::new()
            }
        }
    }

    /// Ends a session. The port is reusable after the linger period.
    pub fn close_session(&mut self, session_id: &SessionId, now: Duration, notify: bool) -> Vec<Action> {
        let Some(session) = self.sessions.remove(session_id) else {
            return Vec::new();
        };
        self.by_port.remove(&session.local_port);
        self.pending.remove(session_id);
        self.ports.release(session.local_port, now, PORT_LINGER);
        let mut actions = vec![Action::CloseUdp {
            local_port: session.local_port,
        }];
        if notify && self.tunnel_up {
            actions.push(Action::SendFrame(TunnelFrame::new(
                FrameType::LeaseClose,
                *session_id,
                Vec::new(),
            )));
        }
        actions
    }

    /// Periodic housekeeping: lease renewals for active sessions and closing
    /// sessions idle for a whole lease period.
    pub fn on_tick(&mut self, now: Duration) -> Vec<Action> {
        let ttl = self.config.lease_ttl;
        let idle: Vec<SessionId> = self
            .sessions
            .values()
            .filter(|s| now.saturating_sub(s.last_activity) >= ttl)
            .map(|s| s.session_id)
            .collect();
        let mut actions = Vec::new();
        for id in idle {
            actions.extend(self.close_session(&id, now, true));
        }
        if self.tunnel_up {
            let mut due: Vec<&mut GatewaySession> = self
                .sessions
                .values_mut()
                .filter(|s| now.saturating_sub(s.last_renewed) >= RENEW_INTERVAL.min(ttl / 3))
                .collect();
            due.sort_by_key(|s| s.local_port);
            for s in due {
                s.last_renewed = now;
                actions.push(Action::SendFrame(TunnelFrame::new(
                    FrameType::LeaseRenew,
                    s.session_id,
                    Vec::new(),
                )));
            }
        }
        actions
    }

    pub fn status(&self) -> GatewayStatus {
        let mut states = BTreeMap::new();
        for s in self.sessions.values() {
            let name = match s.state {
                SessionState::Allocated => "allocated",
                SessionState::Credentialed => "credentialed",
                SessionState::Verified => "verified",
                SessionState::Streaming => "streaming",
                SessionState::Closed => "closed",
            };
            *states.entry(name.to_string()).or_insert(0) += 1;
        }
        GatewayStatus {
            lgat_id: self.config.lgat_id.clone(),
            sessions: self.sessions.len(),
            remote_sessions: self.remote.len(),
            udp_ports: self.ports.in_use(),
            states,
            counters: self.counters,
        }
    }

    pub fn control_channel(&self) -> String {
        lgat_channel(&self.config.lgat_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{make_credential_pairs, SessionCredentials, Transport};
    use crate::stun::{Attribute, StunMessage, TransactionId};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const T0: Duration = Duration::from_secs(10);

    fn request(n: u64) -> AllocateRequest {
        AllocateRequest {
            request_id: n,
            target_lgat: "lgat-B".into(),
            remote_lgat: "lgat-A".into(),
            candidate: CandidateAddress {
                ip: Ipv4Addr::new(192, 168, 0, 10),
                port: 54321,
                protocol: Transport::Udp,
            },
            reply_channel: "room/peer-b".into(),
        }
    }

    fn gateway(range: (u16, u16)) -> Gateway {
        let mut g = Gateway::new(LgatConfig::new("lgat-B", Ipv4Addr::new(192, 168, 0, 20), range)).unwrap();
        g.tunnel_connected();
        g
    }

    fn creds() -> (SessionCredentials, SessionCredentials) {
        (
            SessionCredentials::new("ufragA", "passwordAAAAAAAAAAAAAAAA"),
            SessionCredentials::new("ufragB", "passwordBBBBBBBBBBBBBBBB"),
        )
    }

    /// Connectivity check as browser B sends it: remote:local, keyed by A's pwd.
    fn browser_check(n: u8) -> Vec<u8> {
        let (a, b) = creds();
        let msg = StunMessage::new(MessageClass::BindingRequest, TransactionId([n; 12]))
            .with(Attribute::Username(alloc::format!("{}:{}", a.ufrag, b.ufrag)))
            .with(Attribute::Priority(0x6E7F_1EFF))
            .with(Attribute::IceControlled(99));
        stun::encode(&msg, Some(&ShortTermKey::new(&a.pwd).unwrap())).unwrap()
    }

    fn setup(drops: u32) -> (Gateway, SessionId, u16, ChaCha8Rng) {
        let mut g = gateway((50000, 50999));
        g.config.stun_drop_count = drops;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (alloc, _) = g.handle_allocate(&request(1), T0, &mut rng).unwrap();
        (g, alloc.session_id, alloc.port, rng)
    }

    fn install(g: &mut Gateway, id: SessionId) {
        let (a, b) = creds();
        g.set_credentials(&id, &make_credential_pairs(&b, &a)).unwrap();
    }

    const BROWSER: &str = "192.168.0.30:61000";

    #[test]
    fn config_validation() {
        assert!(Gateway::new(LgatConfig::new("x", Ipv4Addr::LOCALHOST, (2000, 1000))).is_err());
        assert!(Gateway::new(LgatConfig::new("x", Ipv4Addr::LOCALHOST, (80, 1000))).is_err());
        assert!(Gateway::new(LgatConfig::new("", Ipv4Addr::LOCALHOST, (2000, 3000))).is_err());
    }

    #[test]
    fn first_fit_allocation_and_reply() {
        let mut g = gateway((50000, 50999));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (alloc, actions) = g.handle_allocate(&request(1), T0, &mut rng).unwrap();
        assert_eq!(alloc.port, 50000);
        assert_eq!(alloc.ip, Ipv4Addr::new(192, 168, 0, 20));
        assert!(!alloc.session_id.is_nil());
        let Action::SendFrame(frame) = &actions[0] else {
            panic!()
        };
        assert_eq!(frame.frame_type, FrameType::LeaseOpen);
        let ann: LeaseAnnouncement = frame.json().unwrap();
        assert_eq!(ann.owner_lgat, "lgat-B");
        assert_eq!(ann.peer_lgat, "lgat-A");
        assert_eq!(ann.peer_addr, "192.168.0.10:54321".parse().unwrap());
        let reply = ann.reply.unwrap();
        assert_eq!(reply.channel, "room/peer-b");
        let body: AllocateReply = reply.envelope.body_as().unwrap();
        assert_eq!(body.allocation, Some(alloc));
        assert_eq!(g.session(&alloc.session_id).unwrap().state, SessionState::Allocated);
        let (second, _) = g.handle_allocate(&request(2), T0, &mut rng).unwrap();
        assert_eq!(second.port, 50001);
    }

    #[test]
    fn closed_port_reused_after_linger() {
        let mut g = gateway((50000, 50001));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = g.handle_allocate(&request(1), T0, &mut rng).unwrap();
        g.handle_allocate(&request(2), T0, &mut rng).unwrap();
        let actions = g.close_session(&a.session_id, T0, true);
        assert!(actions.contains(&Action::CloseUdp { local_port: 50000 }));
        assert!(matches!(
            g.handle_allocate(&request(3), T0 + Duration::from_secs(1), &mut rng),
            Err(LgatError::PortsExhausted(50000, 50001))
        ));
        let (c, _) = g.handle_allocate(&request(4), T0 + PORT_LINGER, &mut rng).unwrap();
        assert_eq!(c.port, 50000);
    }

    #[test]
    fn pigeonhole_exhaustion() {
        let mut g = gateway((50000, 50999));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1000 {
            g.handle_allocate(&request(i), T0, &mut rng).unwrap();
        }
        assert_eq!(
            g.handle_allocate(&request(1000), T0, &mut rng).unwrap_err(),
            LgatError::PortsExhausted(50000, 50999)
        );
    }

    #[test]
    fn allocate_needs_tunnel() {
        let mut g = Gateway::new(LgatConfig::new("lgat-B", Ipv4Addr::LOCALHOST, (50000, 50010))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = g.handle_allocate(&request(1), T0, &mut rng).unwrap_err();
        assert_eq!(err, LgatError::TunnelUnavailable);
        let reply = g.allocate_error(&request(1), &err);
        let body: AllocateReply = reply.envelope.body_as().unwrap();
        assert_eq!(body.error.as_deref(), Some("tunnel-unavailable"));
    }

    #[test]
    fn credentials_are_idempotent() {
        let (mut g, id, _, _) = setup(0);
        install(&mut g, id);
        install(&mut g, id);
        let s = g.session(&id).unwrap();
        assert_eq!(s.state, SessionState::Credentialed);
        assert_eq!(s.credentials.as_ref().unwrap().len(), 2);
        assert_eq!(
            g.set_credentials(&SessionId([1; 16]), &[]),
            Err(LgatError::UnknownSession(SessionId([1; 16])))
        );
    }

    #[test]
    fn configured_drops_come_first() {
        let (mut g, id, port, mut rng) = setup(3);
        install(&mut g, id);
        let src = BROWSER.parse().unwrap();
        assert!(g.on_udp_datagram(port, &browser_check(1), src, T0, &mut rng).is_empty());
        assert_eq!(g.session(&id).unwrap().stun_drops_remaining, 2);
        assert!(g.on_udp_datagram(port, &browser_check(2), src, T0, &mut rng).is_empty());
        assert!(g.on_udp_datagram(port, &browser_check(3), src, T0, &mut rng).is_empty());
        let out = g.on_udp_datagram(port, &browser_check(4), src, T0, &mut rng);
        assert_eq!(out.len(), 2);
        assert_eq!(g.counters().stun_dropped_configured, 3);
    }

    #[test]
    fn answers_with_response_and_mirror() {
        let (mut g, id, port, mut rng) = setup(0);
        install(&mut g, id);
        let src: SocketAddrV4 = BROWSER.parse().unwrap();
        let out = g.on_udp_datagram(port, &browser_check(9), src, T0, &mut rng);
        let (a, b) = creds();
        let [Action::SendUdp {
            to: to1, payload: resp, ..
        }, Action::SendUdp {
            to: to2,
            payload: mirror,
            ..
        }] = out.as_slice()
        else {
            panic!("expected two datagrams, got {out:?}");
        };
        assert_eq!((*to1, *to2), (src, src));
        let resp_msg = stun::decode(resp).unwrap();
        assert_eq!(resp_msg.class, MessageClass::BindingSuccessResponse);
        assert_eq!(resp_msg.transaction_id, TransactionId([9; 12]));
        assert_eq!(resp_msg.mapped_address(), Some(src));
        assert_eq!(
            stun::verify_integrity(resp, &ShortTermKey::new(&a.pwd).unwrap()),
            Ok(true)
        );
        let mirror_msg = stun::decode(mirror).unwrap();
        assert_eq!(mirror_msg.username(), Some("ufragB:ufragA"));
        assert!(mirror_msg.attributes.contains(&Attribute::IceControlled(99)));
        assert_eq!(
            stun::verify_integrity(mirror, &ShortTermKey::new(&b.pwd).unwrap()),
            Ok(true)
        );
        let s = g.session(&id).unwrap();
        assert_eq!(s.browser_addr, Some(src));
        assert_eq!(s.state, SessionState::Verified);
    }

    #[test]
    fn checks_before_credentials_are_counted() {
        let (mut g, _, port, mut rng) = setup(0);
        let src = BROWSER.parse().unwrap();
        assert!(g.on_udp_datagram(port, &browser_check(1), src, T0, &mut rng).is_empty());
        assert_eq!(g.counters().no_credentials_yet, 1);
    }

    #[test]
    fn wrong_key_is_rejected() {
        let (mut g, id, port, mut rng) = setup(0);
        let (a, b) = creds();
        let wrong = SessionCredentials::new(a.ufrag.clone(), "somethingelsesomethingelse");
        g.set_credentials(&id, &make_credential_pairs(&b, &wrong)).unwrap();
        let out = g.on_udp_datagram(port, &browser_check(1), BROWSER.parse().unwrap(), T0, &mut rng);
        assert!(out.is_empty());
        assert_eq!(g.counters().bad_integrity, 1);
    }

    #[test]
    fn media_goes_to_tunnel_unmodified() {
        let (mut g, id, port, mut rng) = setup(0);
        let mut media = vec![0u8; 1200];
        media[0] = 0x80;
        media[1200 - 1] = 0xEE;
        let src = BROWSER.parse().unwrap();
        assert!(
            g.on_udp_datagram(port, &media, src, T0, &mut rng).is_empty(),
            "needs credentials"
        );
        install(&mut g, id);
        let out = g.on_udp_datagram(port, &media, src, T0, &mut rng);
        assert_eq!(out, vec![Action::SendFrame(TunnelFrame::data(id, media.clone()))]);
        assert_eq!(g.session(&id).unwrap().state, SessionState::Streaming);
    }

    #[test]
    fn tunnel_media_waits_for_browser_address() {
        let (mut g, id, port, mut rng) = setup(0);
        install(&mut g, id);
        // Remote session announced by the central gateway, for our browser.
        let remote_id = SessionId([0xAA; 16]);
        let ann = LeaseAnnouncement {
            owner_lgat: "lgat-A".into(),
            peer_lgat: "lgat-B".into(),
            peer_addr: BROWSER.parse().unwrap(),
            reply: None,
        };
        let ack = g.on_tunnel_frame(TunnelFrame::lease(FrameType::LeaseOpen, remote_id, &ann), T0);
        assert!(matches!(&ack[0], Action::SendFrame(f) if f.frame_type == FrameType::LeaseOpenAck));
        for n in 0..3u8 {
            assert!(g
                .on_tunnel_frame(TunnelFrame::data(remote_id, vec![0x80, n]), T0)
                .is_empty());
        }
        let out = g.on_udp_datagram(port, &browser_check(1), BROWSER.parse().unwrap(), T0, &mut rng);
        let media: Vec<&Vec<u8>> = out
            .iter()
            .skip(2)
            .map(|a| match a {
                Action::SendUdp {
                    payload, local_port, ..
                } => {
                    assert_eq!(*local_port, port);
                    payload
                }
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(media, [&vec![0x80, 0], &vec![0x80, 1], &vec![0x80, 2]]);
        let direct = g.on_tunnel_frame(TunnelFrame::data(remote_id, vec![0x80, 9]), T0);
        assert_eq!(
            direct,
            vec![Action::SendUdp {
                local_port: port,
                to: BROWSER.parse().unwrap(),
                payload: vec![0x80, 9]
            }]
        );
    }

    #[test]
    fn pending_buffer_drops_oldest() {
        let (mut g, id, _, _) = setup(0);
        for n in 0..40u8 {
            g.on_tunnel_data(id, vec![n], T0);
        }
        assert_eq!(g.pending[&id].len(), PENDING_MEDIA_CAP);
        assert_eq!(g.pending[&id][0], vec![8]);
        assert_eq!(g.counters().buffer_overflow, 8);
    }

    #[test]
    fn unknown_tunnel_session_dropped() {
        let mut g = gateway((50000, 50010));
        assert!(g.on_tunnel_data(SessionId([3; 16]), vec![1], T0).is_empty());
        assert_eq!(g.counters().unknown_session, 1);
    }

    #[test]
    fn renewals_and_idle_close() {
        let (mut g, id, port, mut rng) = setup(0);
        install(&mut g, id);
        let t = T0 + RENEW_INTERVAL;
        g.on_udp_datagram(port, &[0x80, 0], BROWSER.parse().unwrap(), t, &mut rng);
        let renew = g.on_tick(t);
        assert_eq!(
            renew,
            vec![Action::SendFrame(TunnelFrame::new(FrameType::LeaseRenew, id, vec![]))]
        );
        assert!(g.on_tick(t + Duration::from_secs(1)).is_empty());
        let closed = g.on_tick(t + DEFAULT_LEASE_TTL);
        assert!(closed.contains(&Action::CloseUdp { local_port: port }));
        assert!(g.session(&id).is_none());
    }

    #[test]
    fn reconnect_reannounces_sessions() {
        let (mut g, id, _, _) = setup(0);
        g.tunnel_lost();
        let actions = g.tunnel_connected();
        assert_eq!(actions.len(), 2);
        let Action::SendFrame(f) = &actions[1] else { panic!() };
        assert_eq!((f.frame_type, f.session_id), (FrameType::LeaseOpen, id));
        assert!(f.json::<LeaseAnnouncement>().unwrap().reply.is_none());
    }

    #[test]
    fn control_envelopes_dispatch() {
        let mut g = gateway((50000, 50002));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let routed = RoutedEnvelope {
            channel: lgat_channel("lgat-B"),
            envelope: Envelope::new("peer-b", EnvelopeKind::AllocateRequest, &request(4)),
        };
        // 50000 is taken by something else.
        let mut bind = |port: u16| port != 50000;
        let actions = g.on_control(&routed, T0, &mut rng, &mut bind);
        let Action::SendFrame(frame) = &actions[0] else {
            panic!()
        };
        let ann: LeaseAnnouncement = frame.json().unwrap();
        let reply: AllocateReply = ann.reply.unwrap().envelope.body_as().unwrap();
        assert_eq!(reply.allocation.unwrap().port, 50001);
        g.on_control(&routed, T0, &mut rng, &mut bind);
        let actions = g.on_control(&routed, T0, &mut rng, &mut bind);
        let Action::SendFrame(frame) = &actions[0] else {
            panic!()
        };
        assert_eq!(frame.frame_type, FrameType::Control);
        let back: RoutedEnvelope = frame.json().unwrap();
        assert_eq!(back.channel, "room/peer-b");
        assert_eq!(
            back.envelope.body_as::<AllocateReply>().unwrap().error.as_deref(),
            Some("ports-exhausted")
        );

        let (a, b) = creds();
        let set = SetCredentials {
            target_lgat: "lgat-B".into(),
            session_id: reply_session(&g),
            pairs: make_credential_pairs(&b, &a).to_vec(),
            reply_channel: "room/peer-b".into(),
        };
        let routed = RoutedEnvelope {
            channel: lgat_channel("lgat-B"),
            envelope: Envelope::new("peer-b", EnvelopeKind::SetCredentials, &set),
        };
        let actions = g.on_control(&routed, T0, &mut rng, &mut bind);
        let Action::SendFrame(frame) = &actions[0] else {
            panic!()
        };
        let ack: SetCredentialsAck = frame.json::<RoutedEnvelope>().unwrap().envelope.body_as().unwrap();
        assert_eq!(
            ack,
            SetCredentialsAck {
                session_id: set.session_id,
                error: None
            }
        );
    }

    fn reply_session(g: &Gateway) -> SessionId {
        g.session_for_port(50001).unwrap().session_id
    }
}
