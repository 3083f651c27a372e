//! Deterministic in-memory deployment driven by a virtual clock: two peers,
//! their interceptors, one or two local gateways, the central hub and a
//! pubsub relay. Nothing here touches real sockets or time.
//!
//! Gates hold back whole classes of events until a chosen instant, which lets
//! a test force the order in which the racing parts of session setup land.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::net::{Ipv4Addr, SocketAddrV4};
use core::time::Duration;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgat::{ConnId, Hub, HubAction, RouterCounters};
use crate::lgat::{Action, Gateway, LgatConfig, LgatCounters};
use crate::peersim::{IceState, Milestones, Peer, PeerConfig, PeerOutput, StatsSummary};
use crate::signal::{unknown_lgat_reply, Envelope, EnvelopeKind, RoutedEnvelope};
use crate::stun;
use crate::tunnel::{FrameType, TunnelFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gate {
    /// The answer reaching the offerer's interceptor, which caches the
    /// remote credentials there.
    AnswerCredentials,
    /// Allocate replies reaching either interceptor.
    AllocateReply,
    /// Connectivity checks from a browser reaching its local gateway.
    BrowserStun,
}

impl Gate {
    pub const ALL: [Gate; 3] = [Gate::AnswerCredentials, Gate::AllocateReply, Gate::BrowserStun];
}

/// All orderings of the three gates.
pub fn gate_orders() -> Vec<[Gate; 3]> {
    let [a, b, c] = Gate::ALL;
    alloc::vec![[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub same_lgat: bool,
    /// One way, peer to pubsub server or pubsub server to gateway.
    pub control_latency: Duration,
    /// One way, local gateway to central gateway.
    pub tunnel_latency: Duration,
    pub udp_latency: Duration,
    pub stun_drop_count: u32,
    /// Gate and the instant it opens. Gates not listed are always open.
    pub gates: Vec<(Gate, Duration)>,
    pub media_packets: u32,
    pub media_interval: Duration,
    pub payload_len: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            same_lgat: false,
            control_latency: Duration::from_millis(50),
            tunnel_latency: Duration::from_millis(5),
            udp_latency: Duration::from_millis(1),
            stun_drop_count: crate::lgat::DEFAULT_STUN_DROPS,
            gates: Vec::new(),
            media_packets: 50,
            media_interval: Duration::from_millis(20),
            payload_len: 160,
        }
    }
}

impl SimConfig {
    /// Gates opening in `order`, the first at `first`, then every `spacing`.
    pub fn with_gate_order(mut self, order: [Gate; 3], first: Duration, spacing: Duration) -> Self {
        self.gates = order
            .iter()
            .enumerate()
            .map(|(i, g)| (*g, first + spacing * i as u32))
            .collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Endpoint {
    Browser(usize),
    Lgat(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    Envelope {
        peer: usize,
        envelope: Envelope,
    },
    Route(Envelope),
    ToLgat {
        lgat: usize,
        frame: TunnelFrame,
    },
    ToHub {
        conn: ConnId,
        frame: TunnelFrame,
    },
    Udp {
        from: SocketAddrV4,
        to: SocketAddrV4,
        payload: Vec<u8>,
    },
    PeerTimer {
        peer: usize,
        generation: u64,
    },
    Tick,
    OpenGate(Gate),
}

#[derive(Debug)]
struct Scheduled {
    at: Duration,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerReport {
    pub peer_id: String,
    pub ice: IceState,
    pub milestones: Milestones,
    pub media: StatsSummary,
    pub delivered_candidates: Vec<String>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub now: Duration,
    pub peers: Vec<PeerReport>,
    pub lgats: Vec<LgatCounters>,
    pub router: RouterCounters,
    /// Tunnel data frames written by local gateways.
    pub tunnel_data_frames: u64,
    /// Datagrams stopped at a site boundary.
    pub udp_blocked: u64,
    /// When each gated class of event first got through.
    pub first_passed: BTreeMap<String, Duration>,
}

impl SimReport {
    pub fn all_connected(&self) -> bool {
        self.peers.iter().all(|p| p.ice == IceState::Connected)
    }
}

/// The whole deployment. Site `i` holds browser `i` and gateway `i`; with
/// `same_lgat` both browsers sit at site 0.
pub struct World {
    config: SimConfig,
    now: Duration,
    queue: BinaryHeap<Reverse<Scheduled>>,
    order: u64,
    rng: ChaCha8Rng,
    peers: Vec<Peer>,
    peer_sites: Vec<usize>,
    timers: Vec<u64>,
    lgats: Vec<Gateway>,
    hub: Hub,
    open: BTreeMap<Gate, bool>,
    held: BTreeMap<Gate, Vec<Event>>,
    first_passed: BTreeMap<Gate, Duration>,
    tunnel_data_frames: u64,
    udp_blocked: u64,
}

const ROOM: &str = "room";

fn lgat_ip(site: usize) -> Ipv4Addr {
    Ipv4Addr::new(192, 168, 10 + site as u8, 1)
}

fn browser_addr(site: usize, index: usize) -> SocketAddrV4 {
    SocketAddrV4::new(Ipv4Addr::new(192, 168, 10 + site as u8, 100 + index as u8), 40000)
}

fn site_of(ip: &Ipv4Addr) -> usize {
    usize::from(ip.octets()[2]) - 10
}

impl World {
    pub fn new(config: SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sites = if config.same_lgat { 1 } else { 2 };
        let lgats: Vec<Gateway> = (0..sites)
            .map(|site| {
                let mut c = LgatConfig::new(
                    &format!("lgat-{}", (b'A' + site as u8) as char),
                    lgat_ip(site),
                    (50000, 50099),
                );
                c.stun_drop_count = config.stun_drop_count;
                Gateway::new(c).expect("valid gateway config")
            })
            .collect();
        let peer_sites: Vec<usize> = (0..2).map(|i| if config.same_lgat { 0 } else { i }).collect();
        let peers = (0..2)
            .map(|i| {
                Peer::new(
                    PeerConfig {
                        peer_id: format!("peer-{}", (b'a' + i as u8) as char),
                        room: ROOM.into(),
                        lgat_id: lgats[peer_sites[i]].config().lgat_id.clone(),
                        offerer: i == 0,
                        local_addr: browser_addr(peer_sites[i], i),
                        interval: config.media_interval,
                        packets: config.media_packets,
                        payload_len: config.payload_len,
                    },
                    &mut rng,
                )
            })
            .collect();
        let mut world = World {
            open: Gate::ALL.iter().map(|g| (*g, true)).collect(),
            held: BTreeMap::new(),
            first_passed: BTreeMap::new(),
            now: Duration::ZERO,
            queue: BinaryHeap::new(),
            order: 0,
            rng,
            peers,
            peer_sites,
            timers: alloc::vec![0; 2],
            lgats,
            hub: Hub::default(),
            tunnel_data_frames: 0,
            udp_blocked: 0,
            config,
        };
        for (gate, at) in world.config.gates.clone() {
            world.open.insert(gate, false);
            world.schedule(at, Event::OpenGate(gate));
        }
        for i in 0..world.lgats.len() {
            let actions = world.lgats[i].tunnel_connected();
            world.lgat_actions(i, actions);
        }
        world.schedule(Duration::from_secs(1), Event::Tick);
        let start = world.peers[0].start(Duration::from_millis(10));
        world.now = Duration::from_millis(10);
        world.peer_outputs(0, start);
        world.now = Duration::ZERO;
        world
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn peer(&self, i: usize) -> &Peer {
        &self.peers[i]
    }

    pub fn gateway(&self, i: usize) -> &Gateway {
        &self.lgats[i]
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    fn schedule(&mut self, at: Duration, event: Event) {
        self.order += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            order: self.order,
            event,
        }));
    }

    fn after(&mut self, delay: Duration, event: Event) {
        self.schedule(self.now + delay, event);
    }

    fn gate_for(&self, event: &Event) -> Option<Gate> {
        match event {
            Event::Envelope { peer: 0, envelope } if envelope.kind == EnvelopeKind::Answer => {
                Some(Gate::AnswerCredentials)
            }
            Event::Envelope { envelope, .. } if envelope.kind == EnvelopeKind::AllocateReply => {
                Some(Gate::AllocateReply)
            }
            Event::Udp { from, to, payload }
                if matches!(self.endpoint(from), Some(Endpoint::Browser(_)))
                    && matches!(self.endpoint(to), Some(Endpoint::Lgat(_)))
                    && stun::peek_is_stun(payload) =>
            {
                Some(Gate::BrowserStun)
            }
            _ => None,
        }
    }

    fn endpoint(&self, addr: &SocketAddrV4) -> Option<Endpoint> {
        if let Some(i) = (0..self.peers.len()).find(|i| self.peers[*i].config().local_addr == *addr) {
            return Some(Endpoint::Browser(i));
        }
        (0..self.lgats.len())
            .find(|i| lgat_ip(*i) == *addr.ip())
            .map(Endpoint::Lgat)
    }

    /// Processes events up to `until`, or until `stop` holds.
    pub fn run_until(&mut self, until: Duration, mut stop: impl FnMut(&World) -> bool) -> bool {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.at > until {
                break;
            }
            let Reverse(Scheduled { at, event, .. }) = self.queue.pop().unwrap();
            self.now = at;
            self.dispatch(event);
            if stop(self) {
                return true;
            }
        }
        self.now = self.now.max(until);
        false
    }

    /// Runs until both peers connected; returns when that happened.
    pub fn run_until_connected(&mut self, limit: Duration) -> Option<Duration> {
        self.run_until(limit, |w| w.peers.iter().all(|p| p.ice_state() == IceState::Connected))
            .then_some(self.now)
    }

    /// Runs until both peers finished streaming or failed.
    pub fn run_to_completion(&mut self, limit: Duration) -> SimReport {
        self.run_until(limit, |w| w.peers.iter().all(Peer::is_done));
        self.report()
    }

    fn dispatch(&mut self, event: Event) {
        if let Some(gate) = self.gate_for(&event) {
            if !self.open[&gate] {
                self.held.entry(gate).or_default().push(event);
                return;
            }
            self.first_passed.entry(gate).or_insert(self.now);
        }
        match event {
            Event::OpenGate(gate) => {
                self.open.insert(gate, true);
                for held in self.held.remove(&gate).unwrap_or_default() {
                    self.after(Duration::ZERO, held);
                }
            }
            Event::Envelope { peer, envelope } => {
                let out = self.peers[peer].on_envelope(&envelope, self.now);
                self.peer_outputs(peer, out);
            }
            Event::Route(envelope) => self.route(envelope),
            Event::ToLgat { lgat, frame } => self.deliver_to_lgat(lgat, frame),
            Event::ToHub { conn, frame } => {
                let actions = self.hub.on_frame(conn, frame, self.now);
                self.hub_actions(actions);
            }
            Event::Udp { from, to, payload } => self.udp(from, to, payload),
            Event::PeerTimer { peer, generation } => {
                if self.timers[peer] == generation {
                    let out = self.peers[peer].poll(self.now, &mut self.rng);
                    self.peer_outputs(peer, out);
                }
            }
            Event::Tick => {
                for i in 0..self.lgats.len() {
                    let actions = self.lgats[i].on_tick(self.now);
                    self.lgat_actions(i, actions);
                }
                let actions = self.hub.on_tick(self.now);
                self.hub_actions(actions);
                self.after(Duration::from_secs(1), Event::Tick);
            }
        }
    }

    /// Delivery through the pubsub server: one hop in, one hop out.
    fn publish(&mut self, routed: RoutedEnvelope) {
        let latency = self.config.control_latency * 2;
        if routed.channel == ROOM {
            for peer in 0..self.peers.len() {
                self.after(
                    latency,
                    Event::Envelope {
                        peer,
                        envelope: routed.envelope.clone(),
                    },
                );
            }
        } else if let Some(peer) = (0..self.peers.len()).find(|i| self.peers[*i].inbox() == routed.channel) {
            self.after(
                latency,
                Event::Envelope {
                    peer,
                    envelope: routed.envelope,
                },
            );
        }
    }

    fn route(&mut self, envelope: Envelope) {
        let target = envelope.target_lgat().unwrap_or_default();
        match self.hub.forward_control(&target, envelope.clone()) {
            Some(action) => self.hub_actions(alloc::vec![action]),
            None => {
                if let Some(reply) = unknown_lgat_reply(&envelope, "signal") {
                    self.publish(reply);
                }
            }
        }
    }

    fn peer_outputs(&mut self, peer: usize, outputs: Vec<PeerOutput>) {
        for output in outputs {
            match output {
                PeerOutput::Publish(routed) => self.publish(routed),
                PeerOutput::Route(envelope) => {
                    self.after(self.config.control_latency * 2, Event::Route(envelope));
                }
                PeerOutput::SendUdp { to, payload } => {
                    let from = self.peers[peer].config().local_addr;
                    self.after(self.config.udp_latency, Event::Udp { from, to, payload });
                }
                PeerOutput::Failed(_) => {}
            }
        }
        self.rearm(peer);
    }

    fn rearm(&mut self, peer: usize) {
        self.timers[peer] += 1;
        if let Some(at) = self.peers[peer].poll_timeout() {
            let generation = self.timers[peer];
            self.schedule(at.max(self.now), Event::PeerTimer { peer, generation });
        }
    }

    fn udp(&mut self, from: SocketAddrV4, to: SocketAddrV4, payload: Vec<u8>) {
        if site_of(from.ip()) != site_of(to.ip()) {
            self.udp_blocked += 1;
            return;
        }
        match self.endpoint(&to) {
            Some(Endpoint::Browser(i)) => {
                let out = self.peers[i].on_datagram(from, &payload, self.now);
                self.peer_outputs(i, out);
            }
            Some(Endpoint::Lgat(i)) => {
                let actions = self.lgats[i].on_udp_datagram(to.port(), &payload, from, self.now, &mut self.rng);
                self.lgat_actions(i, actions);
            }
            None => self.udp_blocked += 1,
        }
    }

    fn deliver_to_lgat(&mut self, lgat: usize, frame: TunnelFrame) {
        let actions = if frame.frame_type == FrameType::Control {
            match frame.json::<RoutedEnvelope>() {
                Ok(routed) => self.lgats[lgat].on_control(&routed, self.now, &mut self.rng, &mut |_| true),
                Err(_) => Vec::new(),
            }
        } else {
            self.lgats[lgat].on_tunnel_frame(frame, self.now)
        };
        self.lgat_actions(lgat, actions);
    }

    fn lgat_actions(&mut self, lgat: usize, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::SendUdp {
                    local_port,
                    to,
                    payload,
                } => {
                    let from = SocketAddrV4::new(lgat_ip(lgat), local_port);
                    self.after(self.config.udp_latency, Event::Udp { from, to, payload });
                }
                Action::SendFrame(frame) => {
                    if frame.frame_type == FrameType::Data {
                        self.tunnel_data_frames += 1;
                    }
                    self.after(
                        self.config.tunnel_latency,
                        Event::ToHub {
                            conn: ConnId(lgat as u64),
                            frame,
                        },
                    );
                }
                Action::CloseUdp { .. } => {}
            }
        }
    }

    fn hub_actions(&mut self, actions: Vec<HubAction>) {
        for action in actions {
            match action {
                HubAction::Send { conn, frame } => {
                    self.after(
                        self.config.tunnel_latency,
                        Event::ToLgat {
                            lgat: conn.0 as usize,
                            frame,
                        },
                    );
                }
                HubAction::Publish(routed) => self.publish(routed),
                HubAction::Registered { .. } | HubAction::Disconnect(_) => {}
            }
        }
    }

    pub fn report(&self) -> SimReport {
        SimReport {
            now: self.now,
            peers: self
                .peers
                .iter()
                .map(|p| PeerReport {
                    peer_id: p.config().peer_id.clone(),
                    ice: p.ice_state(),
                    milestones: p.milestones(),
                    media: p.summary(),
                    delivered_candidates: p.delivered_candidates().to_vec(),
                    failure: p.failure().map(String::from),
                })
                .collect(),
            lgats: self.lgats.iter().map(Gateway::counters).collect(),
            router: self.hub.router().counters(),
            tunnel_data_frames: self.tunnel_data_frames,
            udp_blocked: self.udp_blocked,
            first_passed: self
                .first_passed
                .iter()
                .map(|(g, t)| {
                    let name = serde_json::to_value(g).ok().and_then(|v| v.as_str().map(String::from));
                    (name.unwrap_or_default(), *t)
                })
                .collect(),
        }
    }

    /// Sites each peer lives at, by index.
    pub fn peer_sites(&self) -> &[usize] {
        &self.peer_sites
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgat::RoutingMode;

    const LIMIT: Duration = Duration::from_secs(60);

    #[test]
    fn tunneled_call_streams_without_loss() {
        let mut world = World::new(SimConfig::default());
        let report = world.run_to_completion(LIMIT);
        assert!(report.all_connected(), "{report:#?}");
        for p in &report.peers {
            assert_eq!(
                (p.media.sent, p.media.received, p.media.lost, p.media.corrupted),
                (50, 50, 0, 0),
                "{report:#?}"
            );
            assert!(p.failure.is_none());
        }
        assert_eq!(report.router.stun_payloads, 0);
        assert!(report.tunnel_data_frames > 0);
        for (i, lgat) in report.lgats.iter().enumerate() {
            assert_eq!(lgat.stun_dropped_configured, 3, "lgat {i}");
        }
        assert_eq!(world.peer(0).mode(), Some(RoutingMode::Tunneled));
        // Each browser only ever sees its own gateway.
        assert!(report.peers[0].delivered_candidates[0].contains("192.168.10.1 50000"));
        assert!(report.peers[1].delivered_candidates[0].contains("192.168.11.1 50000"));
    }

    #[test]
    fn same_gateway_goes_direct() {
        let mut world = World::new(SimConfig {
            same_lgat: true,
            ..SimConfig::default()
        });
        let report = world.run_to_completion(LIMIT);
        assert!(report.all_connected());
        assert_eq!(report.tunnel_data_frames, 0);
        assert_eq!(report.lgats[0].stun_answered, 0);
        assert!(report.peers[1].delivered_candidates[0].contains("192.168.10.100 40000"));
    }

    #[test]
    fn gates_hold_and_release() {
        let config = SimConfig::default().with_gate_order(
            [Gate::BrowserStun, Gate::AllocateReply, Gate::AnswerCredentials],
            Duration::from_secs(1),
            Duration::from_secs(2),
        );
        let mut world = World::new(config);
        assert!(world.run_until_connected(LIMIT).is_some());
        let report = world.report();
        assert!(report.first_passed["browser-stun"] >= Duration::from_secs(1));
        assert!(report.first_passed["allocate-reply"] >= Duration::from_secs(3));
        assert_eq!(report.first_passed["answer-credentials"], Duration::from_secs(5));
    }
}
