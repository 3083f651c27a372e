use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cgat::{check_same_lgat, RoutingMode};
use crate::sdp::{
    credential_warning, extract_credentials, make_credential_pairs, minimal_description, parse_candidate,
    rewrite_candidate, Candidate, SessionCredentials, Transport,
};
use crate::session::SessionId;
use crate::signal::{
    AllocateReply, AllocateRequest, Allocation, CandidateAddress, CandidateBody, Description, Envelope, EnvelopeKind,
    RoutedEnvelope, SetCredentials, SetCredentialsAck,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionKind {
    Offer,
    Answer,
}

impl DescriptionKind {
    fn envelope_kind(self) -> EnvelopeKind {
        match self {
            DescriptionKind::Offer => EnvelopeKind::Offer,
            DescriptionKind::Answer => EnvelopeKind::Answer,
        }
    }
}

/// Minimal description for a simulated browser; offers use `actpass`.
pub fn create_description(credentials: &SessionCredentials, session_id: u64, kind: DescriptionKind) -> String {
    let setup = match kind {
        DescriptionKind::Offer => "actpass",
        DescriptionKind::Answer => "active",
    };
    minimal_description(credentials, session_id, setup)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterceptorConfig {
    pub peer_id: String,
    pub room: String,
    pub lgat_id: String,
}

/// Something the interceptor hands to the browser side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Description { kind: DescriptionKind, sdp: String },
    Candidate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    /// Publish on the pubsub server.
    Publish(RoutedEnvelope),
    /// Hand to the pubsub server's gateway routing path.
    Route(Envelope),
    Deliver(Delivery),
    Failed(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterceptorCounters {
    pub candidates_passed: u32,
    pub candidates_rewritten: u32,
    pub candidates_unsupported: u32,
    pub allocate_requests: u32,
    pub credentials_sent: u32,
    pub credentials_acked: u32,
    /// Both sides chose the same ufrag, so the two installed usernames collide.
    pub identical_ufrags: u32,
}

#[derive(Debug, Clone)]
struct PendingAllocation {
    request_id: u64,
    candidate: Candidate,
    allocation: Option<Allocation>,
    credentials_sent: bool,
}

/// Signaling shim between one browser and the pubsub server.
///
/// It learns both peers' gateway ids from the offer and answer envelopes.
/// Peers behind the same gateway get the remote candidates untouched. For
/// peers behind different gateways every remote candidate is swapped for a
/// port on the local gateway, and once the remote credentials are known the
/// credential pairs for that port are installed there.
#[derive(Debug, Clone)]
pub struct Interceptor {
    config: InterceptorConfig,
    local: Option<SessionCredentials>,
    remote: Option<SessionCredentials>,
    remote_lgat: Option<String>,
    mode: Option<RoutingMode>,
    held: Vec<String>,
    allocations: Vec<PendingAllocation>,
    next_request: u64,
    counters: InterceptorCounters,
}

impl Interceptor {
    pub fn new(config: InterceptorConfig) -> Self {
        Interceptor {
            config,
            local: None,
            remote: None,
            remote_lgat: None,
            mode: None,
            held: Vec::new(),
            allocations: Vec::new(),
            next_request: 1,
            counters: InterceptorCounters::default(),
        }
    }

    pub fn config(&self) -> &InterceptorConfig {
        &self.config
    }

    /// Channel on which replies addressed to this peer arrive.
    pub fn inbox(&self) -> String {
        format!("{}/{}", self.config.room, self.config.peer_id)
    }

    pub fn mode(&self) -> Option<RoutingMode> {
        self.mode
    }

    pub fn remote_credentials(&self) -> Option<&SessionCredentials> {
        self.remote.as_ref()
    }

    pub fn counters(&self) -> InterceptorCounters {
        self.counters
    }

    /// Sessions allocated on the local gateway so far.
    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.iter().filter_map(|p| p.allocation.as_ref())
    }

    fn envelope<B: Serialize>(&self, kind: EnvelopeKind, body: &B) -> Envelope {
        Envelope::new(&self.config.peer_id, kind, body).with_lgat(&self.config.lgat_id)
    }

    fn publish_room(&self, envelope: Envelope) -> Output {
        Output::Publish(RoutedEnvelope {
            channel: self.config.room.clone(),
            envelope,
        })
    }

    /// The browser produced its offer or answer.
    pub fn local_description(&mut self, kind: DescriptionKind, sdp: &str) -> Vec<Output> {
        match extract_credentials(sdp) {
            Ok(creds) => self.local = Some(creds),
            Err(e) => return vec![Output::Failed(format!("local description: {e}"))],
        }
        let mut out = vec![self.publish_room(self.envelope(kind.envelope_kind(), &Description { sdp: sdp.into() }))];
        self.send_credentials(&mut out);
        out
    }

    /// The browser gathered a local candidate.
    pub fn local_candidate(&mut self, line: &str) -> Vec<Output> {
        vec![self.publish_room(self.envelope(EnvelopeKind::Candidate, &CandidateBody { candidate: line.into() }))]
    }

    pub fn on_envelope(&mut self, envelope: &Envelope) -> Vec<Output> {
        if envelope.sender == self.config.peer_id {
            return Vec::new();
        }
        let mut out = Vec::new();
        match envelope.kind {
            EnvelopeKind::Offer | EnvelopeKind::Answer => self.on_description(envelope, &mut out),
            EnvelopeKind::Candidate => match envelope.body_as::<CandidateBody>() {
                Ok(body) if self.mode.is_none() => self.held.push(body.candidate),
                Ok(body) => self.on_candidate(&body.candidate, &mut out),
                Err(e) => out.push(Output::Failed(format!("candidate: {e}"))),
            },
            EnvelopeKind::AllocateReply => self.on_allocate_reply(envelope, &mut out),
            EnvelopeKind::SetCredentialsAck => match envelope.body_as::<SetCredentialsAck>() {
                Ok(SetCredentialsAck { error: None, .. }) => self.counters.credentials_acked += 1,
                Ok(SetCredentialsAck {
                    session_id,
                    error: Some(e),
                }) => out.push(Output::Failed(format!("set-credentials for {session_id}: {e}"))),
                Err(e) => out.push(Output::Failed(format!("set-credentials-ack: {e}"))),
            },
            EnvelopeKind::AllocateRequest | EnvelopeKind::SetCredentials => {}
        }
        out
    }

    fn on_description(&mut self, envelope: &Envelope, out: &mut Vec<Output>) {
        let kind = if envelope.kind == EnvelopeKind::Offer {
            DescriptionKind::Offer
        } else {
            DescriptionKind::Answer
        };
        let sdp = match envelope.body_as::<Description>() {
            Ok(d) => d.sdp,
            Err(e) => return out.push(Output::Failed(format!("description: {e}"))),
        };
        match extract_credentials(&sdp) {
            Ok(creds) => self.remote = Some(creds),
            Err(e) => return out.push(Output::Failed(format!("remote description: {e}"))),
        }
        // A peer without a gateway id can only be reached directly.
        self.mode = Some(match &envelope.lgat_id {
            Some(remote) => check_same_lgat(&self.config.lgat_id, remote),
            None => RoutingMode::Direct,
        });
        self.remote_lgat = envelope.lgat_id.clone();
        out.push(Output::Deliver(Delivery::Description { kind, sdp }));
        for line in core::mem::take(&mut self.held) {
            self.on_candidate(&line, out);
        }
        self.send_credentials(out);
    }

    fn on_candidate(&mut self, line: &str, out: &mut Vec<Output>) {
        if self.mode == Some(RoutingMode::Direct) {
            self.counters.candidates_passed += 1;
            out.push(Output::Deliver(Delivery::Candidate(line.into())));
            return;
        }
        let candidate = match parse_candidate(line) {
            Ok(c) => c,
            Err(_) => {
                // Only IPv4 UDP candidates can be fronted by a gateway port.
                self.counters.candidates_unsupported += 1;
                return;
            }
        };
        let request_id = self.next_request;
        self.next_request += 1;
        let request = AllocateRequest {
            request_id,
            target_lgat: self.config.lgat_id.clone(),
            remote_lgat: self.remote_lgat.clone().unwrap_or_default(),
            candidate: CandidateAddress {
                ip: candidate.ip,
                port: candidate.port,
                protocol: Transport::Udp,
            },
            reply_channel: self.inbox(),
        };
        self.allocations.push(PendingAllocation {
            request_id,
            candidate,
            allocation: None,
            credentials_sent: false,
        });
        self.counters.allocate_requests += 1;
        out.push(Output::Route(self.envelope(EnvelopeKind::AllocateRequest, &request)));
    }

    fn on_allocate_reply(&mut self, envelope: &Envelope, out: &mut Vec<Output>) {
        let reply = match envelope.body_as::<AllocateReply>() {
            Ok(r) => r,
            Err(e) => return out.push(Output::Failed(format!("allocate-reply: {e}"))),
        };
        let Some(pending) = self.allocations.iter_mut().find(|p| p.request_id == reply.request_id) else {
            return;
        };
        if pending.allocation.is_some() {
            return;
        }
        match (reply.allocation, reply.error) {
            (Some(allocation), _) => {
                pending.allocation = Some(allocation);
                let line = rewrite_candidate(&pending.candidate, allocation.ip, allocation.port);
                self.counters.candidates_rewritten += 1;
                out.push(Output::Deliver(Delivery::Candidate(line)));
                self.send_credentials(out);
            }
            (None, error) => out.push(Output::Failed(format!(
                "allocation {} failed: {}",
                reply.request_id,
                error.unwrap_or_else(|| "no allocation".to_string())
            ))),
        }
    }

    /// Installs credential pairs for every allocation that has none yet, as
    /// soon as both sides' credentials are known.
    fn send_credentials(&mut self, out: &mut Vec<Output>) {
        let (Some(local), Some(remote)) = (&self.local, &self.remote) else {
            return;
        };
        let pairs = make_credential_pairs(local, remote).to_vec();
        let collide = credential_warning(local, remote).is_some();
        let mut ready: Vec<SessionId> = Vec::new();
        for pending in &mut self.allocations {
            if let (Some(allocation), false) = (&pending.allocation, pending.credentials_sent) {
                pending.credentials_sent = true;
                ready.push(allocation.session_id);
            }
        }
        for session_id in ready {
            if collide {
                self.counters.identical_ufrags += 1;
            }
            let body = SetCredentials {
                target_lgat: self.config.lgat_id.clone(),
                session_id,
                pairs: pairs.clone(),
                reply_channel: self.inbox(),
            };
            self.counters.credentials_sent += 1;
            out.push(Output::Route(self.envelope(EnvelopeKind::SetCredentials, &body)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stun::PasswordLookup;
    use core::net::Ipv4Addr;

    fn interceptor(peer: &str, lgat: &str) -> Interceptor {
        Interceptor::new(InterceptorConfig {
            peer_id: peer.into(),
            room: "room".into(),
            lgat_id: lgat.into(),
        })
    }

    fn creds(tag: &str) -> SessionCredentials {
        SessionCredentials::new(
            format!("ufrag{tag}"),
            format!("password{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}{tag}"),
        )
    }

    fn published(out: &[Output]) -> Vec<Envelope> {
        out.iter()
            .filter_map(|o| match o {
                Output::Publish(r) => Some(r.envelope.clone()),
                _ => None,
            })
            .collect()
    }

    fn routed(out: &[Output]) -> Vec<Envelope> {
        out.iter()
            .filter_map(|o| match o {
                Output::Route(e) => Some(e.clone()),
                _ => None,
            })
            .collect()
    }

    const CAND_A: &str = "candidate:1 1 udp 2122260223 192.168.1.10 40000 typ host generation 0";

    fn reply_for(request: &Envelope, port: u16) -> Envelope {
        let req: AllocateRequest = request.body_as().unwrap();
        Envelope::new(
            "lgat-B",
            EnvelopeKind::AllocateReply,
            &AllocateReply {
                request_id: req.request_id,
                allocation: Some(Allocation {
                    session_id: SessionId([port as u8; 16]),
                    ip: Ipv4Addr::new(10, 0, 2, 1),
                    port,
                }),
                error: None,
            },
        )
    }

    #[test]
    fn tunneled_answerer_flow() {
        let mut a = interceptor("peer-a", "lgat-A");
        let mut b = interceptor("peer-b", "lgat-B");
        let offer_sdp = create_description(&creds("A"), 1, DescriptionKind::Offer);
        let out = a.local_description(DescriptionKind::Offer, &offer_sdp);
        let offer = published(&out).remove(0);
        assert_eq!(offer.lgat_id.as_deref(), Some("lgat-A"));
        let cand = published(&a.local_candidate(CAND_A)).remove(0);

        // Candidate before the offer is held until the mode is known.
        assert!(b.on_envelope(&cand).is_empty());
        let out = b.on_envelope(&offer);
        assert_eq!(b.mode(), Some(RoutingMode::Tunneled));
        assert!(matches!(
            &out[0],
            Output::Deliver(Delivery::Description {
                kind: DescriptionKind::Offer,
                ..
            })
        ));
        let requests = routed(&out);
        assert_eq!(requests.len(), 1);
        let req: AllocateRequest = requests[0].body_as().unwrap();
        assert_eq!(
            (req.target_lgat.as_str(), req.remote_lgat.as_str()),
            ("lgat-B", "lgat-A")
        );
        assert_eq!(req.candidate.port, 40000);
        assert_eq!(req.reply_channel, "room/peer-b");

        let out = b.on_envelope(&reply_for(&requests[0], 50000));
        assert_eq!(
            out,
            vec![Output::Deliver(Delivery::Candidate(
                "candidate:1 1 udp 2122260223 10.0.2.1 50000 typ host generation 0".into()
            ))]
        );
        // Credentials go out once the answer exists.
        let answer_sdp = create_description(&creds("B"), 2, DescriptionKind::Answer);
        let out = b.local_description(DescriptionKind::Answer, &answer_sdp);
        let set = routed(&out);
        assert_eq!(set.len(), 1);
        let body: SetCredentials = set[0].body_as().unwrap();
        assert_eq!(body.session_id, SessionId([0x50; 16]));
        let map: crate::sdp::CredentialMap = body.pairs.into_iter().collect();
        assert_eq!(map.password("ufragA:ufragB"), Some(creds("A").pwd.as_str()));
        assert_eq!(map.password("ufragB:ufragA"), Some(creds("B").pwd.as_str()));
        assert_eq!(published(&out)[0].kind, EnvelopeKind::Answer);
        // Not sent twice.
        assert!(routed(&b.on_envelope(&offer))
            .iter()
            .all(|e| e.kind != EnvelopeKind::SetCredentials));
    }

    #[test]
    fn same_gateway_passes_candidates_through() {
        let mut a = interceptor("peer-a", "lgat-A");
        let mut b = interceptor("peer-b", "lgat-A");
        let offer = published(&a.local_description(
            DescriptionKind::Offer,
            &create_description(&creds("A"), 1, DescriptionKind::Offer),
        ))
        .remove(0);
        b.on_envelope(&offer);
        assert_eq!(b.mode(), Some(RoutingMode::Direct));
        let cand = published(&a.local_candidate(CAND_A)).remove(0);
        assert_eq!(
            b.on_envelope(&cand),
            vec![Output::Deliver(Delivery::Candidate(CAND_A.into()))]
        );
        assert_eq!(b.counters().allocate_requests, 0);
    }

    #[test]
    fn ignores_own_messages_and_reports_errors() {
        let mut a = interceptor("peer-a", "lgat-A");
        let own = published(&a.local_candidate(CAND_A)).remove(0);
        assert!(a.on_envelope(&own).is_empty());
        let ack = Envelope::new(
            "lgat-A",
            EnvelopeKind::SetCredentialsAck,
            &SetCredentialsAck {
                session_id: SessionId([1; 16]),
                error: Some("unknown-session".into()),
            },
        );
        assert!(matches!(&a.on_envelope(&ack)[0], Output::Failed(m) if m.contains("unknown-session")));
    }

    #[test]
    fn unsupported_candidates_are_skipped() {
        let mut b = interceptor("peer-b", "lgat-B");
        let offer = Envelope::new(
            "peer-a",
            EnvelopeKind::Offer,
            &Description {
                sdp: create_description(&creds("A"), 1, DescriptionKind::Offer),
            },
        )
        .with_lgat("lgat-A");
        b.on_envelope(&offer);
        let tcp = Envelope::new(
            "peer-a",
            EnvelopeKind::Candidate,
            &CandidateBody {
                candidate: "candidate:1 1 tcp 1 192.168.1.10 9 typ host tcptype active".into(),
            },
        );
        assert!(b.on_envelope(&tcp).is_empty());
        assert_eq!(b.counters().candidates_unsupported, 1);
    }

    #[test]
    fn identical_ufrags_are_counted() {
        let mut a = interceptor("peer-a", "lgat-A");
        let mut b = interceptor("peer-b", "lgat-B");
        let same = SessionCredentials::new("ufragX", creds("A").pwd);
        let offer = published(&a.local_description(
            DescriptionKind::Offer,
            &create_description(&same, 1, DescriptionKind::Offer),
        ))
        .remove(0);
        let cand = published(&a.local_candidate(CAND_A)).remove(0);
        b.on_envelope(&offer);
        let request = routed(&b.on_envelope(&cand)).remove(0);
        b.on_envelope(&reply_for(&request, 50000));
        let answer = SessionCredentials::new("ufragX", creds("B").pwd);
        b.local_description(
            DescriptionKind::Answer,
            &create_description(&answer, 2, DescriptionKind::Answer),
        );
        assert_eq!(b.counters().credentials_sent, 1);
        assert_eq!(b.counters().identical_ufrags, 1);
    }
}
