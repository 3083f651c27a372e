//! Control-plane messages and the per-channel log behind the pubsub server.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::net::Ipv4Addr;
use core::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sdp::{CredentialPair, Transport};
use crate::session::SessionId;

/// Largest accepted envelope, in encoded bytes.
pub const MAX_PAYLOAD: usize = 256 * 1024;
pub const RETAIN_MESSAGES: usize = 1024;
pub const RETAIN_FOR: Duration = Duration::from_secs(600);

/// Channels with this prefix are written only by the routing path.
pub const RESERVED_PREFIX: char = '@';

pub fn lgat_channel(lgat_id: &str) -> String {
    format!("@lgat/{lgat_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignalError {
    #[error("channel id must not be empty")]
    EmptyChannel,
    #[error("payload of {size} bytes exceeds the {limit} byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("channel {0:?} is reserved for gateway routing")]
    ReservedChannel(String),
    #[error("unknown lgat {0:?}")]
    UnknownLgat(String),
    #[error("{0:?} envelopes cannot be routed to a gateway")]
    NotRoutable(EnvelopeKind),
    #[error("bad envelope body: {0}")]
    BadBody(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvelopeKind {
    Offer,
    Answer,
    Candidate,
    AllocateRequest,
    AllocateReply,
    SetCredentials,
    SetCredentialsAck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default)]
    pub seq: u64,
    pub sender: String,
    pub kind: EnvelopeKind,
    pub body: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lgat_id: Option<String>,
}

impl Envelope {
    pub fn new<B: Serialize>(sender: &str, kind: EnvelopeKind, body: &B) -> Self {
        Envelope {
            seq: 0,
            sender: sender.into(),
            kind,
            body: serde_json::to_value(body).expect("body serializes"),
            lgat_id: None,
        }
    }

    pub fn with_lgat(mut self, lgat_id: &str) -> Self {
        self.lgat_id = Some(lgat_id.into());
        self
    }

    pub fn body_as<B: DeserializeOwned>(&self) -> Result<B, SignalError> {
        serde_json::from_value(self.body.clone()).map_err(|e| SignalError::BadBody(format!("{e}")))
    }

    /// The gateway an allocate-request or set-credentials envelope is for.
    pub fn target_lgat(&self) -> Result<String, SignalError> {
        match self.kind {
            EnvelopeKind::AllocateRequest => Ok(self.body_as::<AllocateRequest>()?.target_lgat),
            EnvelopeKind::SetCredentials => Ok(self.body_as::<SetCredentials>()?.target_lgat),
            other => Err(SignalError::NotRoutable(other)),
        }
    }
}

/// An envelope addressed to a channel, used where the sender cannot publish
/// itself and the central gateway does it on its behalf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedEnvelope {
    pub channel: String,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub sdp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateBody {
    pub candidate: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAddress {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub protocol: Transport,
}

/// Sent by a peer to its own gateway: open a port fronting the remote
/// peer's candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocateRequest {
    pub request_id: u64,
    pub target_lgat: String,
    pub remote_lgat: String,
    pub candidate: CandidateAddress,
    pub reply_channel: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub session_id: SessionId,
    pub ip: Ipv4Addr,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocateReply {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Allocation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetCredentials {
    pub target_lgat: String,
    pub session_id: SessionId,
    pub pairs: Vec<CredentialPair>,
    pub reply_channel: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetCredentialsAck {
    pub session_id: SessionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Reply sent to the requester when a routed envelope names a gateway that
/// is not connected.
pub fn unknown_lgat_reply(envelope: &Envelope, responder: &str) -> Option<RoutedEnvelope> {
    let target = envelope.target_lgat().ok()?;
    let error = Some(format!("unknown-lgat: {target}"));
    let (channel, reply) = match envelope.kind {
        EnvelopeKind::AllocateRequest => {
            let request: AllocateRequest = envelope.body_as().ok()?;
            let body = AllocateReply {
                request_id: request.request_id,
                allocation: None,
                error,
            };
            (
                request.reply_channel,
                Envelope::new(responder, EnvelopeKind::AllocateReply, &body),
            )
        }
        EnvelopeKind::SetCredentials => {
            let request: SetCredentials = envelope.body_as().ok()?;
            let body = SetCredentialsAck {
                session_id: request.session_id,
                error,
            };
            (
                request.reply_channel,
                Envelope::new(responder, EnvelopeKind::SetCredentialsAck, &body),
            )
        }
        _ => return None,
    };
    Some(RoutedEnvelope {
        channel,
        envelope: reply,
    })
}

/// Checks a direct client publish against the channel rules and size cap.
pub fn validate_publish(channel: &str, encoded_len: usize) -> Result<(), SignalError> {
    if channel.is_empty() {
        return Err(SignalError::EmptyChannel);
    }
    if channel.starts_with(RESERVED_PREFIX) {
        return Err(SignalError::ReservedChannel(channel.into()));
    }
    check_size(encoded_len)
}

pub fn check_size(encoded_len: usize) -> Result<(), SignalError> {
    if encoded_len > MAX_PAYLOAD {
        return Err(SignalError::PayloadTooLarge {
            size: encoded_len,
            limit: MAX_PAYLOAD,
        });
    }
    Ok(())
}

/// Append-only envelope log for one channel.
#[derive(Debug, Default)]
pub struct ChannelLog {
    messages: VecDeque<(Duration, Envelope)>,
    last_seq: u64,
}

impl ChannelLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stamps the next sequence number and appends.
    pub fn append(&mut self, mut envelope: Envelope, now: Duration) -> u64 {
        self.last_seq += 1;
        envelope.seq = self.last_seq;
        self.messages.push_back((now, envelope));
        self.prune(now);
        self.last_seq
    }

    pub fn since(&self, seq: u64) -> Vec<Envelope> {
        // Sequence numbers are contiguous, so the first wanted index is direct.
        let first = self.messages.front().map_or(0, |(_, e)| e.seq);
        let skip = (seq + 1).saturating_sub(first) as usize;
        self.messages.iter().skip(skip).map(|(_, e)| e.clone()).collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn prune(&mut self, now: Duration) {
        while self.messages.len() > RETAIN_MESSAGES {
            self.messages.pop_front();
        }
        while let Some((at, _)) = self.messages.front() {
            if now.saturating_sub(*at) > RETAIN_FOR {
                self.messages.pop_front();
            } else {
                break;
            }
        }
    }
}
