//! Framing and leases for the single-port tunnel between a local gateway and
//! the central gateway.
//!
//! Wire layout of a frame:
//!
//! ```text
//! "RGW1" | type (1) | session id (16) | payload length (2, BE) | payload
//! ```
//!
//! With checksums enabled, data frames carry a CRC-32 of the payload as a
//! four byte trailer counted in the payload length.

use alloc::string::String;
use alloc::vec::Vec;
use core::net::SocketAddrV4;
use core::time::Duration;

use hashbrown::HashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::SessionId;
use crate::signal::RoutedEnvelope;

pub const MAGIC: [u8; 4] = *b"RGW1";
pub const HEADER_LEN: usize = 4 + 1 + 16 + 2;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_LEASE_TTL: Duration = Duration::from_secs(60);
pub const RENEW_INTERVAL: Duration = Duration::from_secs(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x01,
    LeaseOpen = 0x02,
    LeaseOpenAck = 0x03,
    LeaseRenew = 0x04,
    LeaseClose = 0x05,
    Data = 0x06,
    Error = 0x07,
    /// Signaling envelope relayed between the central and a local gateway.
    Control = 0x08,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Result<Self, FrameError> {
        Ok(match b {
            0x01 => FrameType::Hello,
            0x02 => FrameType::LeaseOpen,
            0x03 => FrameType::LeaseOpenAck,
            0x04 => FrameType::LeaseRenew,
            0x05 => FrameType::LeaseClose,
            0x06 => FrameType::Data,
            0x07 => FrameType::Error,
            0x08 => FrameType::Control,
            other => return Err(FrameError::UnknownFrameType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes does not fit a frame")]
    OversizePayload(usize),
    #[error("stream ended mid-frame")]
    Truncated,
    #[error("bad frame magic")]
    BadMagic,
    #[error("unknown frame type {0:#04x}")]
    UnknownFrameType(u8),
    #[error("data frame checksum mismatch")]
    ChecksumMismatch,
    #[error("bad frame payload")]
    BadPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelFrame {
    pub frame_type: FrameType,
    pub session_id: SessionId,
    pub payload: Vec<u8>,
}

impl TunnelFrame {
    pub fn new(frame_type: FrameType, session_id: SessionId, payload: Vec<u8>) -> Self {
        TunnelFrame {
            frame_type,
            session_id,
            payload,
        }
    }

    pub fn data(session_id: SessionId, payload: Vec<u8>) -> Self {
        Self::new(FrameType::Data, session_id, payload)
    }

    pub fn hello(lgat_id: &str) -> Self {
        Self::new(FrameType::Hello, SessionId::NIL, lgat_id.as_bytes().to_vec())
    }

    pub fn control(routed: &RoutedEnvelope) -> Self {
        Self::new(
            FrameType::Control,
            SessionId::NIL,
            serde_json::to_vec(routed).expect("envelope serializes"),
        )
    }

    pub fn error(session_id: SessionId, code: TunnelErrorCode) -> Self {
        Self::new(
            FrameType::Error,
            session_id,
            serde_json::to_vec(&TunnelErrorBody { code }).expect("error serializes"),
        )
    }

    pub fn lease(frame_type: FrameType, session_id: SessionId, payload: &LeaseAnnouncement) -> Self {
        Self::new(
            frame_type,
            session_id,
            serde_json::to_vec(payload).expect("announcement serializes"),
        )
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self) -> Result<T, FrameError> {
        serde_json::from_slice(&self.payload).map_err(|_| FrameError::BadPayload)
    }

    pub fn hello_id(&self) -> Result<&str, FrameError> {
        core::str::from_utf8(&self.payload).map_err(|_| FrameError::BadPayload)
    }
}

/// Route description carried in lease-open frames. A local gateway sends it
/// for its own sessions; the central gateway forwards it to `peer_lgat` so
/// the far end knows where traffic for the session id belongs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaseAnnouncement {
    pub owner_lgat: String,
    pub peer_lgat: String,
    pub peer_addr: SocketAddrV4,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<RoutedEnvelope>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TunnelErrorCode {
    UnknownSession,
    LeaseExpired,
    DuplicateSession,
    UnknownLgat,
    NotRegistered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunnelErrorBody {
    pub code: TunnelErrorCode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Codec {
    pub checksum: bool,
}

impl Codec {
    pub fn with_checksum() -> Self {
        Codec { checksum: true }
    }

    fn trailer(&self, frame_type: FrameType) -> usize {
        if self.checksum && frame_type == FrameType::Data {
            4
        } else {
            0
        }
    }

    pub fn encode(&self, frame: &TunnelFrame) -> Result<Vec<u8>, FrameError> {
        let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len() + 4);
        self.encode_into(frame, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, frame: &TunnelFrame, out: &mut Vec<u8>) -> Result<(), FrameError> {
        let len = frame.payload.len() + self.trailer(frame.frame_type);
        if len > MAX_PAYLOAD {
            return Err(FrameError::OversizePayload(frame.payload.len()));
        }
        out.extend_from_slice(&MAGIC);
        out.push(frame.frame_type as u8);
        out.extend_from_slice(&frame.session_id.0);
        out.extend_from_slice(&(len as u16).to_be_bytes());
        out.extend_from_slice(&frame.payload);
        if self.trailer(frame.frame_type) > 0 {
            out.extend_from_slice(&crc32fast::hash(&frame.payload).to_be_bytes());
        }
        Ok(())
    }

    /// Reads one frame from the front of `input`, returning it with the number
    /// of bytes consumed. The rest of `input` is untouched.
    pub fn decode(&self, input: &[u8]) -> Result<(TunnelFrame, usize), FrameError> {
        if input.len() < HEADER_LEN {
            if !MAGIC.starts_with(&input[..input.len().min(4)]) {
                return Err(FrameError::BadMagic);
            }
            return Err(FrameError::Truncated);
        }
        if input[..4] != MAGIC {
            return Err(FrameError::BadMagic);
        }
        let frame_type = FrameType::from_byte(input[4])?;
        let mut id = [0u8; 16];
        id.copy_from_slice(&input[5..21]);
        let len = usize::from(u16::from_be_bytes([input[21], input[22]]));
        let end = HEADER_LEN + len;
        if input.len() < end {
            return Err(FrameError::Truncated);
        }
        let body = &input[HEADER_LEN..end];
        let payload = if self.trailer(frame_type) > 0 {
            if body.len() < 4 {
                return Err(FrameError::ChecksumMismatch);
            }
            let (payload, crc) = body.split_at(body.len() - 4);
            if crc32fast::hash(payload).to_be_bytes() != crc {
                return Err(FrameError::ChecksumMismatch);
            }
            payload
        } else {
            body
        };
        Ok((TunnelFrame::new(frame_type, SessionId(id), payload.to_vec()), end))
    }
}

/// Accumulates stream bytes and yields complete frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    codec: Codec,
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new(codec: Codec) -> Self {
        FrameDecoder { codec, buf: Vec::new() }
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<TunnelFrame>, FrameError> {
        match self.codec.decode(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Err(FrameError::Truncated) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Bytes received but not yet consumed as a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lease {
    pub session_id: SessionId,
    pub created_at: Duration,
    pub ttl: Duration,
    pub last_renewed: Duration,
}

impl Lease {
    pub fn expires_at(&self) -> Duration {
        self.last_renewed + self.ttl
    }

    pub fn is_active(&self, now: Duration) -> bool {
        now < self.expires_at()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LeaseError {
    #[error("session {0} already has a lease")]
    DuplicateSession(SessionId),
    #[error("no active lease for session {0}")]
    NoSuchLease(SessionId),
}

#[derive(Debug)]
pub struct LeaseTable {
    ttl: Duration,
    leases: HashMap<SessionId, Lease>,
}

impl LeaseTable {
    pub fn new(ttl: Duration) -> Self {
        assert!(ttl > Duration::ZERO, "lease ttl must be positive");
        LeaseTable {
            ttl,
            leases: HashMap::new(),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// An expired lease under the same id is replaced.
    pub fn open(&mut self, session_id: SessionId, now: Duration) -> Result<Lease, LeaseError> {
        if self.is_active(&session_id, now) {
            return Err(LeaseError::DuplicateSession(session_id));
        }
        let lease = Lease {
            session_id,
            created_at: now,
            ttl: self.ttl,
            last_renewed: now,
        };
        self.leases.insert(session_id, lease);
        Ok(lease)
    }

    pub fn renew(&mut self, session_id: &SessionId, now: Duration) -> Result<(), LeaseError> {
        match self.leases.get_mut(session_id) {
            Some(lease) if lease.is_active(now) => {
                lease.last_renewed = now;
                Ok(())
            }
            _ => Err(LeaseError::NoSuchLease(*session_id)),
        }
    }

    pub fn close(&mut self, session_id: &SessionId) -> Option<Lease> {
        self.leases.remove(session_id)
    }

    pub fn get(&self, session_id: &SessionId) -> Option<&Lease> {
        self.leases.get(session_id)
    }

    pub fn is_active(&self, session_id: &SessionId, now: Duration) -> bool {
        self.leases.get(session_id).is_some_and(|l| l.is_active(now))
    }

    /// Removes and returns every lease that has run out.
    pub fn expire(&mut self, now: Duration) -> Vec<SessionId> {
        let expired: Vec<SessionId> = self
            .leases
            .values()
            .filter(|l| !l.is_active(now))
            .map(|l| l.session_id)
            .collect();
        for id in &expired {
            self.leases.remove(id);
        }
        expired
    }

    pub fn len(&self) -> usize {
        self.leases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leases.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SessionId> {
        self.leases.keys()
    }
}
