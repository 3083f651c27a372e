//! STUN binding messages with short-term credentials.
//!
//! Only the binding method is understood. Besides the codec this module holds
//! the two message builders the local gateway needs when it answers a browser
//! on behalf of the remote peer: the integrity-protected success response and
//! the mirrored request carrying the flipped username.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::net::{Ipv4Addr, SocketAddrV4};

use hmac::{Hmac, Mac};
use rand_core::RngCore;
use sha1::Sha1;
use thiserror::Error;

pub const MAGIC_COOKIE: u32 = 0x2112_A442;
pub const HEADER_LEN: usize = 20;

const FINGERPRINT_XOR: u32 = 0x5354_554E;
const INTEGRITY_LEN: usize = 20;
const INTEGRITY_ATTR_LEN: usize = 4 + INTEGRITY_LEN;
const FINGERPRINT_ATTR_LEN: usize = 8;

/// Host candidate priority for component 1: `2^24 * 126 + 2^8 * 65535 + 255`.
pub const DEFAULT_PRIORITY: u32 = (1 << 24) * 126 + (1 << 8) * 65535 + 255;

/// Attribute type codes.
pub mod attr {
    pub const USERNAME: u16 = 0x0006;
    pub const MESSAGE_INTEGRITY: u16 = 0x0008;
    pub const ERROR_CODE: u16 = 0x0009;
    pub const XOR_MAPPED_ADDRESS: u16 = 0x0020;
    pub const PRIORITY: u16 = 0x0024;
    pub const USE_CANDIDATE: u16 = 0x0025;
    pub const SOFTWARE: u16 = 0x8022;
    pub const FINGERPRINT: u16 = 0x8028;
    pub const ICE_CONTROLLED: u16 = 0x8029;
    pub const ICE_CONTROLLING: u16 = 0x802A;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StunError {
    #[error("datagram is not a STUN message")]
    NotStun,
    #[error("unsupported STUN message type {0:#06x}")]
    UnsupportedMessageType(u16),
    #[error("attribute {0:#06x} is malformed")]
    MalformedAttribute(u16),
    #[error("attribute padding runs past the end of the message")]
    BadPadding,
    #[error("attribute {0:#06x} value exceeds 65535 bytes")]
    AttributeTooLong(u16),
    #[error("encoded message exceeds 65535 bytes")]
    MessageTooLong,
    #[error("message has no MESSAGE-INTEGRITY attribute")]
    MissingIntegrity,
    #[error("message has no USERNAME attribute")]
    MissingUsername,
    #[error("expected a binding request")]
    NotARequest,
    #[error("username {0:?} is not of the form a:b")]
    InvalidUsername(String),
    #[error("no password known for flipped username {0:?}")]
    UnknownFlippedUsername(String),
    #[error("short-term key must not be empty")]
    EmptyKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageClass {
    BindingRequest,
    BindingSuccessResponse,
    BindingErrorResponse,
}

impl MessageClass {
    pub fn code(self) -> u16 {
        match self {
            MessageClass::BindingRequest => 0x0001,
            MessageClass::BindingSuccessResponse => 0x0101,
            MessageClass::BindingErrorResponse => 0x0111,
        }
    }

    pub fn from_code(code: u16) -> Result<Self, StunError> {
        match code {
            0x0001 => Ok(MessageClass::BindingRequest),
            0x0101 => Ok(MessageClass::BindingSuccessResponse),
            0x0111 => Ok(MessageClass::BindingErrorResponse),
            other => Err(StunError::UnsupportedMessageType(other)),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransactionId(pub [u8; 12]);

impl TransactionId {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut id = [0u8; 12];
        rng.fill_bytes(&mut id);
        TransactionId(id)
    }
}

impl fmt::Debug for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TransactionId(")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        f.write_str(")")
    }
}

/// XOR-MAPPED-ADDRESS as it appears on the wire, i.e. still obfuscated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XorMappedAddress {
    pub port: u16,
    pub addr: Ipv4Addr,
}

impl XorMappedAddress {
    pub fn encode(address: SocketAddrV4, _tid: &TransactionId) -> Self {
        // IPv4 only mixes in the cookie; the transaction id is used for IPv6.
        XorMappedAddress {
            port: address.port() ^ (MAGIC_COOKIE >> 16) as u16,
            addr: Ipv4Addr::from(u32::from(*address.ip()) ^ MAGIC_COOKIE),
        }
    }

    pub fn decode(&self, tid: &TransactionId) -> SocketAddrV4 {
        let plain = XorMappedAddress::encode(SocketAddrV4::new(self.addr, self.port), tid);
        SocketAddrV4::new(plain.addr, plain.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attribute {
    Username(String),
    MessageIntegrity([u8; INTEGRITY_LEN]),
    Fingerprint(u32),
    XorMappedAddress(XorMappedAddress),
    Priority(u32),
    IceControlling(u64),
    IceControlled(u64),
    UseCandidate,
    ErrorCode { code: u16, reason: String },
    Unknown { code: u16, value: Vec<u8> },
}

impl Attribute {
    pub fn code(&self) -> u16 {
        match self {
            Attribute::Username(_) => attr::USERNAME,
            Attribute::MessageIntegrity(_) => attr::MESSAGE_INTEGRITY,
            Attribute::Fingerprint(_) => attr::FINGERPRINT,
            Attribute::XorMappedAddress(_) => attr::XOR_MAPPED_ADDRESS,
            Attribute::Priority(_) => attr::PRIORITY,
            Attribute::IceControlling(_) => attr::ICE_CONTROLLING,
            Attribute::IceControlled(_) => attr::ICE_CONTROLLED,
            Attribute::UseCandidate => attr::USE_CANDIDATE,
            Attribute::ErrorCode { .. } => attr::ERROR_CODE,
            Attribute::Unknown { code, .. } => *code,
        }
    }

    fn is_trailer(&self) -> bool {
        matches!(self, Attribute::MessageIntegrity(_) | Attribute::Fingerprint(_))
    }

    fn write_value(&self, out: &mut Vec<u8>) {
        match self {
            Attribute::Username(name) => out.extend_from_slice(name.as_bytes()),
            Attribute::MessageIntegrity(mac) => out.extend_from_slice(mac),
            Attribute::Fingerprint(crc) => out.extend_from_slice(&crc.to_be_bytes()),
            Attribute::XorMappedAddress(xa) => {
                out.extend_from_slice(&[0x00, 0x01]);
                out.extend_from_slice(&xa.port.to_be_bytes());
                out.extend_from_slice(&xa.addr.octets());
            }
            Attribute::Priority(p) => out.extend_from_slice(&p.to_be_bytes()),
            Attribute::IceControlling(tb) | Attribute::IceControlled(tb) => out.extend_from_slice(&tb.to_be_bytes()),
            Attribute::UseCandidate => {}
            Attribute::ErrorCode { code, reason } => {
                out.extend_from_slice(&[0, 0, (code / 100) as u8 & 0x07, (code % 100) as u8]);
                out.extend_from_slice(reason.as_bytes());
            }
            Attribute::Unknown { value, .. } => out.extend_from_slice(value),
        }
    }

    fn parse(code: u16, value: &[u8]) -> Result<Self, StunError> {
        let malformed = || StunError::MalformedAttribute(code);
        let fixed = |len: usize| {
            if value.len() == len {
                Ok(())
            } else {
                Err(malformed())
            }
        };
        Ok(match code {
            attr::USERNAME => Attribute::Username(core::str::from_utf8(value).map_err(|_| malformed())?.into()),
            attr::MESSAGE_INTEGRITY => {
                fixed(INTEGRITY_LEN)?;
                let mut mac = [0u8; INTEGRITY_LEN];
                mac.copy_from_slice(value);
                Attribute::MessageIntegrity(mac)
            }
            attr::FINGERPRINT => {
                fixed(4)?;
                Attribute::Fingerprint(be_u32(value))
            }
            attr::XOR_MAPPED_ADDRESS => {
                if value.len() < 4 {
                    return Err(malformed());
                }
                match value[1] {
                    0x01 => {
                        fixed(8)?;
                        Attribute::XorMappedAddress(XorMappedAddress {
                            port: u16::from_be_bytes([value[2], value[3]]),
                            addr: Ipv4Addr::new(value[4], value[5], value[6], value[7]),
                        })
                    }
                    // IPv6 is out of scope; keep it opaque.
                    0x02 => Attribute::Unknown {
                        code,
                        value: value.to_vec(),
                    },
                    _ => return Err(malformed()),
                }
            }
            attr::PRIORITY => {
                fixed(4)?;
                Attribute::Priority(be_u32(value))
            }
            attr::ICE_CONTROLLING => {
                fixed(8)?;
                Attribute::IceControlling(be_u64(value))
            }
            attr::ICE_CONTROLLED => {
                fixed(8)?;
                Attribute::IceControlled(be_u64(value))
            }
            attr::USE_CANDIDATE => {
                fixed(0)?;
                Attribute::UseCandidate
            }
            attr::ERROR_CODE => {
                if value.len() < 4 {
                    return Err(malformed());
                }
                let code = u16::from(value[2] & 0x07) * 100 + u16::from(value[3]);
                let reason = core::str::from_utf8(&value[4..]).map_err(|_| malformed())?;
                Attribute::ErrorCode {
                    code,
                    reason: reason.into(),
                }
            }
            _ => Attribute::Unknown {
                code,
                value: value.to_vec(),
            },
        })
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u64(b: &[u8]) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[..8]);
    u64::from_be_bytes(a)
}

fn padded(len: usize) -> usize {
    (len + 3) & !3
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StunMessage {
    pub class: MessageClass,
    pub transaction_id: TransactionId,
    pub attributes: Vec<Attribute>,
}

impl StunMessage {
    pub fn new(class: MessageClass, transaction_id: TransactionId) -> Self {
        StunMessage {
            class,
            transaction_id,
            attributes: Vec::new(),
        }
    }

    pub fn with(mut self, attribute: Attribute) -> Self {
        self.attributes.push(attribute);
        self
    }

    pub fn username(&self) -> Option<&str> {
        self.attributes.iter().find_map(|a| match a {
            Attribute::Username(u) => Some(u.as_str()),
            _ => None,
        })
    }

    pub fn priority(&self) -> Option<u32> {
        self.attributes.iter().find_map(|a| match a {
            Attribute::Priority(p) => Some(*p),
            _ => None,
        })
    }

    pub fn mapped_address(&self) -> Option<SocketAddrV4> {
        self.attributes.iter().find_map(|a| match a {
            Attribute::XorMappedAddress(xa) => Some(xa.decode(&self.transaction_id)),
            _ => None,
        })
    }

    pub fn has(&self, code: u16) -> bool {
        self.attributes.iter().any(|a| a.code() == code)
    }

    /// The message with MESSAGE-INTEGRITY and FINGERPRINT removed.
    pub fn without_trailers(&self) -> StunMessage {
        StunMessage {
            class: self.class,
            transaction_id: self.transaction_id,
            attributes: self.attributes.iter().filter(|a| !a.is_trailer()).cloned().collect(),
        }
    }
}

/// Password bytes for short-term credential integrity.
#[derive(Clone, PartialEq, Eq)]
pub struct ShortTermKey(Vec<u8>);

impl ShortTermKey {
    pub fn new(password: impl AsRef<[u8]>) -> Result<Self, StunError> {
        let password = password.as_ref();
        if password.is_empty() {
            return Err(StunError::EmptyKey);
        }
        Ok(ShortTermKey(password.to_vec()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for ShortTermKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ShortTermKey(..)")
    }
}

/// Cheap header check used to split STUN from media on a shared port.
///
/// Looks only at the fixed header: length, the two leading zero bits, the
/// magic cookie and the declared body length.
#[inline]
pub fn peek_is_stun(datagram: &[u8]) -> bool {
    datagram.len() >= HEADER_LEN
        && datagram[0] & 0xC0 == 0
        && datagram[4..8] == MAGIC_COOKIE.to_be_bytes()
        && usize::from(u16::from_be_bytes([datagram[2], datagram[3]])) == datagram.len() - HEADER_LEN
}

pub fn decode(datagram: &[u8]) -> Result<StunMessage, StunError> {
    if !peek_is_stun(datagram) {
        return Err(StunError::NotStun);
    }
    let class = MessageClass::from_code(u16::from_be_bytes([datagram[0], datagram[1]]))?;
    let mut tid = [0u8; 12];
    tid.copy_from_slice(&datagram[8..20]);

    let mut attributes = Vec::new();
    for raw in RawAttributes::new(datagram) {
        let (code, range) = raw?;
        attributes.push(Attribute::parse(code, &datagram[range])?);
    }
    Ok(StunMessage {
        class,
        transaction_id: TransactionId(tid),
        attributes,
    })
}

/// Attribute code, value range and the offset of its header.
type RawAttribute = (u16, core::ops::Range<usize>, usize);

/// Walks the attribute TLVs of a datagram that already passed `peek_is_stun`,
/// yielding each attribute's type, value range, and header offset.
struct RawAttributes<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> RawAttributes<'a> {
    fn new(data: &'a [u8]) -> Self {
        RawAttributes {
            data,
            offset: HEADER_LEN,
        }
    }

    fn next_with_offset(&mut self) -> Option<Result<RawAttribute, StunError>> {
        let remaining = self.data.len() - self.offset;
        if remaining == 0 {
            return None;
        }
        if remaining < 4 {
            self.offset = self.data.len();
            return Some(Err(StunError::BadPadding));
        }
        let at = self.offset;
        let code = u16::from_be_bytes([self.data[at], self.data[at + 1]]);
        let len = usize::from(u16::from_be_bytes([self.data[at + 2], self.data[at + 3]]));
        let start = at + 4;
        if start + len > self.data.len() {
            self.offset = self.data.len();
            return Some(Err(StunError::MalformedAttribute(code)));
        }
        if start + padded(len) > self.data.len() {
            self.offset = self.data.len();
            return Some(Err(StunError::BadPadding));
        }
        self.offset = start + padded(len);
        Some(Ok((code, start..start + len, at)))
    }
}

impl Iterator for RawAttributes<'_> {
    type Item = Result<(u16, core::ops::Range<usize>), StunError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_with_offset().map(|r| r.map(|(code, range, _)| (code, range)))
    }
}

/// Message encoder. The padding byte is configurable because published test
/// vectors pad with spaces and the integrity covers padding bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct Encoder {
    pub padding: u8,
}

impl Encoder {
    pub fn with_padding(padding: u8) -> Self {
        Encoder { padding }
    }

    /// Encodes `message`; with a key, MESSAGE-INTEGRITY and FINGERPRINT are
    /// appended. Integrity or fingerprint attributes already on the message
    /// are ignored.
    pub fn encode(&self, message: &StunMessage, key: Option<&ShortTermKey>) -> Result<Vec<u8>, StunError> {
        let mut out = Vec::with_capacity(128);
        out.extend_from_slice(&message.class.code().to_be_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&MAGIC_COOKIE.to_be_bytes());
        out.extend_from_slice(&message.transaction_id.0);

        let mut value = Vec::new();
        for attribute in message.attributes.iter().filter(|a| !a.is_trailer()) {
            value.clear();
            attribute.write_value(&mut value);
            let len = u16::try_from(value.len()).map_err(|_| StunError::AttributeTooLong(attribute.code()))?;
            out.extend_from_slice(&attribute.code().to_be_bytes());
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&value);
            out.resize(out.len() + padded(value.len()) - value.len(), self.padding);
        }

        let trailer = if key.is_some() {
            INTEGRITY_ATTR_LEN + FINGERPRINT_ATTR_LEN
        } else {
            0
        };
        if out.len() - HEADER_LEN + trailer > usize::from(u16::MAX) {
            return Err(StunError::MessageTooLong);
        }

        if let Some(key) = key {
            let body_len = out.len() - HEADER_LEN + INTEGRITY_ATTR_LEN;
            let mac = integrity(key, &out, body_len);
            out.extend_from_slice(&attr::MESSAGE_INTEGRITY.to_be_bytes());
            out.extend_from_slice(&(INTEGRITY_LEN as u16).to_be_bytes());
            out.extend_from_slice(&mac);

            let body_len = out.len() - HEADER_LEN + FINGERPRINT_ATTR_LEN;
            set_length(&mut out, body_len);
            let crc = fingerprint(&out);
            out.extend_from_slice(&attr::FINGERPRINT.to_be_bytes());
            out.extend_from_slice(&4u16.to_be_bytes());
            out.extend_from_slice(&crc.to_be_bytes());
        } else {
            let body_len = out.len() - HEADER_LEN;
            set_length(&mut out, body_len);
        }
        Ok(out)
    }
}

pub fn encode(message: &StunMessage, key: Option<&ShortTermKey>) -> Result<Vec<u8>, StunError> {
    Encoder::default().encode(message, key)
}

fn set_length(buf: &mut [u8], len: usize) {
    buf[2..4].copy_from_slice(&(len as u16).to_be_bytes());
}

/// HMAC-SHA1 over `prefix` with the header length field replaced by `length`.
fn integrity(key: &ShortTermKey, prefix: &[u8], length: usize) -> [u8; INTEGRITY_LEN] {
    let mut mac = hmac_for(key);
    mac.update(&prefix[..2]);
    mac.update(&(length as u16).to_be_bytes());
    mac.update(&prefix[4..]);
    mac.finalize().into_bytes().into()
}

fn hmac_for(key: &ShortTermKey) -> Hmac<Sha1> {
    // HMAC accepts keys of any length.
    Hmac::<Sha1>::new_from_slice(key.as_bytes()).expect("hmac key")
}

fn fingerprint(prefix: &[u8]) -> u32 {
    crc32fast::hash(prefix) ^ FINGERPRINT_XOR
}

/// Checks MESSAGE-INTEGRITY against `key`, and FINGERPRINT too when present.
pub fn verify_integrity(datagram: &[u8], key: &ShortTermKey) -> Result<bool, StunError> {
    if !peek_is_stun(datagram) {
        return Err(StunError::NotStun);
    }
    let mut integrity_at = None;
    let mut fingerprint_at = None;
    let mut walker = RawAttributes::new(datagram);
    while let Some(raw) = walker.next_with_offset() {
        let (code, range, at) = raw?;
        match code {
            attr::MESSAGE_INTEGRITY if integrity_at.is_none() => {
                if range.len() != INTEGRITY_LEN {
                    return Err(StunError::MalformedAttribute(code));
                }
                integrity_at = Some(at);
            }
            attr::FINGERPRINT if fingerprint_at.is_none() => {
                if range.len() != 4 {
                    return Err(StunError::MalformedAttribute(code));
                }
                fingerprint_at = Some(at);
            }
            _ => {}
        }
    }
    let at = integrity_at.ok_or(StunError::MissingIntegrity)?;

    let mut mac = hmac_for(key);
    mac.update(&datagram[..2]);
    mac.update(&((at - HEADER_LEN + INTEGRITY_ATTR_LEN) as u16).to_be_bytes());
    mac.update(&datagram[4..at]);
    if mac.verify_slice(&datagram[at + 4..at + 4 + INTEGRITY_LEN]).is_err() {
        return Ok(false);
    }

    if let Some(fp) = fingerprint_at {
        if fingerprint(&datagram[..fp]) != be_u32(&datagram[fp + 4..fp + 8]) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn xor_mapped_address(address: SocketAddrV4, transaction_id: &TransactionId) -> Attribute {
    Attribute::XorMappedAddress(XorMappedAddress::encode(address, transaction_id))
}

/// Username-to-password lookup used to pick the signing key.
pub trait PasswordLookup {
    fn password(&self, username: &str) -> Option<&str>;
}

impl PasswordLookup for BTreeMap<String, String> {
    fn password(&self, username: &str) -> Option<&str> {
        self.get(username).map(String::as_str)
    }
}

/// A message together with the key that will sign it on encode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedMessage {
    pub message: StunMessage,
    pub key: ShortTermKey,
}

impl KeyedMessage {
    pub fn encode(&self) -> Result<Vec<u8>, StunError> {
        encode(&self.message, Some(&self.key))
    }
}

/// Swaps the two halves of an `a:b` username.
pub fn flip_username(username: &str) -> Result<String, StunError> {
    match username.split_once(':') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(':') => {
            let mut flipped = String::with_capacity(username.len());
            flipped.push_str(b);
            flipped.push(':');
            flipped.push_str(a);
            Ok(flipped)
        }
        _ => Err(StunError::InvalidUsername(username.into())),
    }
}

pub fn build_binding_response(
    request: &StunMessage,
    sender: SocketAddrV4,
    key: &ShortTermKey,
) -> Result<KeyedMessage, StunError> {
    if request.class != MessageClass::BindingRequest {
        return Err(StunError::NotARequest);
    }
    request.username().ok_or(StunError::MissingUsername)?;
    let tid = request.transaction_id;
    let message = StunMessage::new(MessageClass::BindingSuccessResponse, tid).with(xor_mapped_address(sender, &tid));
    Ok(KeyedMessage {
        message,
        key: key.clone(),
    })
}

/// Synthesizes the request the remote browser would have sent: flipped
/// username, signed with the flipped username's password, ICE attributes
/// copied from `request` or defaulted, plus an empty USE-CANDIDATE.
pub fn build_mirrored_request<L, R>(request: &StunMessage, lookup: &L, rng: &mut R) -> Result<KeyedMessage, StunError>
where
    L: PasswordLookup + ?Sized,
    R: RngCore + ?Sized,
{
    if request.class != MessageClass::BindingRequest {
        return Err(StunError::NotARequest);
    }
    let username = request.username().ok_or(StunError::MissingUsername)?;
    let flipped = flip_username(username)?;
    let password = lookup
        .password(&flipped)
        .ok_or_else(|| StunError::UnknownFlippedUsername(flipped.clone()))?;
    let key = ShortTermKey::new(password)?;

    let role = request.attributes.iter().find_map(|a| match a {
        Attribute::IceControlling(_) | Attribute::IceControlled(_) => Some(a.clone()),
        _ => None,
    });
    let priority = request.priority().unwrap_or(DEFAULT_PRIORITY);
    let tid = TransactionId::random(rng);
    let role = role.unwrap_or_else(|| Attribute::IceControlling(rng.next_u64()));

    let message = StunMessage::new(MessageClass::BindingRequest, tid)
        .with(Attribute::Username(flipped))
        .with(Attribute::Priority(priority))
        .with(role)
        .with(Attribute::UseCandidate);
    Ok(KeyedMessage { message, key })
}
