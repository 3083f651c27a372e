//! The parts of SDP the interceptor touches: ICE credentials and candidate
//! lines. Everything else in a session description is passed through as
//! opaque text.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stun::PasswordLookup;

const ICE_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
const UFRAG_LEN: usize = 8;
const PWD_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SdpError {
    #[error("description has no a=ice-ufrag line")]
    MissingUfrag,
    #[error("description has no a=ice-pwd line")]
    MissingPwd,
    #[error("malformed candidate: {0}")]
    MalformedCandidate(&'static str),
    #[error("unsupported candidate transport {0:?}")]
    UnsupportedTransport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionCredentials {
    pub ufrag: String,
    pub pwd: String,
}

impl SessionCredentials {
    pub fn new(ufrag: impl Into<String>, pwd: impl Into<String>) -> Self {
        SessionCredentials {
            ufrag: ufrag.into(),
            pwd: pwd.into(),
        }
    }

    /// Fresh credentials drawn from the ICE character set, above the ICE
    /// minimum lengths (4 and 22).
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        SessionCredentials {
            ufrag: random_ice_string(rng, UFRAG_LEN),
            pwd: random_ice_string(rng, PWD_LEN),
        }
    }
}

fn random_ice_string<R: RngCore + ?Sized>(rng: &mut R, len: usize) -> String {
    (0..len)
        .map(|_| ICE_CHARS[(rng.next_u32() % ICE_CHARS.len() as u32) as usize] as char)
        .collect()
}

/// Returns the first `a=ice-ufrag` and `a=ice-pwd` values in the text.
pub fn extract_credentials(sdp: &str) -> Result<SessionCredentials, SdpError> {
    let mut ufrag = None;
    let mut pwd = None;
    for line in sdp.lines() {
        let line = line.trim_end_matches('\r');
        if ufrag.is_none() {
            ufrag = line.strip_prefix("a=ice-ufrag:");
        }
        if pwd.is_none() {
            pwd = line.strip_prefix("a=ice-pwd:");
        }
    }
    let ufrag = ufrag.filter(|u| !u.is_empty()).ok_or(SdpError::MissingUfrag)?;
    let pwd = pwd.filter(|p| !p.is_empty()).ok_or(SdpError::MissingPwd)?;
    Ok(SessionCredentials::new(ufrag, pwd))
}

/// Smallest description a peer needs to hand over: one bundled audio section
/// carrying the ICE credentials. Lines end in CRLF.
pub fn minimal_description(credentials: &SessionCredentials, session_id: u64, setup: &str) -> String {
    format!(
        "v=0\r\n\
         o=- {session_id} 2 IN IP4 127.0.0.1\r\n\
         s=-\r\n\
         t=0 0\r\n\
         a=group:BUNDLE 0\r\n\
         m=audio 9 UDP/TLS/RTP/SAVPF 111\r\n\
         c=IN IP4 0.0.0.0\r\n\
         a=mid:0\r\n\
         a=ice-ufrag:{}\r\n\
         a=ice-pwd:{}\r\n\
         a=setup:{setup}\r\n\
         a=rtcp-mux\r\n\
         a=rtpmap:111 opus/48000/2\r\n",
        credentials.ufrag, credentials.pwd
    )
}

/// Username/password entry for one direction of connectivity checks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CredentialPair {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CredentialWarning {
    /// Both sides chose the same ufrag, so both usernames are identical.
    IdenticalUfrags,
}

/// `{local:remote, local.pwd}` and `{remote:local, remote.pwd}`.
pub fn make_credential_pairs(local: &SessionCredentials, remote: &SessionCredentials) -> [CredentialPair; 2] {
    [
        CredentialPair {
            username: format!("{}:{}", local.ufrag, remote.ufrag),
            password: local.pwd.clone(),
        },
        CredentialPair {
            username: format!("{}:{}", remote.ufrag, local.ufrag),
            password: remote.pwd.clone(),
        },
    ]
}

pub fn credential_warning(local: &SessionCredentials, remote: &SessionCredentials) -> Option<CredentialWarning> {
    (local.ufrag == remote.ufrag).then_some(CredentialWarning::IdenticalUfrags)
}

/// Username to password map installed in a gateway session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CredentialMap(BTreeMap<String, String>);

impl CredentialMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: CredentialPair) {
        self.0.insert(pair.username, pair.password);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = CredentialPair> + '_ {
        self.0.iter().map(|(u, p)| CredentialPair {
            username: u.clone(),
            password: p.clone(),
        })
    }
}

impl FromIterator<CredentialPair> for CredentialMap {
    fn from_iter<I: IntoIterator<Item = CredentialPair>>(iter: I) -> Self {
        let mut map = CredentialMap::new();
        for pair in iter {
            map.insert(pair);
        }
        map
    }
}

impl PasswordLookup for CredentialMap {
    fn password(&self, username: &str) -> Option<&str> {
        self.0.get(username).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateType {
    Host,
    Srflx,
    Relay,
}

impl CandidateType {
    fn as_str(self) -> &'static str {
        match self {
            CandidateType::Host => "host",
            CandidateType::Srflx => "srflx",
            CandidateType::Relay => "relay",
        }
    }
}

/// An ICE candidate attribute. Trailing extension tokens (`raddr`,
/// `generation`, ...) are kept verbatim so a rewrite changes nothing but the
/// address.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Candidate {
    pub foundation: String,
    pub component: u16,
    pub transport: Transport,
    pub priority: u32,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub kind: CandidateType,
    pub extensions: Vec<String>,
    pub attribute_prefix: bool,
}

impl Candidate {
    pub fn host(foundation: &str, priority: u32, ip: Ipv4Addr, port: u16) -> Self {
        Candidate {
            foundation: foundation.into(),
            component: 1,
            transport: Transport::Udp,
            priority,
            ip,
            port,
            kind: CandidateType::Host,
            extensions: Vec::new(),
            attribute_prefix: false,
        }
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.attribute_prefix {
            f.write_str("a=")?;
        }
        write!(
            f,
            "candidate:{} {} udp {} {} {} typ {}",
            self.foundation,
            self.component,
            self.priority,
            self.ip,
            self.port,
            self.kind.as_str()
        )?;
        for token in &self.extensions {
            write!(f, " {token}")?;
        }
        Ok(())
    }
}

pub fn parse_candidate(line: &str) -> Result<Candidate, SdpError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let (attribute_prefix, rest) = match line.strip_prefix("a=") {
        Some(rest) => (true, rest),
        None => (false, line),
    };
    let rest = rest
        .strip_prefix("candidate:")
        .ok_or(SdpError::MalformedCandidate("missing candidate: prefix"))?;

    let mut tokens = rest.split(' ').filter(|t| !t.is_empty());
    let mut next = |what| tokens.next().ok_or(SdpError::MalformedCandidate(what));

    let foundation = next("foundation")?.to_string();
    let component = next("component")?
        .parse::<u16>()
        .ok()
        .filter(|c| (1..=256).contains(c))
        .ok_or(SdpError::MalformedCandidate("component"))?;
    let transport = next("transport")?;
    if !transport.eq_ignore_ascii_case("udp") {
        return Err(SdpError::UnsupportedTransport(transport.to_string()));
    }
    let priority = next("priority")?
        .parse::<u32>()
        .map_err(|_| SdpError::MalformedCandidate("priority"))?;
    let ip = next("address")?
        .parse::<Ipv4Addr>()
        .map_err(|_| SdpError::MalformedCandidate("address"))?;
    let port = next("port")?
        .parse::<u16>()
        .ok()
        .filter(|p| *p != 0)
        .ok_or(SdpError::MalformedCandidate("port"))?;
    if next("typ")? != "typ" {
        return Err(SdpError::MalformedCandidate("typ"));
    }
    let kind = match next("candidate type")? {
        "host" => CandidateType::Host,
        "srflx" => CandidateType::Srflx,
        "relay" => CandidateType::Relay,
        _ => return Err(SdpError::MalformedCandidate("candidate type")),
    };
    let extensions = tokens.map(ToString::to_string).collect();

    Ok(Candidate {
        foundation,
        component,
        transport: Transport::Udp,
        priority,
        ip,
        port,
        kind,
        extensions,
        attribute_prefix,
    })
}

/// The candidate line with only the address replaced. Priority is kept as is.
pub fn rewrite_candidate(candidate: &Candidate, ip: Ipv4Addr, port: u16) -> String {
    Candidate {
        ip,
        port,
        ..candidate.clone()
    }
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extracts_session_level_credentials() {
        let sdp = "v=0\na=ice-ufrag:u1\na=ice-pwd:p1longenoughpassword22\nm=audio 9 RTP/AVP 0\n";
        assert_eq!(
            extract_credentials(sdp).unwrap(),
            SessionCredentials::new("u1", "p1longenoughpassword22")
        );
    }

    #[test]
    fn media_level_placement_and_crlf() {
        let creds = SessionCredentials::new("abcd", "0123456789012345678901");
        let media = minimal_description(&creds, 1, "actpass");
        let session = "v=0\r\na=ice-ufrag:abcd\r\na=ice-pwd:0123456789012345678901\r\nm=audio 9 RTP/AVP 0\r\n";
        assert_eq!(extract_credentials(&media).unwrap(), creds);
        assert_eq!(extract_credentials(session).unwrap(), creds);
    }

    #[test]
    fn first_media_section_wins() {
        let sdp = "m=audio 9 X 0\na=ice-ufrag:first\na=ice-pwd:firstpasswordfirstpassw\nm=video 9 X 0\na=ice-ufrag:second\na=ice-pwd:secondpasswordsecondpa\n";
        assert_eq!(extract_credentials(sdp).unwrap().ufrag, "first");
    }

    #[test]
    fn missing_fields() {
        assert_eq!(extract_credentials("a=ice-ufrag:u1\n"), Err(SdpError::MissingPwd));
        assert_eq!(extract_credentials("a=ice-pwd:p\n"), Err(SdpError::MissingUfrag));
    }

    #[test]
    fn generated_credentials_meet_minimums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = SessionCredentials::generate(&mut rng);
        let b = SessionCredentials::generate(&mut rng);
        assert!(a.ufrag.len() >= 4 && a.pwd.len() >= 22);
        assert_ne!(a, b);
    }

    #[test]
    fn credential_pairs() {
        let local = SessionCredentials::new("u1", "p1");
        let remote = SessionCredentials::new("u2", "p2");
        let [a, b] = make_credential_pairs(&local, &remote);
        assert_eq!((a.username.as_str(), a.password.as_str()), ("u1:u2", "p1"));
        assert_eq!((b.username.as_str(), b.password.as_str()), ("u2:u1", "p2"));
        let [c, d] = make_credential_pairs(&remote, &local);
        assert_eq!((c, d), (b, a));
        assert_eq!(credential_warning(&local, &remote), None);
        assert_eq!(
            credential_warning(&local, &SessionCredentials::new("u1", "zz")),
            Some(CredentialWarning::IdenticalUfrags)
        );
    }

    #[test]
    fn parses_host_candidate() {
        let c = parse_candidate("candidate:1 1 udp 2122260223 192.168.0.10 54321 typ host").unwrap();
        assert_eq!(c.ip, Ipv4Addr::new(192, 168, 0, 10));
        assert_eq!(c.port, 54321);
        assert_eq!(c.transport, Transport::Udp);
        assert_eq!(c.kind, CandidateType::Host);
        assert_eq!(c.priority, 2122260223);
        assert_eq!(c.foundation, "1");
    }

    #[test]
    fn rejects_tcp_and_port_zero() {
        assert_eq!(
            parse_candidate("candidate:1 1 tcp 2122260223 192.168.0.10 9 typ host tcptype active"),
            Err(SdpError::UnsupportedTransport("tcp".into()))
        );
        assert!(matches!(
            parse_candidate("candidate:1 1 udp 2122260223 192.168.0.10 0 typ host"),
            Err(SdpError::MalformedCandidate(_))
        ));
        assert!(parse_candidate("candidate:1 1 udp 1 192.168.0.10 5000 typ").is_err());
        assert!(parse_candidate("foo").is_err());
    }

    #[test]
    fn rewrite_keeps_everything_but_address() {
        let line =
            "a=candidate:842163049 1 udp 1677729535 192.168.0.10 54321 typ srflx raddr 10.0.0.1 rport 9 generation 0";
        let c = parse_candidate(line).unwrap();
        assert_eq!(rewrite_candidate(&c, c.ip, c.port), line);
        let out = rewrite_candidate(&c, Ipv4Addr::new(192, 168, 0, 20), 50000);
        assert_eq!(
            out,
            "a=candidate:842163049 1 udp 1677729535 192.168.0.20 50000 typ srflx raddr 10.0.0.1 rport 9 generation 0"
        );
        let back = parse_candidate(&out).unwrap();
        assert_eq!(back.priority, c.priority);
        assert_eq!(back.foundation, c.foundation);
    }
}
