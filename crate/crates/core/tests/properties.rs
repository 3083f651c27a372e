use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use proptest::prelude::*;
use rtcgate_core::cgat::{ConnId, Hub, HubAction};
use rtcgate_core::peersim::media_datagram;
use rtcgate_core::sdp::{
    extract_credentials, minimal_description, parse_candidate, rewrite_candidate, SessionCredentials,
};
use rtcgate_core::session::SessionId;
use rtcgate_core::stun::{
    self, attr, flip_username, verify_integrity, Attribute, MessageClass, ShortTermKey, StunMessage, TransactionId,
    XorMappedAddress,
};
use rtcgate_core::tunnel::{Codec, FrameDecoder, FrameType, LeaseAnnouncement, TunnelFrame};

fn ice_string(min: usize, max: usize) -> impl Strategy<Value = String> {
    proptest::string::string_regex(&format!("[A-Za-z0-9+/]{{{min},{max}}}")).unwrap()
}

fn credentials() -> impl Strategy<Value = SessionCredentials> {
    (ice_string(4, 32), ice_string(22, 40)).prop_map(|(u, p)| SessionCredentials::new(u, p))
}

fn class() -> impl Strategy<Value = MessageClass> {
    prop_oneof![
        Just(MessageClass::BindingRequest),
        Just(MessageClass::BindingSuccessResponse),
        Just(MessageClass::BindingErrorResponse),
    ]
}

fn attribute() -> impl Strategy<Value = Attribute> {
    let unknown_code = prop_oneof![0x8023u16..0x8028, 0xC000u16..=0xFFFF];
    prop_oneof![
        ".{0,40}".prop_map(Attribute::Username),
        (any::<u16>(), any::<u32>()).prop_map(|(port, ip)| {
            Attribute::XorMappedAddress(XorMappedAddress {
                port,
                addr: Ipv4Addr::from(ip),
            })
        }),
        any::<u32>().prop_map(Attribute::Priority),
        any::<u64>().prop_map(Attribute::IceControlling),
        any::<u64>().prop_map(Attribute::IceControlled),
        Just(Attribute::UseCandidate),
        (300u16..700, "[a-zA-Z ]{0,30}").prop_map(|(code, reason)| Attribute::ErrorCode { code, reason }),
        (unknown_code, proptest::collection::vec(any::<u8>(), 0..50))
            .prop_map(|(code, value)| Attribute::Unknown { code, value }),
    ]
}

fn message() -> impl Strategy<Value = StunMessage> {
    (class(), any::<[u8; 12]>(), proptest::collection::vec(attribute(), 0..8)).prop_map(|(class, tid, attributes)| {
        StunMessage {
            class,
            transaction_id: TransactionId(tid),
            attributes,
        }
    })
}

fn candidate_line() -> impl Strategy<Value = String> {
    (
        "[a-z0-9]{1,10}",
        1u16..=2,
        any::<u32>(),
        any::<u32>(),
        1u16..,
        prop_oneof![Just("host"), Just("srflx"), Just("relay")],
        proptest::collection::vec("[a-z0-9.]{1,8}", 0..4),
        any::<bool>(),
    )
        .prop_map(|(f, comp, prio, ip, port, typ, ext, prefix)| {
            let mut line = format!(
                "{}candidate:{f} {comp} udp {prio} {} {port} typ {typ}",
                if prefix { "a=" } else { "" },
                Ipv4Addr::from(ip)
            );
            for token in ext {
                line.push(' ');
                line.push_str(&token);
            }
            line
        })
}

proptest! {
    #[test]
    fn stun_round_trips_without_key(msg in message()) {
        let bytes = stun::encode(&msg, None).unwrap();
        prop_assert_eq!(bytes.len() % 4, 0);
        prop_assert!(stun::peek_is_stun(&bytes));
        prop_assert_eq!(stun::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn stun_round_trips_with_key(msg in message(), pwd in ice_string(1, 40)) {
        let key = ShortTermKey::new(&pwd).unwrap();
        let bytes = stun::encode(&msg, Some(&key)).unwrap();
        prop_assert!(verify_integrity(&bytes, &key).unwrap());
        let decoded = stun::decode(&bytes).unwrap();
        prop_assert!(decoded.has(attr::MESSAGE_INTEGRITY) && decoded.has(attr::FINGERPRINT));
        prop_assert_eq!(decoded.without_trailers(), msg);
    }

    #[test]
    fn integrity_rejects_other_keys(msg in message(), a in ice_string(1, 30), b in ice_string(1, 30)) {
        prop_assume!(a != b);
        let bytes = stun::encode(&msg, Some(&ShortTermKey::new(&a).unwrap())).unwrap();
        prop_assert!(!verify_integrity(&bytes, &ShortTermKey::new(&b).unwrap()).unwrap());
    }

    #[test]
    fn integrity_catches_body_tampering(msg in message(), pwd in ice_string(1, 30), pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let key = ShortTermKey::new(&pwd).unwrap();
        let mut bytes = stun::encode(&msg, Some(&key)).unwrap();
        // Only the bytes covered by the HMAC, minus the length field.
        let covered = bytes.len() - 32;
        let mut at = pick.index(covered);
        if (2..4).contains(&at) {
            at += 2;
        }
        bytes[at] ^= 1 << bit;
        prop_assert_ne!(verify_integrity(&bytes, &key), Ok(true));
    }

    #[test]
    fn flip_is_an_involution(a in "[^:]{1,20}", b in "[^:]{1,20}") {
        let name = format!("{a}:{b}");
        let flipped = flip_username(&name).unwrap();
        prop_assert_eq!(&flipped, &format!("{b}:{a}"));
        prop_assert_eq!(flip_username(&flipped).unwrap(), name);
    }

    #[test]
    fn credentials_survive_a_description(creds in credentials(), id in any::<u64>()) {
        let sdp = minimal_description(&creds, id, "actpass");
        prop_assert_eq!(extract_credentials(&sdp).unwrap(), creds);
    }

    #[test]
    fn candidates_round_trip(line in candidate_line()) {
        let candidate = parse_candidate(&line).unwrap();
        prop_assert_eq!(candidate.to_string(), line);
    }

    #[test]
    fn rewrite_touches_only_the_address(line in candidate_line(), ip in any::<u32>(), port in 1u16..) {
        let original = parse_candidate(&line).unwrap();
        let ip = Ipv4Addr::from(ip);
        let rewritten = parse_candidate(&rewrite_candidate(&original, ip, port)).unwrap();
        prop_assert_eq!((rewritten.ip, rewritten.port), (ip, port));
        let back = rewrite_candidate(&rewritten, original.ip, original.port);
        prop_assert_eq!(back, line);
    }

    #[test]
    fn tunnel_frames_survive_any_chunking(
        frames in proptest::collection::vec((1u8..=8, any::<[u8; 16]>(), proptest::collection::vec(any::<u8>(), 0..300)), 1..20),
        checksum in any::<bool>(),
        cuts in proptest::collection::vec(1usize..64, 1..50),
    ) {
        let codec = if checksum { Codec::with_checksum() } else { Codec::default() };
        let frames: Vec<TunnelFrame> = frames
            .into_iter()
            .map(|(t, id, payload)| TunnelFrame::new(FrameType::from_byte(t).unwrap(), SessionId(id), payload))
            .collect();
        let mut stream = Vec::new();
        for f in &frames {
            codec.encode_into(f, &mut stream).unwrap();
        }

        let mut decoder = FrameDecoder::new(codec);
        let mut out = Vec::new();
        let mut rest = stream.as_slice();
        for cut in cuts.iter().cycle() {
            if rest.is_empty() {
                break;
            }
            let (chunk, tail) = rest.split_at((*cut).min(rest.len()));
            decoder.extend(chunk);
            rest = tail;
            while let Some(frame) = decoder.next_frame().unwrap() {
                out.push(frame);
            }
        }
        prop_assert_eq!(decoder.pending(), 0);
        prop_assert_eq!(out, frames);
    }

    #[test]
    fn media_never_looks_like_stun(ssrc in any::<u32>(), index in any::<u32>(), len in 0usize..1200) {
        let datagram = media_datagram(ssrc, index, Duration::from_millis(20), len);
        prop_assert!(!stun::peek_is_stun(&datagram));
    }

    #[test]
    fn hub_forwards_only_between_session_ends(
        sends in proptest::collection::vec((0usize..4, 0u8..4, proptest::collection::vec(any::<u8>(), 1..40)), 1..200),
    ) {
        // Sessions 1 and 2 join A-B and C-D; session 3 is never opened.
        let names = ["A", "B", "C", "D"];
        let mut hub = Hub::default();
        let t0 = Duration::ZERO;
        for (i, name) in names.iter().enumerate() {
            hub.on_frame(ConnId(i as u64), TunnelFrame::hello(name), t0);
        }
        let ends: BTreeMap<u8, (usize, usize)> = [(1, (0, 1)), (2, (2, 3))].into();
        for (&n, &(owner, peer)) in &ends {
            let ann = LeaseAnnouncement {
                owner_lgat: names[owner].into(),
                peer_lgat: names[peer].into(),
                peer_addr: SocketAddrV4::new(Ipv4Addr::new(192, 168, 0, 10), 40000),
                reply: None,
            };
            hub.on_frame(ConnId(owner as u64), TunnelFrame::lease(FrameType::LeaseOpen, SessionId([n; 16]), &ann), t0);
        }

        for (from, n, payload) in sends {
            let frame = TunnelFrame::data(SessionId([n; 16]), payload);
            let out = hub.on_frame(ConnId(from as u64), frame.clone(), t0);
            let expected = match ends.get(&n) {
                Some(&(a, b)) if from == a => Some(b),
                Some(&(a, b)) if from == b => Some(a),
                _ => None,
            };
            match expected {
                Some(to) => prop_assert_eq!(out, vec![HubAction::Send { conn: ConnId(to as u64), frame }]),
                None => {
                    let forwarded = out.iter().any(|a| matches!(a, HubAction::Send { frame: f, .. } if f.frame_type == FrameType::Data));
                    prop_assert!(!forwarded);
                }
            }
        }
    }
}
