use std::collections::BTreeMap;
use std::net::SocketAddrV4;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcgate_core::sdp::{make_credential_pairs, SessionCredentials};
use rtcgate_core::stun::{
    build_binding_response, build_mirrored_request, decode, verify_integrity, Attribute, MessageClass, PasswordLookup,
    ShortTermKey, StunMessage, TransactionId,
};

/// Map a gateway serving `local` should hold, written out by hand.
fn expected_map(local: &SessionCredentials, remote: &SessionCredentials) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert(remote.ufrag.clone() + ":" + &local.ufrag, remote.pwd.clone());
    map.insert(local.ufrag.clone() + ":" + &remote.ufrag, local.pwd.clone());
    map
}

fn installed(local: &SessionCredentials, remote: &SessionCredentials) -> BTreeMap<String, String> {
    make_credential_pairs(local, remote)
        .into_iter()
        .map(|p| (p.username, p.password))
        .collect()
}

#[test]
fn credential_pairs_hold_for_a_thousand_random_sessions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let sender: SocketAddrV4 = "192.168.10.100:40000".parse().unwrap();
    for _ in 0..1000 {
        let a = SessionCredentials::generate(&mut rng);
        let b = SessionCredentials::generate(&mut rng);
        assert_ne!(a.ufrag, b.ufrag);

        let map = installed(&a, &b);
        assert_eq!(map, expected_map(&a, &b));
        // Either side derives the same two entries.
        assert_eq!(map, installed(&b, &a));

        // A's browser checks B with B's credentials.
        let request = StunMessage::new(MessageClass::BindingRequest, TransactionId::random(&mut rng))
            .with(Attribute::Username(format!("{}:{}", b.ufrag, a.ufrag)))
            .with(Attribute::Priority(1))
            .with(Attribute::IceControlled(7));
        let wire = rtcgate_core::stun::encode(&request, Some(&ShortTermKey::new(&b.pwd).unwrap())).unwrap();
        let parsed = decode(&wire).unwrap();
        let key = ShortTermKey::new(map.password(parsed.username().unwrap()).unwrap()).unwrap();
        assert!(verify_integrity(&wire, &key).unwrap());

        let response = build_binding_response(&parsed, sender, &key).unwrap().encode().unwrap();
        assert!(verify_integrity(&response, &ShortTermKey::new(&b.pwd).unwrap()).unwrap());

        // The mirrored request is what B's browser would send to A.
        let mirrored = build_mirrored_request(&parsed, &map, &mut rng).unwrap();
        let bytes = mirrored.encode().unwrap();
        assert!(verify_integrity(&bytes, &ShortTermKey::new(&a.pwd).unwrap()).unwrap());
        let m = decode(&bytes).unwrap();
        assert_eq!(m.username(), Some(format!("{}:{}", a.ufrag, b.ufrag).as_str()));
        assert!(m.attributes.contains(&Attribute::IceControlled(7)));
        assert!(m.attributes.contains(&Attribute::UseCandidate));
    }
}
