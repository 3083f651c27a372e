use std::time::Duration;

use rtcgate_core::sim::{gate_orders, Gate, SimConfig, World};

const LIMIT: Duration = Duration::from_secs(60);

fn gate_name(g: Gate) -> String {
    serde_json::to_value(g).unwrap().as_str().unwrap().to_string()
}

fn run(order: [Gate; 3], spacing: Duration, stun_drop_count: u32) {
    let mut config = SimConfig::default().with_gate_order(order, Duration::from_millis(500), spacing);
    config.stun_drop_count = stun_drop_count;
    let opens = config.gates.clone();
    let mut world = World::new(config);
    let report = world.run_to_completion(LIMIT);

    assert!(report.all_connected(), "{order:?} did not converge: {report:#?}");
    for (gate, at) in opens {
        let passed = report.first_passed.get(&gate_name(gate));
        assert!(passed.is_none_or(|p| *p >= at), "{gate:?} leaked before {at:?}");
    }
    for peer in &report.peers {
        assert_eq!(peer.failure, None);
        assert_eq!(peer.media.sent, 50);
        assert_eq!((peer.media.lost, peer.media.corrupted), (0, 0), "{order:?}: {peer:#?}");
        assert_eq!(peer.media.received, peer.media.sent, "{order:?}: {peer:#?}");
    }
}

#[test]
fn every_gate_order_converges() {
    for order in gate_orders() {
        run(order, Duration::from_secs(2), 3);
    }
}

#[test]
fn every_gate_order_converges_with_tight_spacing() {
    for order in gate_orders() {
        run(order, Duration::from_millis(150), 3);
    }
}

#[test]
fn every_gate_order_converges_without_dropped_checks() {
    for order in gate_orders() {
        run(order, Duration::from_secs(1), 0);
    }
}

#[test]
fn the_six_orders_are_distinct() {
    let orders = gate_orders();
    assert_eq!(orders.len(), 6);
    for (i, a) in orders.iter().enumerate() {
        assert!(orders[i + 1..].iter().all(|b| a != b));
    }
}
