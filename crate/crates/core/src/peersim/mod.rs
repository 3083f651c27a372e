//! Scriptable stand-in for a browser peer: an ICE agent that runs real
//! connectivity checks, the signaling interceptor that sits between the
//! peer and the pubsub server, and a paced media stream with statistics.

mod ice;
mod interceptor;
mod media;
mod peer;

pub use ice::{
    IceAgent, IceConfig, IceCounters, IceEvent, IceState, RetransmitSchedule, CHECK_BUDGET, KEEPALIVE_INTERVAL,
    MAX_CHECKS,
};
pub use interceptor::{
    create_description, Delivery, DescriptionKind, Interceptor, InterceptorConfig, InterceptorCounters, Output,
};
pub use media::{
    is_probe, media_datagram, median, probe, Aggregate, MediaError, MediaPacket, MediaStats, StatsSummary,
    MEDIA_HEADER_LEN, MEDIA_PAYLOAD_TYPE, PROBE_PAYLOAD_TYPE,
};
pub use peer::{MediaPhase, Milestones, Peer, PeerConfig, PeerOutput, DRAIN, PROBE_INTERVAL};
