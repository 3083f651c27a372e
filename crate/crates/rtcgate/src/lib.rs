//! Runtime for the gateway: signaling server, central and local gateway
//! processes, simulated peers, the demo launcher and the benchmark driver.

pub mod bench;
pub mod cgat;
pub mod config;
pub mod demo;
pub mod events;
pub mod lgat;
pub mod peer;
pub mod procs;
pub mod signal;
pub mod status;
pub mod tunnel_io;
