//! Sans-IO core of a gateway pair that carries WebRTC media between two
//! firewalled networks over a single outbound TCP connection per site.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cgat;
pub mod lgat;
pub mod peersim;
pub mod sdp;
pub mod session;
pub mod signal;
pub mod sim;
pub mod stun;
pub mod tunnel;
