use alloc::format;
use alloc::vec::Vec;
use core::net::SocketAddrV4;
use core::time::Duration;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::sdp::SessionCredentials;
use crate::stun::{self, Attribute, MessageClass, ShortTermKey, StunMessage, TransactionId};

pub const MAX_CHECKS: u32 = 30;
pub const CHECK_BUDGET: Duration = Duration::from_secs(15);
pub const KEEPALIVE_INTERVAL: Duration = Duration::from_secs(5);

/// When the n-th connectivity check goes out, relative to the first one:
/// 0, 250, 500, 1000 and 2000 ms, then once a second.
#[derive(Debug, Clone, Copy, Default)]
pub struct RetransmitSchedule;

impl RetransmitSchedule {
    pub fn offset(attempt: u32) -> Duration {
        const FIRST: [u64; 5] = [0, 250, 500, 1000, 2000];
        match FIRST.get(attempt as usize) {
            Some(ms) => Duration::from_millis(*ms),
            None => Duration::from_millis(2000 + 1000 * u64::from(attempt - 4)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IceState {
    New,
    Checking,
    Connected,
    Failed,
}

#[derive(Debug, Clone)]
pub struct IceConfig {
    pub local: SessionCredentials,
    pub remote: SessionCredentials,
    pub controlling: bool,
    pub tie_breaker: u64,
    pub priority: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IceCounters {
    pub requests_sent: u32,
    pub responses_sent: u32,
    pub valid_responses: u32,
    pub rejected: u32,
}

/// What [`IceAgent::handle_stun`] made of a datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IceEvent {
    /// A valid request; send the response back to its source.
    Respond(Vec<u8>),
    /// A valid response to one of our checks.
    Confirmed,
    Rejected,
}

/// Connectivity-check logic of one browser for one candidate pair.
///
/// The pair counts as connected once one of our checks got a valid response
/// and we answered at least one valid check from the other side.
#[derive(Debug, Clone)]
pub struct IceAgent {
    config: IceConfig,
    local_key: ShortTermKey,
    remote_key: ShortTermKey,
    state: IceState,
    started_at: Duration,
    attempts: u32,
    outstanding: Vec<TransactionId>,
    confirmed: bool,
    answered: bool,
    connected_at: Option<Duration>,
    next_keepalive: Duration,
    counters: IceCounters,
}

impl IceAgent {
    /// Fails if either password is empty.
    pub fn new(config: IceConfig) -> Result<Self, stun::StunError> {
        Ok(IceAgent {
            local_key: ShortTermKey::new(&config.local.pwd)?,
            remote_key: ShortTermKey::new(&config.remote.pwd)?,
            config,
            state: IceState::New,
            started_at: Duration::ZERO,
            attempts: 0,
            outstanding: Vec::new(),
            confirmed: false,
            answered: false,
            connected_at: None,
            next_keepalive: Duration::ZERO,
            counters: IceCounters::default(),
        })
    }

    pub fn state(&self) -> IceState {
        self.state
    }

    pub fn counters(&self) -> IceCounters {
        self.counters
    }

    pub fn started_at(&self) -> Option<Duration> {
        (self.state != IceState::New).then_some(self.started_at)
    }

    pub fn connected_at(&self) -> Option<Duration> {
        self.connected_at
    }

    pub fn start(&mut self, now: Duration) {
        if self.state == IceState::New {
            self.state = IceState::Checking;
            self.started_at = now;
        }
    }

    /// When [`IceAgent::poll_transmit`] next has something to do.
    pub fn poll_timeout(&self) -> Option<Duration> {
        match self.state {
            IceState::Checking if self.attempts >= MAX_CHECKS => Some(self.started_at + CHECK_BUDGET),
            IceState::Checking => {
                Some((self.started_at + RetransmitSchedule::offset(self.attempts)).min(self.started_at + CHECK_BUDGET))
            }
            IceState::Connected => Some(self.next_keepalive),
            IceState::New | IceState::Failed => None,
        }
    }

    /// The check to send now, if one is due. Moves to `Failed` once the
    /// budget is spent without connecting.
    pub fn poll_transmit<R: RngCore + ?Sized>(&mut self, now: Duration, rng: &mut R) -> Option<Vec<u8>> {
        match self.state {
            IceState::Checking => {
                if now >= self.started_at + CHECK_BUDGET || self.attempts >= MAX_CHECKS {
                    if now >= self.started_at + CHECK_BUDGET {
                        self.state = IceState::Failed;
                    }
                    return None;
                }
                if now < self.started_at + RetransmitSchedule::offset(self.attempts) {
                    return None;
                }
                self.attempts += 1;
                Some(self.request(rng))
            }
            IceState::Connected if now >= self.next_keepalive => {
                self.next_keepalive = now + KEEPALIVE_INTERVAL;
                Some(self.request(rng))
            }
            _ => None,
        }
    }

    fn request<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> Vec<u8> {
        let tid = TransactionId::random(rng);
        self.outstanding.push(tid);
        if self.outstanding.len() > MAX_CHECKS as usize {
            self.outstanding.remove(0);
        }
        let role = if self.config.controlling {
            Attribute::IceControlling(self.config.tie_breaker)
        } else {
            Attribute::IceControlled(self.config.tie_breaker)
        };
        let mut msg = StunMessage::new(MessageClass::BindingRequest, tid)
            .with(Attribute::Username(format!(
                "{}:{}",
                self.config.remote.ufrag, self.config.local.ufrag
            )))
            .with(Attribute::Priority(self.config.priority))
            .with(role);
        if self.config.controlling {
            msg = msg.with(Attribute::UseCandidate);
        }
        self.counters.requests_sent += 1;
        stun::encode(&msg, Some(&self.remote_key)).expect("check fits a datagram")
    }

    pub fn handle_stun(&mut self, datagram: &[u8], source: SocketAddrV4, now: Duration) -> IceEvent {
        let Ok(msg) = stun::decode(datagram) else {
            return self.reject();
        };
        match msg.class {
            MessageClass::BindingRequest => {
                let expected = format!("{}:{}", self.config.local.ufrag, self.config.remote.ufrag);
                if msg.username() != Some(expected.as_str())
                    || stun::verify_integrity(datagram, &self.local_key) != Ok(true)
                {
                    return self.reject();
                }
                let response = stun::build_binding_response(&msg, source, &self.local_key)
                    .and_then(|r| r.encode())
                    .expect("response fits a datagram");
                self.counters.responses_sent += 1;
                self.answered = true;
                self.check_connected(now);
                IceEvent::Respond(response)
            }
            MessageClass::BindingSuccessResponse => {
                let Some(pos) = self.outstanding.iter().position(|t| *t == msg.transaction_id) else {
                    return self.reject();
                };
                if stun::verify_integrity(datagram, &self.remote_key) != Ok(true) {
                    return self.reject();
                }
                self.outstanding.swap_remove(pos);
                self.counters.valid_responses += 1;
                self.confirmed = true;
                self.check_connected(now);
                IceEvent::Confirmed
            }
            MessageClass::BindingErrorResponse => self.reject(),
        }
    }

    fn reject(&mut self) -> IceEvent {
        self.counters.rejected += 1;
        IceEvent::Rejected
    }

    fn check_connected(&mut self, now: Duration) {
        if self.state == IceState::Checking && self.confirmed && self.answered {
            self.state = IceState::Connected;
            self.connected_at = Some(now);
            self.next_keepalive = now + KEEPALIVE_INTERVAL;
        }
    }
}
