//! Central gateway routing state: which local gateways are connected, which
//! session ids were seen in allocate replies, and where their data frames go.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::net::SocketAddrV4;
use core::time::Duration;

use hashbrown::HashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::SessionId;
use crate::signal::{lgat_channel, AllocateReply, Envelope, RoutedEnvelope};
use crate::stun;
use crate::tunnel::{FrameType, LeaseAnnouncement, LeaseTable, TunnelErrorCode, TunnelFrame, DEFAULT_LEASE_TTL};

/// Identifies one tunnel connection. A reconnecting gateway gets a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Direct,
    Tunneled,
}

/// Peers behind the same local gateway talk directly. Ids are compared
/// byte for byte.
pub fn check_same_lgat(offer_lgat: &str, answer_lgat: &str) -> RoutingMode {
    if offer_lgat == answer_lgat {
        RoutingMode::Direct
    } else {
        RoutingMode::Tunneled
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRoute {
    pub session_id: SessionId,
    pub owner_lgat: String,
    pub peer_lgat: String,
    pub peer_addr: SocketAddrV4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LgatRegistration {
    pub lgat_id: String,
    pub conn: ConnId,
    pub registered_at: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CgatError {
    #[error("session {0} is already recorded")]
    DuplicateSession(SessionId),
    #[error("lgat {0:?} is not registered")]
    UnknownLgat(String),
    #[error("session {0} is not recorded")]
    UnknownSession(SessionId),
    #[error("lgat {0:?} does not own session {1}")]
    NotOwner(String, SessionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    UnknownSession,
    LeaseExpired,
    Spoofed,
    CounterpartOffline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision<'a> {
    Forward { lgat_id: &'a str, conn: ConnId },
    Drop(DropReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterCounters {
    pub forwarded: u64,
    pub dropped_unknown_session: u64,
    pub dropped_expired: u64,
    pub dropped_spoofed: u64,
    pub dropped_offline: u64,
    /// Data frames whose payload looked like STUN. Stays zero when gateways
    /// answer connectivity checks locally.
    pub stun_payloads: u64,
}

#[derive(Debug, Clone)]
struct RouteEntry {
    route: SessionRoute,
    conn: ConnId,
}

#[derive(Debug)]
pub struct Router {
    lgats: HashMap<String, LgatRegistration>,
    routes: HashMap<SessionId, RouteEntry>,
    leases: LeaseTable,
    counters: RouterCounters,
}

impl Default for Router {
    fn default() -> Self {
        Self::new(DEFAULT_LEASE_TTL)
    }
}

impl Router {
    pub fn new(lease_ttl: Duration) -> Self {
        Router {
            lgats: HashMap::new(),
            routes: HashMap::new(),
            leases: LeaseTable::new(lease_ttl),
            counters: RouterCounters::default(),
        }
    }

    /// Registers `lgat_id` on `conn`, replacing any earlier connection.
    /// Routes the gateway recorded over other connections are dropped and
    /// returned.
    pub fn register_lgat(&mut self, lgat_id: &str, conn: ConnId, now: Duration) -> Vec<SessionRoute> {
        self.lgats.insert(
            lgat_id.into(),
            LgatRegistration {
                lgat_id: lgat_id.into(),
                conn,
                registered_at: now,
            },
        );
        let stale: Vec<SessionId> = self
            .routes
            .iter()
            .filter(|(_, e)| e.route.owner_lgat == lgat_id && e.conn != conn)
            .map(|(id, _)| *id)
            .collect();
        stale.iter().filter_map(|id| self.remove(id)).collect()
    }

    /// Forgets the registration if `conn` is still the current one.
    pub fn unregister(&mut self, conn: ConnId) -> Option<String> {
        let id = self
            .lgats
            .values()
            .find(|r| r.conn == conn)
            .map(|r| r.lgat_id.clone())?;
        self.lgats.remove(&id);
        Some(id)
    }

    pub fn registration(&self, lgat_id: &str) -> Option<&LgatRegistration> {
        self.lgats.get(lgat_id)
    }

    pub fn lgat_for_conn(&self, conn: ConnId) -> Option<&str> {
        self.lgats.values().find(|r| r.conn == conn).map(|r| r.lgat_id.as_str())
    }

    pub fn registered(&self) -> impl Iterator<Item = &LgatRegistration> {
        self.lgats.values()
    }

    /// Records a route seen in an allocate reply and opens its lease.
    pub fn record_session(&mut self, route: SessionRoute, now: Duration) -> Result<(), CgatError> {
        let conn = self
            .lgats
            .get(&route.owner_lgat)
            .ok_or_else(|| CgatError::UnknownLgat(route.owner_lgat.clone()))?
            .conn;
        if !self.lgats.contains_key(&route.peer_lgat) {
            return Err(CgatError::UnknownLgat(route.peer_lgat.clone()));
        }
        if self.routes.contains_key(&route.session_id) {
            if self.leases.is_active(&route.session_id, now) {
                return Err(CgatError::DuplicateSession(route.session_id));
            }
            self.remove(&route.session_id);
        }
        self.leases
            .open(route.session_id, now)
            .map_err(|_| CgatError::DuplicateSession(route.session_id))?;
        self.routes.insert(route.session_id, RouteEntry { route, conn });
        Ok(())
    }

    pub fn renew(&mut self, session_id: &SessionId, from_lgat: &str, now: Duration) -> Result<(), CgatError> {
        let entry = self
            .routes
            .get(session_id)
            .ok_or(CgatError::UnknownSession(*session_id))?;
        if entry.route.owner_lgat != from_lgat {
            return Err(CgatError::NotOwner(from_lgat.into(), *session_id));
        }
        self.leases
            .renew(session_id, now)
            .map_err(|_| CgatError::UnknownSession(*session_id))
    }

    pub fn close_session(&mut self, session_id: &SessionId, from_lgat: &str) -> Result<SessionRoute, CgatError> {
        let entry = self
            .routes
            .get(session_id)
            .ok_or(CgatError::UnknownSession(*session_id))?;
        if entry.route.owner_lgat != from_lgat {
            return Err(CgatError::NotOwner(from_lgat.into(), *session_id));
        }
        Ok(self.remove(session_id).expect("route present"))
    }

    fn remove(&mut self, session_id: &SessionId) -> Option<SessionRoute> {
        self.leases.close(session_id);
        self.routes.remove(session_id).map(|e| e.route)
    }

    pub fn route(&self, session_id: &SessionId) -> Option<&SessionRoute> {
        self.routes.get(session_id).map(|e| &e.route)
    }

    /// Decides where a data frame from `from_lgat` goes. Only the two gateways
    /// on a recorded route may use its session id, and the frame always goes
    /// to the other one.
    pub fn route_data(&mut self, from_lgat: &str, frame: &TunnelFrame, now: Duration) -> RouteDecision<'_> {
        if stun::peek_is_stun(&frame.payload) {
            self.counters.stun_payloads += 1;
        }
        let Some(entry) = self.routes.get(&frame.session_id) else {
            self.counters.dropped_unknown_session += 1;
            return RouteDecision::Drop(DropReason::UnknownSession);
        };
        if !self.leases.is_active(&frame.session_id, now) {
            self.counters.dropped_expired += 1;
            return RouteDecision::Drop(DropReason::LeaseExpired);
        }
        let route = &entry.route;
        let target = if route.owner_lgat == from_lgat {
            &route.peer_lgat
        } else if route.peer_lgat == from_lgat {
            &route.owner_lgat
        } else {
            self.counters.dropped_spoofed += 1;
            return RouteDecision::Drop(DropReason::Spoofed);
        };
        match self.lgats.get(target) {
            Some(reg) => {
                self.counters.forwarded += 1;
                RouteDecision::Forward {
                    lgat_id: reg.lgat_id.as_str(),
                    conn: reg.conn,
                }
            }
            None => {
                self.counters.dropped_offline += 1;
                RouteDecision::Drop(DropReason::CounterpartOffline)
            }
        }
    }

    /// Drops routes whose lease ran out.
    pub fn expire(&mut self, now: Duration) -> Vec<SessionRoute> {
        self.leases
            .expire(now)
            .iter()
            .filter_map(|id| self.routes.remove(id).map(|e| e.route))
            .collect()
    }

    pub fn counters(&self) -> RouterCounters {
        self.counters
    }

    pub fn session_count(&self) -> usize {
        self.routes.len()
    }

    pub fn routes(&self) -> impl Iterator<Item = &SessionRoute> {
        self.routes.values().map(|e| &e.route)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HubAction {
    Send {
        conn: ConnId,
        frame: TunnelFrame,
    },
    /// Append an envelope to a signaling channel on a gateway's behalf.
    Publish(RoutedEnvelope),
    /// A gateway said hello; its control channel should now be followed.
    Registered {
        lgat_id: String,
        conn: ConnId,
    },
    Disconnect(ConnId),
}

/// Frame handling of the central gateway on top of [`Router`].
#[derive(Debug, Default)]
pub struct Hub {
    router: Router,
}

impl Hub {
    pub fn new(lease_ttl: Duration) -> Self {
        Hub {
            router: Router::new(lease_ttl),
        }
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn on_frame(&mut self, conn: ConnId, frame: TunnelFrame, now: Duration) -> Vec<HubAction> {
        if frame.frame_type == FrameType::Hello {
            return match frame.hello_id() {
                Ok(id) if !id.is_empty() => {
                    let lgat_id = String::from(id);
                    self.router.register_lgat(&lgat_id, conn, now);
                    vec![HubAction::Registered { lgat_id, conn }]
                }
                _ => vec![
                    HubAction::Send {
                        conn,
                        frame: TunnelFrame::error(SessionId::NIL, TunnelErrorCode::NotRegistered),
                    },
                    HubAction::Disconnect(conn),
                ],
            };
        }
        let Some(from) = self.router.lgat_for_conn(conn).map(String::from) else {
            return vec![HubAction::Send {
                conn,
                frame: TunnelFrame::error(frame.session_id, TunnelErrorCode::NotRegistered),
            }];
        };
        let error = |code| {
            vec![HubAction::Send {
                conn,
                frame: TunnelFrame::error(frame.session_id, code),
            }]
        };
        match frame.frame_type {
            FrameType::Data => match self.router.route_data(&from, &frame, now) {
                RouteDecision::Forward { conn: to, .. } => vec![HubAction::Send { conn: to, frame }],
                RouteDecision::Drop(DropReason::LeaseExpired) => error(TunnelErrorCode::LeaseExpired),
                RouteDecision::Drop(_) => Vec::new(),
            },
            FrameType::LeaseOpen => self.lease_open(conn, &from, frame, now),
            FrameType::LeaseRenew => match self.router.renew(&frame.session_id, &from, now) {
                Ok(()) => Vec::new(),
                Err(_) => error(TunnelErrorCode::LeaseExpired),
            },
            FrameType::LeaseClose => match self.router.close_session(&frame.session_id, &from) {
                Ok(route) => self.notify_peer(&route, FrameType::LeaseClose),
                Err(_) => Vec::new(),
            },
            FrameType::Control => match frame.json::<RoutedEnvelope>() {
                Ok(routed) => vec![HubAction::Publish(routed)],
                Err(_) => Vec::new(),
            },
            FrameType::LeaseOpenAck | FrameType::Error | FrameType::Hello => Vec::new(),
        }
    }

    fn lease_open(&mut self, conn: ConnId, from: &str, frame: TunnelFrame, now: Duration) -> Vec<HubAction> {
        let Ok(mut announcement) = frame.json::<LeaseAnnouncement>() else {
            return Vec::new();
        };
        // The connection, not the payload, says who owns the session.
        announcement.owner_lgat = from.into();
        let route = SessionRoute {
            session_id: frame.session_id,
            owner_lgat: announcement.owner_lgat.clone(),
            peer_lgat: announcement.peer_lgat.clone(),
            peer_addr: announcement.peer_addr,
        };
        let reply = announcement.reply.take();
        let mut actions = Vec::with_capacity(3);
        match self.router.record_session(route, now) {
            Ok(()) => {
                actions.push(HubAction::Send {
                    conn,
                    frame: TunnelFrame::new(FrameType::LeaseOpenAck, frame.session_id, Vec::new()),
                });
                let peer = self.router.registration(&announcement.peer_lgat).map(|r| r.conn);
                if let Some(peer) = peer {
                    actions.push(HubAction::Send {
                        conn: peer,
                        frame: TunnelFrame::lease(FrameType::LeaseOpen, frame.session_id, &announcement),
                    });
                }
                actions.extend(reply.map(HubAction::Publish));
            }
            Err(err) => {
                let code = match err {
                    CgatError::DuplicateSession(_) => TunnelErrorCode::DuplicateSession,
                    _ => TunnelErrorCode::UnknownLgat,
                };
                actions.push(HubAction::Send {
                    conn,
                    frame: TunnelFrame::new(FrameType::LeaseClose, frame.session_id, Vec::new()),
                });
                actions.push(HubAction::Send {
                    conn,
                    frame: TunnelFrame::error(frame.session_id, code),
                });
                if let Some(mut reply) = reply {
                    if let Ok(mut body) = reply.envelope.body_as::<AllocateReply>() {
                        body.allocation = None;
                        body.error = Some(err.to_string());
                        reply.envelope.body = serde_json::to_value(&body).expect("reply serializes");
                    }
                    actions.push(HubAction::Publish(reply));
                }
            }
        }
        actions
    }

    fn notify_peer(&self, route: &SessionRoute, frame_type: FrameType) -> Vec<HubAction> {
        self.router
            .registration(&route.peer_lgat)
            .map(|reg| HubAction::Send {
                conn: reg.conn,
                frame: TunnelFrame::new(frame_type, route.session_id, Vec::new()),
            })
            .into_iter()
            .collect()
    }

    /// Relays an envelope from a gateway's control channel down its tunnel.
    pub fn forward_control(&self, lgat_id: &str, envelope: Envelope) -> Option<HubAction> {
        let reg = self.router.registration(lgat_id)?;
        Some(HubAction::Send {
            conn: reg.conn,
            frame: TunnelFrame::control(&RoutedEnvelope {
                channel: lgat_channel(lgat_id),
                envelope,
            }),
        })
    }

    pub fn disconnected(&mut self, conn: ConnId) -> Option<String> {
        self.router.unregister(conn)
    }

    /// Expires leases and tells both ends of each dropped route.
    pub fn on_tick(&mut self, now: Duration) -> Vec<HubAction> {
        let mut actions = Vec::new();
        for route in self.router.expire(now) {
            for lgat in [&route.owner_lgat, &route.peer_lgat] {
                if let Some(reg) = self.router.registration(lgat) {
                    actions.push(HubAction::Send {
                        conn: reg.conn,
                        frame: TunnelFrame::new(FrameType::LeaseClose, route.session_id, Vec::new()),
                    });
                }
            }
        }
        actions
    }
}
