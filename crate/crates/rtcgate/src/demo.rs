//! End-to-end scenario: signaling server, central gateway, two local
//! gateways and two peers as separate processes, with the merged event log
//! printed as a sequence diagram.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use rtcgate_core::sdp::parse_candidate;

use crate::cgat::CgatStatus;
use crate::events::Event;
use crate::lgat::LgatRuntimeStatus;
use crate::peer::PeerSummary;
use crate::procs::{Proc, ProcError};

#[derive(Debug, Clone)]
pub struct DemoOptions {
    /// Put both peers behind the first local gateway.
    pub same_lgat: bool,
    /// Leave the central gateway out.
    pub without_cgat: bool,
    pub packets: u32,
    pub rate: f64,
    pub hop_delay_ms: u64,
    pub stun_drops: u32,
    pub seed: u64,
    pub deadline: Duration,
    /// Base of the UDP port ranges handed to the local gateways.
    pub port_base: u16,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            same_lgat: false,
            without_cgat: false,
            packets: 50,
            rate: 50.0,
            hop_delay_ms: 0,
            stun_drops: rtcgate_core::lgat::DEFAULT_STUN_DROPS,
            seed: 1,
            deadline: Duration::from_secs(25),
            port_base: 42000,
        }
    }
}

/// When one milestone was reached, in ms after the demo started.
#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneCheck {
    pub peer: String,
    pub name: &'static str,
    pub at_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    /// Every process's events, merged by timestamp.
    pub events: Vec<(String, Event)>,
    pub peers: Vec<PeerSummary>,
    pub lgats: Vec<LgatRuntimeStatus>,
    pub cgat: Option<CgatStatus>,
    pub milestones: Vec<MilestoneCheck>,
    /// The first milestone that was missed or out of order.
    pub failure: Option<String>,
}

const READY: Duration = Duration::from_secs(10);

fn arg(flag: &str, value: impl ToString) -> [String; 2] {
    [flag.to_string(), value.to_string()]
}

fn args<const N: usize>(role: &str, pairs: [[String; 2]; N]) -> Vec<String> {
    let mut out = vec![role.to_string()];
    out.extend(pairs.into_iter().flatten());
    out
}

pub async fn run_demo(exe: &Path, options: &DemoOptions) -> Result<DemoOutcome, ProcError> {
    let mut procs: Vec<Proc> = Vec::new();
    let signal = Proc::spawn(exe, "signal", &args("signal", [arg("--listen", "127.0.0.1:0")]), READY).await?;
    let signal_url = format!("http://{}", signal.ready().str("addr").unwrap_or_default());
    procs.push(signal);

    let cgat_addr = if options.without_cgat {
        // Nothing listens here once the probe socket is gone.
        let probe = std::net::TcpListener::bind("127.0.0.1:0").map_err(|source| ProcError::Spawn {
            name: "cgat".into(),
            source,
        })?;
        probe.local_addr().map(|a| a.to_string()).unwrap_or_default()
    } else {
        let cgat = Proc::spawn(
            exe,
            "cgat",
            &args(
                "cgat",
                [
                    arg("--listen", "127.0.0.1:0"),
                    arg("--signal", &signal_url),
                    arg("--hop-delay-ms", options.hop_delay_ms),
                ],
            ),
            READY,
        )
        .await?;
        let addr = cgat.ready().str("addr").unwrap_or_default().to_string();
        procs.push(cgat);
        addr
    };

    for (i, id) in ["lgat-a", "lgat-b"].into_iter().enumerate() {
        let lo = options.port_base + 100 * i as u16;
        let lgat = Proc::spawn(
            exe,
            id,
            &args(
                "lgat",
                [
                    arg("--id", id),
                    arg("--cgat", &cgat_addr),
                    arg("--signal", &signal_url),
                    arg("--ports", format!("{lo}-{}", lo + 99)),
                    arg("--stun-drops", options.stun_drops),
                    arg("--hop-delay-ms", options.hop_delay_ms),
                    arg("--seed", options.seed + i as u64),
                ],
            ),
            READY,
        )
        .await?;
        procs.push(lgat);
    }
    if options.without_cgat {
        for p in procs.iter().filter(|p| p.name.starts_with("lgat")) {
            p.wait_for("signal-registered", READY).await?;
        }
    } else if let Some(cgat) = procs.iter().find(|p| p.name == "cgat") {
        cgat.wait_for_n("lgat-routable", 2, READY).await?;
    }

    let lgat_b = if options.same_lgat { "lgat-a" } else { "lgat-b" };
    let duration = options.packets as f64 / options.rate;
    let deadline = options.deadline.as_secs_f64();
    let room = format!("demo-{}", options.seed);
    let peer_args = |id: &str, lgat: &str, offer: bool, seed: u64| {
        let mut a = args(
            "peer",
            [
                arg("--id", id),
                arg("--lgat", lgat),
                arg("--signal", &signal_url),
                arg("--room", &room),
                arg("--rate", options.rate),
                arg("--duration", duration),
                arg("--seed", seed),
                arg("--deadline", deadline),
            ],
        );
        if offer {
            a.push("--offer".into());
        }
        a
    };
    let answerer = Proc::spawn(
        exe,
        "peer-b",
        &peer_args("peer-b", lgat_b, false, options.seed * 2 + 1),
        READY,
    )
    .await?;
    let offerer = Proc::spawn(
        exe,
        "peer-a",
        &peer_args("peer-a", "lgat-a", true, options.seed * 2),
        READY,
    )
    .await?;
    let mut peers = vec![offerer, answerer];
    for p in &mut peers {
        let _ = p.wait(options.deadline + Duration::from_secs(10)).await;
    }

    let mut lgats = Vec::new();
    let mut cgat = None;
    for p in &procs {
        let Some(addr) = p.ready().str("status_addr").and_then(|a| a.parse().ok()) else {
            continue;
        };
        let Ok(value) = crate::status::fetch(addr).await else {
            continue;
        };
        if p.name == "cgat" {
            cgat = serde_json::from_value(value).ok();
        } else if let Ok(status) = serde_json::from_value(value) {
            lgats.push(status);
        }
    }
    for p in &mut procs {
        p.kill().await;
    }

    let summaries: Vec<PeerSummary> = peers
        .iter()
        .filter_map(|p| p.find("summary"))
        .filter_map(|e| serde_json::from_value(serde_json::Value::Object(e.fields)).ok())
        .collect();

    let mut events: Vec<(String, Event)> = procs
        .iter()
        .chain(&peers)
        .flat_map(|p| p.events().into_iter().map(|e| (p.name.clone(), e)))
        .collect();
    events.sort_by(|a, b| a.1.ts_ms().unwrap_or(0.0).total_cmp(&b.1.ts_ms().unwrap_or(0.0)));

    let tunneled = !options.same_lgat;
    let (milestones, failure) = check_milestones(&events, &summaries, tunneled);
    Ok(DemoOutcome {
        events,
        peers: summaries,
        lgats,
        cgat,
        milestones,
        failure,
    })
}

/// Offer/answer done, then allocation done (tunneled calls only), then
/// connected, then the first media round trip, for each peer.
fn check_milestones(
    events: &[(String, Event)],
    summaries: &[PeerSummary],
    tunneled: bool,
) -> (Vec<MilestoneCheck>, Option<String>) {
    let start = events.first().and_then(|(_, e)| e.ts_ms()).unwrap_or(0.0);
    let mut checks = Vec::new();
    let mut failure = None;
    for peer in ["peer-a", "peer-b"] {
        let first = |event: &str| {
            events
                .iter()
                .find(|(name, e)| name == peer && e.event == event)
                .and_then(|(_, e)| e.ts_ms())
                .map(|t| t - start)
        };
        let mut steps = vec![("offer-answer", first("stream-setup"))];
        if tunneled {
            steps.push(("allocate", first("candidate-delivered")));
        }
        steps.push(("connected", first("connected")));
        steps.push(("media", first("media-setup")));

        let mut previous = f64::MIN;
        for (name, at_ms) in steps {
            checks.push(MilestoneCheck {
                peer: peer.into(),
                name,
                at_ms,
            });
            if failure.is_some() {
                continue;
            }
            match at_ms {
                Some(t) if t >= previous => previous = t,
                Some(_) => failure = Some(format!("{peer}: {name} out of order")),
                None => {
                    let reason = summaries
                        .iter()
                        .find(|s| s.peer_id == peer)
                        .and_then(|s| s.failure.clone())
                        .unwrap_or_else(|| "no event".into());
                    failure = Some(format!("{peer}: {name} not reached ({reason})"));
                }
            }
        }
    }
    (checks, failure)
}

impl DemoOutcome {
    /// Both peers sent media and got all of the far end's media intact.
    pub fn media_flowed(&self) -> bool {
        self.peers.len() == 2 && self.peers.iter().all(PeerSummary::media_ok)
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && self.media_flowed()
    }

    pub fn peer(&self, id: &str) -> Option<&PeerSummary> {
        self.peers.iter().find(|p| p.peer_id == id)
    }

    /// Every candidate a peer was handed points straight at the other
    /// peer's own socket.
    pub fn candidates_unrewritten(&self) -> bool {
        let (Some(a), Some(b)) = (self.peer("peer-a"), self.peer("peer-b")) else {
            return false;
        };
        let points_at = |lines: &[String], addr: std::net::SocketAddrV4| {
            !lines.is_empty()
                && lines
                    .iter()
                    .all(|l| parse_candidate(l).is_ok_and(|c| c.ip == *addr.ip() && c.port == addr.port()))
        };
        points_at(&a.delivered_candidates, b.local_addr) && points_at(&b.delivered_candidates, a.local_addr)
    }

    /// Events drawn on one lane per process.
    pub fn sequence_diagram(&self) -> String {
        let mut lanes: Vec<&str> = Vec::new();
        for (name, _) in &self.events {
            if !lanes.contains(&name.as_str()) {
                lanes.push(name);
            }
        }
        lanes.sort_by_key(|l| lane_order(l));
        let width = 9;
        let start = self.events.first().and_then(|(_, e)| e.ts_ms()).unwrap_or(0.0);
        let mut out = String::new();
        let _ = write!(out, "{:>10} ", "t ms");
        for lane in &lanes {
            let _ = write!(out, "{lane:<width$}");
        }
        out.push('\n');
        for (name, event) in &self.events {
            if event.event == "stats" {
                continue;
            }
            let t = event.ts_ms().unwrap_or(start) - start;
            let _ = write!(out, "{t:>10.1} ");
            for lane in &lanes {
                let mark = if *lane == name.as_str() { "*" } else { "|" };
                let _ = write!(out, "{mark:<width$}");
            }
            let _ = writeln!(out, "{}{}", event.event, describe(event));
        }
        out
    }
}

fn lane_order(lane: &str) -> usize {
    ["peer-a", "lgat-a", "signal", "cgat", "lgat-b", "peer-b"]
        .iter()
        .position(|l| *l == lane)
        .unwrap_or(usize::MAX)
}

fn describe(event: &Event) -> String {
    let keys = [
        "kind",
        "channel",
        "session_id",
        "state",
        "mode",
        "candidate",
        "port",
        "lgat_id",
        "reason",
        "at_ms",
    ];
    let mut out = String::new();
    for key in keys {
        if let Some(value) = event.fields.get(key) {
            match value.as_str() {
                Some(s) => {
                    let _ = write!(out, " {key}={s}");
                }
                None => {
                    let _ = write!(out, " {key}={value}");
                }
            }
        }
    }
    out
}
