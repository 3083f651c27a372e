//! Benchmark driver: runs whole multi-process calls per topology and
//! reduces the peers' statistics to a report.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rtcgate_core::peersim::{median, DRAIN};
use serde::{Deserialize, Serialize};

use crate::events::Event;
use crate::peer::PeerSummary;
use crate::procs::{Proc, ProcError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Both peers behind one local gateway, so media goes peer to peer.
    Direct,
    /// Each peer next to its own local gateway, tunneled through the
    /// central gateway.
    LocalGateway,
    /// As above with extra delay between each peer and its gateway.
    RemoteGateway,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Direct, Topology::LocalGateway, Topology::RemoteGateway];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Direct => "direct",
            Topology::LocalGateway => "local-gateway",
            Topology::RemoteGateway => "remote-gateway",
        }
    }

    pub fn tunneled(self) -> bool {
        self != Topology::Direct
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topology::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown topology {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub topology: Topology,
    pub streams: u32,
    /// Packets per second per stream.
    pub rate: f64,
    /// Seconds of media on the measured stream.
    pub duration: f64,
    /// Leading seconds left out of the round-trip figures.
    pub warmup: f64,
    pub hop_delay_ms: u64,
    /// Emulated tunnel link rate in kbit/s; 0 is unlimited.
    pub hop_rate_kbps: u64,
    /// Peer to gateway delay, remote-gateway topology only.
    pub local_delay_ms: u64,
    pub runs: u32,
}

impl ExperimentPlan {
    pub fn new(topology: Topology) -> Self {
        ExperimentPlan {
            topology,
            streams: 1,
            rate: 50.0,
            duration: 60.0,
            warmup: 10.0,
            hop_delay_ms: 0,
            hop_rate_kbps: 0,
            local_delay_ms: 5,
            runs: 5,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidPlan(m.into()));
        if self.streams == 0 {
            return bad("streams must be at least 1");
        }
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad("rate must be positive");
        }
        if !(self.warmup >= 0.0 && self.duration > self.warmup) {
            return bad("duration must exceed warmup");
        }
        Ok(())
    }

    /// Media seconds for the streams that stop early in a concurrency run:
    /// halfway through the measured window.
    fn short_duration(&self) -> f64 {
        self.warmup + (self.duration - self.warmup) / 2.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Process(#[from] ProcError),
    #[error("run {run}, stream {stream}: {reason}")]
    Stream { run: u32, stream: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub stream: u32,
    pub rtt_mean_ms: f64,
    pub rtt_stddev_ms: f64,
    pub jitter_ms: f64,
    pub loss_fraction: f64,
    pub stream_setup_ms: f64,
    pub media_setup_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: u32,
    pub streams: Vec<StreamReport>,
    /// Median of the measured stream's per-second RTT while every stream
    /// was running, and after the others stopped.
    pub concurrent_rtt_ms: Option<f64>,
    pub solo_rtt_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub plan: ExperimentPlan,
    /// Medians over runs of the measured stream's figures.
    pub rtt_mean_ms: f64,
    pub rtt_stddev_ms: f64,
    pub jitter_ms: f64,
    pub loss_fraction: f64,
    /// Medians over every stream of every run.
    pub stream_setup_ms: f64,
    pub media_setup_ms: f64,
    pub concurrent_rtt_ms: Option<f64>,
    pub solo_rtt_ms: Option<f64>,
    /// Round-trip time each extra concurrent stream added. Negative when
    /// the measured stream got faster with company, which loopback noise
    /// can produce.
    pub per_stream_rtt_delta_ms: Option<f64>,
    pub runs: Vec<RunReport>,
}

impl BenchReport {
    /// Every figure is finite, and all but the signed delta are non-negative.
    pub fn is_sane(&self) -> bool {
        let plain = [
            self.rtt_mean_ms,
            self.rtt_stddev_ms,
            self.jitter_ms,
            self.loss_fraction,
            self.stream_setup_ms,
            self.media_setup_ms,
        ];
        plain.iter().all(|v| v.is_finite() && *v >= 0.0)
            && [self.concurrent_rtt_ms, self.solo_rtt_ms]
                .iter()
                .flatten()
                .all(|v| v.is_finite() && *v >= 0.0)
            && self.per_stream_rtt_delta_ms.is_none_or(f64::is_finite)
    }
}

const READY: Duration = Duration::from_secs(10);

fn arg(flag: &str, value: impl ToString) -> [String; 2] {
    [flag.to_string(), value.to_string()]
}

fn role_args<const N: usize>(role: &str, pairs: [[String; 2]; N]) -> Vec<String> {
    let mut out = vec![role.to_string()];
    out.extend(pairs.into_iter().flatten());
    out
}

struct Stack {
    services: Vec<Proc>,
    signal_url: String,
}

async fn start_stack(exe: &Path, plan: &ExperimentPlan, run: u32) -> Result<Stack, BenchError> {
    let signal = Proc::spawn(
        exe,
        "signal",
        &role_args("signal", [arg("--listen", "127.0.0.1:0")]),
        READY,
    )
    .await?;
    let signal_url = format!("http://{}", signal.ready().str("addr").unwrap_or_default());
    let mut services = vec![signal];
    if !plan.topology.tunneled() {
        return Ok(Stack { services, signal_url });
    }
    let cgat = Proc::spawn(
        exe,
        "cgat",
        &role_args(
            "cgat",
            [
                arg("--listen", "127.0.0.1:0"),
                arg("--signal", &signal_url),
                arg("--hop-delay-ms", plan.hop_delay_ms),
                arg("--hop-rate-kbps", plan.hop_rate_kbps),
            ],
        ),
        READY,
    )
    .await?;
    let cgat_addr = cgat.ready().str("addr").unwrap_or_default().to_string();
    services.push(cgat);
    let local_delay = if plan.topology == Topology::RemoteGateway {
        plan.local_delay_ms
    } else {
        0
    };
    for (i, id) in ["lgat-a", "lgat-b"].into_iter().enumerate() {
        // Fresh ports each run so lingering sockets never collide.
        let lo = 20000 + ((run as u16 % 40) * 2 + i as u16) * 500;
        let lgat = Proc::spawn(
            exe,
            id,
            &role_args(
                "lgat",
                [
                    arg("--id", id),
                    arg("--cgat", &cgat_addr),
                    arg("--signal", &signal_url),
                    arg("--ports", format!("{lo}-{}", lo + 499)),
                    arg("--hop-delay-ms", plan.hop_delay_ms),
                    arg("--hop-rate-kbps", plan.hop_rate_kbps),
                    arg("--local-delay-ms", local_delay),
                    arg("--seed", run as u64 * 2 + i as u64),
                ],
            ),
            READY,
        )
        .await?;
        services.push(lgat);
    }
    services[1].wait_for_n("lgat-routable", 2, READY).await?;
    Ok(Stack { services, signal_url })
}

struct Call {
    offerer: Proc,
    answerer: Proc,
}

fn summary_of(p: &Proc) -> Option<PeerSummary> {
    p.find("summary")
        .and_then(|e| serde_json::from_value(serde_json::Value::Object(e.fields)).ok())
}

fn finished_at(p: &Proc) -> Option<f64> {
    p.find("finished").and_then(|e| e.ts_ms())
}

/// Runs one multi-process trial.
pub async fn run_once(exe: &Path, plan: &ExperimentPlan, run: u32) -> Result<RunReport, BenchError> {
    let mut stack = start_stack(exe, plan, run).await?;
    let (lgat_a, lgat_b) = if plan.topology.tunneled() {
        ("lgat-a", "lgat-b")
    } else {
        ("lgat-a", "lgat-a")
    };

    let mut calls = Vec::new();
    for stream in 0..plan.streams {
        let duration = if stream == 0 {
            plan.duration
        } else {
            plan.short_duration()
        };
        let room = format!("bench-{run}-{stream}");
        let deadline = duration + 30.0;
        let peer = |id: String, lgat: &str, offer: bool, seed: u64| {
            let mut a = role_args(
                "peer",
                [
                    arg("--id", id),
                    arg("--lgat", lgat),
                    arg("--signal", &stack.signal_url),
                    arg("--room", &room),
                    arg("--rate", plan.rate),
                    arg("--duration", duration),
                    arg("--warmup", plan.warmup),
                    arg("--seed", seed),
                    arg("--deadline", deadline),
                ],
            );
            if offer {
                a.push("--offer".into());
            }
            a
        };
        let seed = (run as u64) << 16 | (stream as u64) << 1;
        let answerer = Proc::spawn(
            exe,
            &format!("answer-{stream}"),
            &peer(format!("b{stream}"), lgat_b, false, seed | 1),
            READY,
        )
        .await?;
        let offerer = Proc::spawn(
            exe,
            &format!("offer-{stream}"),
            &peer(format!("a{stream}"), lgat_a, true, seed),
            READY,
        )
        .await?;
        calls.push(Call { offerer, answerer });
    }

    let wait = Duration::from_secs_f64(plan.duration + 45.0);
    for call in &mut calls {
        call.offerer.wait(wait).await?;
        call.answerer.wait(wait).await?;
    }
    for s in &mut stack.services {
        s.kill().await;
    }

    let mut streams = Vec::new();
    for (i, call) in calls.iter().enumerate() {
        let stream = i as u32;
        let failed = |reason: String| BenchError::Stream { run, stream, reason };
        let offer = summary_of(&call.offerer).ok_or_else(|| failed("offerer left no summary".into()))?;
        let answer = summary_of(&call.answerer).ok_or_else(|| failed("answerer left no summary".into()))?;
        if let Some(reason) = offer.failure.clone().or(answer.failure.clone()) {
            return Err(failed(reason));
        }
        let sent = (offer.media.sent + answer.media.sent) as f64;
        let lost = (offer.media.lost + answer.media.lost) as f64;
        streams.push(StreamReport {
            stream,
            rtt_mean_ms: offer
                .steady_rtt_mean_ms
                .ok_or_else(|| failed("no round trips measured".into()))?,
            rtt_stddev_ms: offer.steady_rtt_stddev_ms.unwrap_or(0.0),
            jitter_ms: offer.media.jitter_ms,
            loss_fraction: if sent > 0.0 { lost / sent } else { 1.0 },
            stream_setup_ms: offer
                .milestones
                .stream_setup_ms
                .ok_or_else(|| failed("no stream setup".into()))?,
            media_setup_ms: offer
                .milestones
                .media_setup_ms
                .ok_or_else(|| failed("no media setup".into()))?,
        });
    }

    let (concurrent_rtt_ms, solo_rtt_ms) = if calls.len() > 1 {
        concurrency_phases(plan, &calls)
    } else {
        (None, None)
    };
    Ok(RunReport {
        run,
        streams,
        concurrent_rtt_ms,
        solo_rtt_ms,
    })
}

/// Splits the measured stream's per-second RTT into the stretch where every
/// stream was sending and the stretch after the others finished.
fn concurrency_phases(plan: &ExperimentPlan, calls: &[Call]) -> (Option<f64>, Option<f64>) {
    let long = &calls[0].offerer;
    let media_start = calls
        .iter()
        .flat_map(|c| [&c.offerer, &c.answerer])
        .filter_map(|p| p.find("media-setup").and_then(|e| e.ts_ms()))
        .fold(f64::MIN, f64::max);
    let long_start = long.find("stream-setup").and_then(|e| e.ts_ms()).unwrap_or(media_start);
    let short_finish: Vec<f64> = calls[1..]
        .iter()
        .flat_map(|c| [&c.offerer, &c.answerer])
        .filter_map(finished_at)
        .collect();
    if short_finish.is_empty() {
        return (None, None);
    }
    let drain = DRAIN.as_secs_f64() * 1000.0;
    let busy_from = media_start.max(long_start + plan.warmup * 1000.0) + 1000.0;
    let busy_until = short_finish.iter().copied().fold(f64::MAX, f64::min) - drain;
    let quiet_from = short_finish.iter().copied().fold(f64::MIN, f64::max) + 1000.0;
    let quiet_until = finished_at(long).unwrap_or(f64::MAX) - drain;

    let windows: Vec<(f64, f64)> = long
        .events()
        .iter()
        .filter(|e| e.event == "stats")
        .filter_map(|e: &Event| Some((e.ts_ms()?, e.f64("rtt_mean_ms")?)))
        .collect();
    let mut busy: Vec<f64> = windows
        .iter()
        .filter(|(t, _)| *t >= busy_from && *t <= busy_until)
        .map(|(_, v)| *v)
        .collect();
    let mut quiet: Vec<f64> = windows
        .iter()
        .filter(|(t, _)| *t >= quiet_from && *t <= quiet_until)
        .map(|(_, v)| *v)
        .collect();
    (median(&mut busy), median(&mut quiet))
}

/// Runs the plan `runs` times and reduces the trials with medians.
pub async fn run_experiment(exe: &Path, plan: &ExperimentPlan) -> Result<BenchReport, BenchError> {
    plan.validate()?;
    let mut runs = Vec::new();
    for run in 0..plan.runs {
        runs.push(run_once(exe, plan, run).await?);
    }
    Ok(reduce(plan, runs))
}

fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    median(&mut v).unwrap_or(0.0)
}

fn reduce(plan: &ExperimentPlan, runs: Vec<RunReport>) -> BenchReport {
    let measured = || runs.iter().filter_map(|r| r.streams.first());
    let all = || runs.iter().flat_map(|r| &r.streams);
    let concurrent_rtt_ms = {
        let mut v: Vec<f64> = runs.iter().filter_map(|r| r.concurrent_rtt_ms).collect();
        median(&mut v)
    };
    let solo_rtt_ms = {
        let mut v: Vec<f64> = runs.iter().filter_map(|r| r.solo_rtt_ms).collect();
        median(&mut v)
    };
    let per_stream_rtt_delta_ms = match (concurrent_rtt_ms, solo_rtt_ms) {
        (Some(c), Some(s)) if plan.streams > 1 => Some((c - s) / (plan.streams - 1) as f64),
        _ => None,
    };
    BenchReport {
        plan: plan.clone(),
        rtt_mean_ms: median_of(measured().map(|s| s.rtt_mean_ms)),
        rtt_stddev_ms: median_of(measured().map(|s| s.rtt_stddev_ms)),
        jitter_ms: median_of(measured().map(|s| s.jitter_ms)),
        loss_fraction: median_of(all().map(|s| s.loss_fraction)),
        stream_setup_ms: median_of(all().map(|s| s.stream_setup_ms)),
        media_setup_ms: median_of(all().map(|s| s.media_setup_ms)),
        concurrent_rtt_ms,
        solo_rtt_ms,
        per_stream_rtt_delta_ms,
        runs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// Renders reports as pretty JSON (an array) or as a table with one row
/// per report.
pub fn emit_report(reports: &[BenchReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports).expect("reports serialize"),
        ReportFormat::Markdown => markdown(reports),
    }
}

fn markdown(reports: &[BenchReport]) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    let mut out = String::from(
        "| Topology | Streams | RTT (ms) | RTT stddev (ms) | Jitter (ms) | Loss | Stream setup (ms) | Media setup (ms) | RTT per extra stream (ms) |\n\
         |---|---:|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.4} | {:.1} | {:.1} | {} |",
            r.plan.topology.name(),
            r.plan.streams,
            r.rtt_mean_ms,
            r.rtt_stddev_ms,
            r.jitter_ms,
            r.loss_fraction,
            r.stream_setup_ms,
            r.media_setup_ms,
            opt(r.per_stream_rtt_delta_ms),
        );
    }
    out
}
