use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rtcgate::bench::{emit_report, run_experiment, ExperimentPlan, ReportFormat};
use rtcgate::cgat::{Cgat, CgatOptions};
use rtcgate::config::{env_overrides, load_config, Config, Override};
use rtcgate::demo::{run_demo, DemoOptions};
use rtcgate::events::emit;
use rtcgate::lgat::{Lgat, LgatOptions};
use rtcgate::peer::PeerOptions;
use rtcgate::signal::SignalServer;
use rtcgate::tunnel_io::Hop;
use rtcgate_core::lgat::LgatConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "rtcgate", version, about = "WebRTC firewall-traversal gateway")]
struct Cli {
    /// TOML file with [signal], [cgat], [lgat], [peer] and [bench] sections.
    #[arg(long, global = true, env = "RTCGATE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pubsub signaling server.
    Signal(SignalArgs),
    /// Central gateway.
    Cgat(CgatArgs),
    /// Local gateway.
    Lgat(LgatArgs),
    /// Simulated browser peer.
    Peer(PeerArgs),
    /// Multi-process benchmark.
    Bench(BenchArgs),
    /// Runs every role locally and walks one call through.
    Demo(DemoArgs),
}

/// Collects `Some` flags as dotted config overrides.
macro_rules! overrides {
    ($self:ident, $section:literal: $($field:ident => $key:literal),* $(,)?) => {{
        let mut out: Vec<Override> = Vec::new();
        $(
            if let Some(v) = &$self.$field {
                out.push((concat!($section, ".", $key).to_string(), v.to_string()));
            }
        )*
        out
    }};
}

#[derive(Args)]
struct SignalArgs {
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct CgatArgs {
    /// Tunnel listen address.
    #[arg(long)]
    listen: Option<String>,
    /// Signaling server base URL.
    #[arg(long)]
    signal: Option<String>,
    /// Status endpoint address.
    #[arg(long)]
    status: Option<String>,
    #[arg(long)]
    lease_ttl_ms: Option<u64>,
    /// Append a CRC-32 trailer to data frames.
    #[arg(long)]
    checksum: bool,
    #[arg(long)]
    hop_delay_ms: Option<u64>,
    /// Emulated tunnel link rate, kbit/s.
    #[arg(long)]
    hop_rate_kbps: Option<u64>,
}

#[derive(Args)]
struct LgatArgs {
    #[arg(long)]
    id: Option<String>,
    /// Central gateway address.
    #[arg(long)]
    cgat: Option<String>,
    /// Signaling server base URL, used while the tunnel is down.
    #[arg(long)]
    signal: Option<String>,
    /// Session port range, `lo-hi`.
    #[arg(long)]
    ports: Option<String>,
    /// Connectivity checks to ignore per session before answering.
    #[arg(long)]
    stun_drops: Option<u32>,
    #[arg(long)]
    local_ip: Option<String>,
    #[arg(long)]
    status: Option<String>,
    #[arg(long)]
    lease_ttl_ms: Option<u64>,
    #[arg(long)]
    checksum: bool,
    #[arg(long)]
    hop_delay_ms: Option<u64>,
    #[arg(long)]
    hop_rate_kbps: Option<u64>,
    #[arg(long)]
    local_delay_ms: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PeerArgs {
    #[arg(long)]
    id: Option<String>,
    /// Id of the local gateway this peer sits behind.
    #[arg(long)]
    lgat: Option<String>,
    #[arg(long)]
    signal: Option<String>,
    #[arg(long)]
    room: Option<String>,
    /// Make the offer instead of waiting for one.
    #[arg(long)]
    offer: bool,
    /// Packets per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Seconds of media.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    payload_len: Option<usize>,
    #[arg(long)]
    bind: Option<String>,
    /// Seconds before giving up on the call.
    #[arg(long)]
    deadline: Option<f64>,
    #[arg(long)]
    linger_ms: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// direct, local-gateway or remote-gateway; repeatable.
    #[arg(long)]
    topology: Vec<String>,
    #[arg(long)]
    streams: Option<u32>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    hop_delay_ms: Option<u64>,
    #[arg(long)]
    hop_rate_kbps: Option<u64>,
    #[arg(long)]
    local_delay_ms: Option<u64>,
    #[arg(long)]
    runs: Option<u32>,
    /// JSON report path; a Markdown table is written next to it.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct DemoArgs {
    /// Both peers behind the same local gateway.
    #[arg(long)]
    same_lgat: bool,
    /// Do not start the central gateway.
    #[arg(long)]
    no_cgat: bool,
    #[arg(long, default_value_t = 50)]
    packets: u32,
    #[arg(long, default_value_t = 50.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    hop_delay_ms: u64,
    #[arg(long, default_value_t = rtcgate_core::lgat::DEFAULT_STUN_DROPS)]
    stun_drops: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 42000)]
    port_base: u16,
}

fn flag(on: bool, key: &str) -> Option<Override> {
    on.then(|| (key.to_string(), "true".to_string()))
}

impl Command {
    fn overrides(&self) -> Vec<Override> {
        match self {
            Command::Signal(a) => overrides!(a, "signal": listen => "listen"),
            Command::Cgat(a) => {
                let mut o = overrides!(a, "cgat":
                    listen => "listen", signal => "signal", status => "status",
                    lease_ttl_ms => "lease_ttl_ms", hop_delay_ms => "hop_delay_ms",
                    hop_rate_kbps => "hop_rate_kbps");
                o.extend(flag(a.checksum, "cgat.checksum"));
                o
            }
            Command::Lgat(a) => {
                let mut o = overrides!(a, "lgat":
                    id => "id", cgat => "cgat", signal => "signal", ports => "ports",
                    stun_drops => "stun_drops", local_ip => "local_ip", status => "status",
                    lease_ttl_ms => "lease_ttl_ms", hop_delay_ms => "hop_delay_ms",
                    hop_rate_kbps => "hop_rate_kbps", local_delay_ms => "local_delay_ms", seed => "seed");
                o.extend(flag(a.checksum, "lgat.checksum"));
                o
            }
            Command::Peer(a) => {
                let mut o = overrides!(a, "peer":
                    id => "id", lgat => "lgat", signal => "signal", room => "room",
                    rate => "rate", duration => "duration_s", warmup => "warmup_s", seed => "seed",
                    payload_len => "payload_len", bind => "bind", deadline => "deadline_s",
                    linger_ms => "linger_ms");
                o.extend(flag(a.offer, "peer.offer"));
                o
            }
            Command::Bench(a) => {
                let mut o = overrides!(a, "bench":
                    streams => "streams", rate => "rate", duration => "duration_s",
                    warmup => "warmup_s", hop_delay_ms => "hop_delay_ms", hop_rate_kbps => "hop_rate_kbps",
                    local_delay_ms => "local_delay_ms", runs => "runs", out => "out");
                if let Some(t) = a.topology.first() {
                    o.push(("bench.topology".into(), t.clone()));
                }
                o
            }
            Command::Demo(_) => Vec::new(),
        }
    }
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

fn socket(v: &str) -> SocketAddr {
    v.parse().expect("validated by load_config")
}

async fn wait_for_shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn run_signal(config: &Config) -> anyhow::Result<ExitCode> {
    let server = SignalServer::bind(socket(&config.signal.listen))
        .await
        .context("binding the signal server")?;
    emit("signal", "ready", json!({ "addr": server.addr }));
    tokio::select! {
        _ = wait_for_shutdown() => {}
        _ = server.join() => {}
    }
    Ok(ExitCode::SUCCESS)
}

async fn run_cgat(config: &Config) -> anyhow::Result<ExitCode> {
    let c = &config.cgat;
    let cgat = Cgat::start(CgatOptions {
        listen: socket(&c.listen),
        signal: Some(c.signal.clone()),
        status: socket(&c.status),
        lease_ttl: ms(c.lease_ttl_ms),
        checksum: c.checksum,
        hop: Hop {
            delay: ms(c.hop_delay_ms),
            rate_kbps: c.hop_rate_kbps,
        },
    })
    .await
    .context("starting the central gateway")?;
    emit(
        "cgat",
        "ready",
        json!({ "addr": cgat.addr, "status_addr": cgat.status_addr }),
    );
    wait_for_shutdown().await;
    Ok(ExitCode::SUCCESS)
}

async fn run_lgat(config: &Config) -> anyhow::Result<ExitCode> {
    let l = &config.lgat;
    let mut gateway = LgatConfig::new(&l.id, l.local_ip.parse()?, config.lgat_ports());
    gateway.stun_drop_count = l.stun_drops;
    gateway.lease_ttl = ms(l.lease_ttl_ms);
    let mut options = LgatOptions::new(gateway, &l.cgat);
    options.signal = Some(l.signal.clone());
    options.status = socket(&l.status);
    options.checksum = l.checksum;
    options.hop = Hop {
        delay: ms(l.hop_delay_ms),
        rate_kbps: l.hop_rate_kbps,
    };
    options.local_delay = ms(l.local_delay_ms);
    options.seed = l.seed;
    let lgat = Lgat::start(options).await?;
    emit(
        "lgat",
        "ready",
        json!({ "lgat_id": l.id, "status_addr": lgat.status_addr }),
    );
    wait_for_shutdown().await;
    Ok(ExitCode::SUCCESS)
}

async fn run_peer(config: &Config) -> anyhow::Result<ExitCode> {
    let p = &config.peer;
    let mut options = PeerOptions::new(&p.id, &p.lgat, &p.signal, &p.room);
    options.offer = p.offer;
    options.rate = p.rate;
    options.duration = Duration::from_secs_f64(p.duration_s);
    options.warmup = Duration::from_secs_f64(p.warmup_s);
    options.seed = p.seed;
    options.payload_len = p.payload_len;
    options.bind = p.bind.parse()?;
    options.deadline = Duration::from_secs_f64(p.deadline_s);
    options.linger = ms(p.linger_ms);
    let summary = rtcgate::peer::run(options).await?;
    Ok(if summary.media_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

async fn run_bench(config: &Config, topologies: &[String]) -> anyhow::Result<ExitCode> {
    let b = &config.bench;
    let exe = std::env::current_exe()?;
    let names: Vec<String> = if topologies.is_empty() {
        vec![b.topology.clone()]
    } else {
        topologies.to_vec()
    };
    let mut reports = Vec::new();
    for name in names {
        let mut plan = ExperimentPlan::new(name.parse().map_err(anyhow::Error::msg)?);
        plan.streams = b.streams;
        plan.rate = b.rate;
        plan.duration = b.duration_s;
        plan.warmup = b.warmup_s;
        plan.hop_delay_ms = b.hop_delay_ms;
        plan.hop_rate_kbps = b.hop_rate_kbps;
        plan.local_delay_ms = b.local_delay_ms;
        plan.runs = b.runs;
        let report = run_experiment(&exe, &plan).await?;
        emit("bench", "report", &report);
        reports.push(report);
    }
    let out = PathBuf::from(&b.out);
    std::fs::write(&out, emit_report(&reports, ReportFormat::Json))
        .with_context(|| format!("writing {}", out.display()))?;
    let table = emit_report(&reports, ReportFormat::Markdown);
    std::fs::write(out.with_extension("md"), &table)?;
    eprint!("{table}");
    Ok(ExitCode::SUCCESS)
}

async fn run_demo_command(a: &DemoArgs) -> anyhow::Result<ExitCode> {
    let options = DemoOptions {
        same_lgat: a.same_lgat,
        without_cgat: a.no_cgat,
        packets: a.packets,
        rate: a.rate,
        hop_delay_ms: a.hop_delay_ms,
        stun_drops: a.stun_drops,
        seed: a.seed,
        port_base: a.port_base,
        ..DemoOptions::default()
    };
    let outcome = run_demo(&std::env::current_exe()?, &options).await?;
    print!("{}", outcome.sequence_diagram());
    for m in &outcome.milestones {
        match m.at_ms {
            Some(t) => println!("{:<7} {:<13} {t:>9.1} ms", m.peer, m.name),
            None => println!("{:<7} {:<13} {:>9}", m.peer, m.name, "missed"),
        }
    }
    for s in &outcome.peers {
        println!(
            "{}: mode={} sent={} received={} lost={} rtt_median_ms={}",
            s.peer_id,
            s.mode.as_deref().unwrap_or("-"),
            s.media.sent,
            s.media.received,
            s.media.lost,
            s.media.rtt_median_ms.map_or("-".into(), |v| format!("{v:.2}")),
        );
    }
    if let Some(failure) = &outcome.failure {
        println!("failed: {failure}");
    }
    Ok(if outcome.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let env = env_overrides(std::env::vars());
    let config = match load_config(cli.config.as_deref(), &env, &cli.command.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Signal(_) => run_signal(&config).await,
        Command::Cgat(_) => run_cgat(&config).await,
        Command::Lgat(_) => run_lgat(&config).await,
        Command::Peer(_) => run_peer(&config).await,
        Command::Bench(a) => run_bench(&config, &a.topology).await,
        Command::Demo(a) => run_demo_command(a).await,
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
