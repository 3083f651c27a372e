//! Layered configuration: built-in defaults, then a TOML file, then
//! `RTCGATE_<SECTION>_<KEY>` environment variables, then command-line flags.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::lgat::parse_port_range;

pub const ENV_PREFIX: &str = "RTCGATE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("invalid address for `{key}`: {value:?}")]
    InvalidAddress { key: String, value: String },
}

impl ConfigError {
    /// The dotted key the error is about, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(key) => Some(key),
            ConfigError::InvalidValue { key, .. } | ConfigError::InvalidAddress { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub signal: SignalSection,
    pub cgat: CgatSection,
    pub lgat: LgatSection,
    pub peer: PeerSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    pub listen: String,
}

impl Default for SignalSection {
    fn default() -> Self {
        SignalSection {
            listen: "127.0.0.1:8000".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgatSection {
    pub listen: String,
    /// Base URL of the signaling server.
    pub signal: String,
    pub status: String,
    pub lease_ttl_ms: u64,
    pub checksum: bool,
    pub hop_delay_ms: u64,
    /// Emulated tunnel link rate; 0 is unlimited.
    pub hop_rate_kbps: u64,
}

impl Default for CgatSection {
    fn default() -> Self {
        CgatSection {
            listen: "127.0.0.1:8080".into(),
            signal: "http://127.0.0.1:8000".into(),
            status: "127.0.0.1:0".into(),
            lease_ttl_ms: 30_000,
            checksum: false,
            hop_delay_ms: 0,
            hop_rate_kbps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgatSection {
    pub id: String,
    pub cgat: String,
    pub signal: String,
    pub ports: String,
    pub stun_drops: u32,
    /// Address handed to peers in allocate replies.
    pub local_ip: String,
    pub status: String,
    pub lease_ttl_ms: u64,
    pub checksum: bool,
    pub hop_delay_ms: u64,
    pub hop_rate_kbps: u64,
    pub local_delay_ms: u64,
    pub seed: u64,
}

impl Default for LgatSection {
    fn default() -> Self {
        LgatSection {
            id: "lgat-a".into(),
            cgat: "127.0.0.1:8080".into(),
            signal: "http://127.0.0.1:8000".into(),
            ports: "50000-50999".into(),
            stun_drops: rtcgate_core::lgat::DEFAULT_STUN_DROPS,
            local_ip: "127.0.0.1".into(),
            status: "127.0.0.1:0".into(),
            lease_ttl_ms: 30_000,
            checksum: false,
            hop_delay_ms: 0,
            hop_rate_kbps: 0,
            local_delay_ms: 0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeerSection {
    pub id: String,
    pub lgat: String,
    pub signal: String,
    pub room: String,
    pub offer: bool,
    pub rate: f64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub seed: u64,
    pub payload_len: usize,
    pub bind: String,
    pub deadline_s: f64,
    pub linger_ms: u64,
}

impl Default for PeerSection {
    fn default() -> Self {
        PeerSection {
            id: "peer-a".into(),
            lgat: "lgat-a".into(),
            signal: "http://127.0.0.1:8000".into(),
            room: "room".into(),
            offer: false,
            rate: 50.0,
            duration_s: 10.0,
            warmup_s: 0.0,
            seed: 1,
            payload_len: 160,
            bind: "127.0.0.1".into(),
            deadline_s: 60.0,
            linger_ms: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub topology: String,
    pub streams: u32,
    pub rate: f64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub hop_delay_ms: u64,
    pub hop_rate_kbps: u64,
    pub local_delay_ms: u64,
    pub runs: u32,
    pub out: String,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            topology: "local-gateway".into(),
            streams: 1,
            rate: 50.0,
            duration_s: 60.0,
            warmup_s: 10.0,
            hop_delay_ms: 0,
            hop_rate_kbps: 0,
            local_delay_ms: 5,
            runs: 5,
            out: "bench.json".into(),
        }
    }
}

impl Config {
    pub fn lgat_ports(&self) -> (u16, u16) {
        parse_port_range(&self.lgat.ports).unwrap_or((50000, 50999))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        socket_addr("signal.listen", &self.signal.listen)?;
        socket_addr("cgat.listen", &self.cgat.listen)?;
        socket_addr("cgat.status", &self.cgat.status)?;
        url("cgat.signal", &self.cgat.signal)?;
        host_port("lgat.cgat", &self.lgat.cgat)?;
        url("lgat.signal", &self.lgat.signal)?;
        socket_addr("lgat.status", &self.lgat.status)?;
        ipv4("lgat.local_ip", &self.lgat.local_ip)?;
        url("peer.signal", &self.peer.signal)?;
        ipv4("peer.bind", &self.peer.bind)?;

        let (lo, hi) = parse_port_range(&self.lgat.ports).map_err(|message| invalid("lgat.ports", message))?;
        if lo > hi || lo < 1024 {
            return Err(invalid(
                "lgat.ports",
                format!("{lo}-{hi} is not a range of unprivileged ports"),
            ));
        }
        if self.lgat.id.is_empty() {
            return Err(invalid("lgat.id", "must not be empty"));
        }
        if !(self.peer.rate > 0.0 && self.peer.rate.is_finite()) {
            return Err(invalid("peer.rate", "must be positive"));
        }
        if !(self.peer.duration_s > 0.0 && self.peer.duration_s.is_finite()) {
            return Err(invalid("peer.duration_s", "must be positive"));
        }
        if !["direct", "local-gateway", "remote-gateway"].contains(&self.bench.topology.as_str()) {
            return Err(invalid(
                "bench.topology",
                "expected direct, local-gateway or remote-gateway",
            ));
        }
        if self.bench.streams == 0 {
            return Err(invalid("bench.streams", "must be at least 1"));
        }
        if self.bench.runs == 0 {
            return Err(invalid("bench.runs", "must be at least 1"));
        }
        if !(self.bench.rate > 0.0 && self.bench.rate.is_finite()) {
            return Err(invalid("bench.rate", "must be positive"));
        }
        if !(self.bench.duration_s > self.bench.warmup_s && self.bench.warmup_s >= 0.0) {
            return Err(invalid("bench.duration_s", "must exceed bench.warmup_s"));
        }
        Ok(())
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        message: message.into(),
    }
}

fn bad_address(key: &str, value: &str) -> ConfigError {
    ConfigError::InvalidAddress {
        key: key.into(),
        value: value.into(),
    }
}

fn socket_addr(key: &str, value: &str) -> Result<SocketAddr, ConfigError> {
    value.parse().map_err(|_| bad_address(key, value))
}

fn ipv4(key: &str, value: &str) -> Result<Ipv4Addr, ConfigError> {
    value.parse().map_err(|_| bad_address(key, value))
}

/// `host:port` where the host may be a name.
fn host_port(key: &str, value: &str) -> Result<(), ConfigError> {
    if value.parse::<SocketAddr>().is_ok() {
        return Ok(());
    }
    match value.rsplit_once(':') {
        Some((host, port))
            if !host.is_empty()
                && port.parse::<u16>().is_ok()
                && host.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.') =>
        {
            Ok(())
        }
        _ => Err(bad_address(key, value)),
    }
}

fn url(key: &str, value: &str) -> Result<(), ConfigError> {
    let rest = value.strip_prefix("http://").ok_or_else(|| bad_address(key, value))?;
    host_port(key, rest.trim_end_matches('/')).map_err(|_| bad_address(key, value))
}

/// One override from the environment or the command line, as a dotted key
/// and its raw text.
pub type Override = (String, String);

/// Environment variables under the prefix, mapped to dotted keys:
/// `RTCGATE_LGAT_STUN_DROPS` becomes `lgat.stun_drops`. Variables whose
/// section is unknown are left alone.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let sections = Table::try_from(Config::default()).expect("defaults serialize");
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(name, value)| {
            let rest = name.strip_prefix(ENV_PREFIX)?;
            let (section, key) = rest.split_once('_')?;
            let section = section.to_ascii_lowercase();
            sections
                .contains_key(&section)
                .then(|| (format!("{section}.{}", key.to_ascii_lowercase()), value))
        })
        .collect();
    out.sort();
    out
}

/// Merges the layers and validates the result. Later layers win: defaults,
/// then the file, then `env`, then `flags`.
pub fn load_config(path: Option<&Path>, env: &[Override], flags: &[Override]) -> Result<Config, ConfigError> {
    let defaults = Table::try_from(Config::default()).expect("defaults serialize");
    let mut merged = defaults.clone();

    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: path.display().to_string(),
            message: e.message().to_string(),
        })?;
        merge_file(&mut merged, &defaults, file)?;
    }
    for (key, raw) in env.iter().chain(flags) {
        set(&mut merged, &defaults, key, raw)?;
    }

    let config: Config =
        serde_path_to_error::deserialize(Value::Table(merged)).map_err(|e| ConfigError::InvalidValue {
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
    config.validate()?;
    Ok(config)
}

fn merge_file(merged: &mut Table, defaults: &Table, file: Table) -> Result<(), ConfigError> {
    for (section, value) in file {
        let Some(Value::Table(known)) = defaults.get(&section) else {
            return Err(ConfigError::UnknownKey(section));
        };
        let Value::Table(entries) = value else {
            return Err(invalid(&section, "expected a table"));
        };
        for (key, value) in entries {
            if !known.contains_key(&key) {
                return Err(ConfigError::UnknownKey(format!("{section}.{key}")));
            }
            if let Some(Value::Table(target)) = merged.get_mut(&section) {
                target.insert(key, value);
            }
        }
    }
    Ok(())
}

/// Sets one dotted key from raw text, typed after the default's value.
fn set(merged: &mut Table, defaults: &Table, dotted: &str, raw: &str) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownKey(dotted.to_string());
    let (section, key) = dotted.split_once('.').ok_or_else(unknown)?;
    let default = defaults
        .get(section)
        .and_then(Value::as_table)
        .and_then(|t| t.get(key))
        .ok_or_else(unknown)?;
    let value = match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Integer(_) => Value::Integer(
            raw.trim()
                .parse()
                .map_err(|_| invalid(dotted, format!("{raw:?} is not an integer")))?,
        ),
        Value::Float(_) => Value::Float(
            raw.trim()
                .parse()
                .map_err(|_| invalid(dotted, format!("{raw:?} is not a number")))?,
        ),
        Value::Boolean(_) => Value::Boolean(match raw.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(invalid(dotted, format!("{raw:?} is not a boolean"))),
        }),
        _ => return Err(unknown()),
    };
    if let Some(Value::Table(target)) = merged.get_mut(section) {
        target.insert(key.to_string(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn flag(key: &str, value: &str) -> Override {
        (key.into(), value.into())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = file("");
        assert_eq!(load_config(Some(f.path()), &[], &[]).unwrap(), Config::default());
        assert_eq!(load_config(None, &[], &[]).unwrap(), Config::default());
    }

    #[test]
    fn flag_beats_env_beats_file() {
        let f = file("[lgat]\nstun_drops = 5\nid = \"from-file\"\n[bench]\nruns = 9\n");
        let env = env_overrides([
            ("RTCGATE_LGAT_STUN_DROPS".to_string(), "6".to_string()),
            ("RTCGATE_LGAT_ID".to_string(), "7".to_string()),
            ("RTCGATE_LOG".to_string(), "debug".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ]);
        assert_eq!(env.len(), 2);
        let c = load_config(Some(f.path()), &env, &[flag("lgat.stun_drops", "0")]).unwrap();
        assert_eq!(c.lgat.stun_drops, 0);
        assert_eq!(c.lgat.id, "7");
        assert_eq!(c.bench.runs, 9);
        let c = load_config(Some(f.path()), &[], &[]).unwrap();
        assert_eq!((c.lgat.stun_drops, c.lgat.id.as_str()), (5, "from-file"));
    }

    #[test]
    fn malformed_address_names_the_key() {
        let f = file("[cgat]\nlisten = \"127.0.0.1:80800\"\n");
        let err = load_config(Some(f.path()), &[], &[]).unwrap_err();
        assert!(
            matches!(&err, ConfigError::InvalidAddress { key, .. } if key == "cgat.listen"),
            "{err}"
        );
        let err = load_config(None, &[], &[flag("lgat.cgat", "nowhere")]).unwrap_err();
        assert_eq!(err.key(), Some("lgat.cgat"));
        let err = load_config(None, &[], &[flag("peer.signal", "ftp://x:1")]).unwrap_err();
        assert_eq!(err.key(), Some("peer.signal"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = file("[lgat]\nstun_drop = 2\n");
        let err = load_config(Some(f.path()), &[], &[]).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "lgat.stun_drop"));
        let f = file("[turn]\nx = 1\n");
        assert!(matches!(load_config(Some(f.path()), &[], &[]), Err(ConfigError::UnknownKey(k)) if k == "turn"));
        let env = env_overrides([("RTCGATE_CGAT_LISTN".to_string(), "x".to_string())]);
        assert!(matches!(load_config(None, &env, &[]), Err(ConfigError::UnknownKey(k)) if k == "cgat.listn"));
    }

    #[test]
    fn type_errors_name_the_key() {
        let f = file("[bench]\nstreams = \"four\"\n");
        let err = load_config(Some(f.path()), &[], &[]).unwrap_err();
        assert_eq!(err.key(), Some("bench.streams"), "{err}");
        let err = load_config(None, &[], &[flag("peer.offer", "perhaps")]).unwrap_err();
        assert_eq!(err.key(), Some("peer.offer"));
        let f = file("[lgat\n");
        assert!(matches!(
            load_config(Some(f.path()), &[], &[]),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn semantic_checks_name_the_key() {
        assert_eq!(
            load_config(None, &[], &[flag("lgat.ports", "9-5")]).unwrap_err().key(),
            Some("lgat.ports")
        );
        assert_eq!(
            load_config(None, &[], &[flag("bench.topology", "mesh")])
                .unwrap_err()
                .key(),
            Some("bench.topology")
        );
        assert_eq!(
            load_config(None, &[], &[flag("bench.streams", "0")]).unwrap_err().key(),
            Some("bench.streams")
        );
    }
}
