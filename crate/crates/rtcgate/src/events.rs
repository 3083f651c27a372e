//! Machine-readable event lines on stdout. Human diagnostics go through
//! `tracing` to stderr so the two never interleave.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{Map, Value};

/// Wall-clock milliseconds with microsecond resolution, comparable across
/// processes on one host.
pub fn unix_ms() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as f64 / 1000.0)
        .unwrap_or(0.0)
}

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Turns event lines off for this process, for embedding the roles in a
/// host that owns stdout.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

/// Writes `{"ts_ms":..,"role":..,"event":..,<fields>}` as one line.
pub fn emit(role: &str, event: &str, fields: impl Serialize) {
    if !ENABLED.load(Ordering::Relaxed) {
        return;
    }
    let mut line = Map::new();
    line.insert("ts_ms".into(), unix_ms().into());
    line.insert("role".into(), role.into());
    line.insert("event".into(), event.into());
    match serde_json::to_value(fields) {
        Ok(Value::Object(extra)) => line.extend(extra),
        Ok(Value::Null) => {}
        Ok(other) => {
            line.insert("data".into(), other);
        }
        Err(e) => {
            line.insert("encode_error".into(), e.to_string().into());
        }
    }
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer(&mut out, &Value::Object(line));
    let _ = out.write_all(b"\n");
    let _ = out.flush();
}

/// Parsed form of an event line, used by the launcher.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub role: String,
    pub event: String,
    pub fields: Map<String, Value>,
}

impl Event {
    pub fn parse(line: &str) -> Option<Event> {
        let Value::Object(mut fields) = serde_json::from_str(line).ok()? else {
            return None;
        };
        let role = fields.remove("role")?.as_str()?.to_string();
        let event = fields.remove("event")?.as_str()?.to_string();
        Some(Event { role, event, fields })
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.fields.get(key).and_then(Value::as_str)
    }

    pub fn ts_ms(&self) -> Option<f64> {
        self.fields.get("ts_ms").and_then(Value::as_f64)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.fields.get(key).and_then(Value::as_f64)
    }
}
