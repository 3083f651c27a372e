//! Child process supervision for the launcher: spawn a role, collect its
//! event lines and wait for its ready line.

use std::path::Path;
use std::process::{ExitStatus, Stdio};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};
use tokio::sync::Notify;

use crate::events::Event;

/// Set to pass children's stderr through instead of discarding it.
pub const CHILD_STDERR_ENV: &str = "RTCGATE_CHILD_STDERR";

#[derive(Debug, thiserror::Error)]
pub enum ProcError {
    #[error("cannot spawn {name}: {source}")]
    Spawn { name: String, source: std::io::Error },
    #[error("{name} exited before it was ready")]
    Exited { name: String },
    #[error("{name} did not report {event} within {timeout:?}")]
    Timeout {
        name: String,
        event: String,
        timeout: Duration,
    },
}

/// A running child and everything it has logged so far.
pub struct Proc {
    pub name: String,
    child: Child,
    log: Arc<Log>,
    reader: tokio::task::JoinHandle<()>,
}

#[derive(Default)]
struct Log {
    events: Mutex<Vec<Event>>,
    closed: Mutex<bool>,
    changed: Notify,
}

impl Proc {
    /// Spawns `exe args..` and waits for its `ready` event.
    pub async fn spawn(exe: &Path, name: &str, args: &[String], timeout: Duration) -> Result<Proc, ProcError> {
        let stderr = if std::env::var_os(CHILD_STDERR_ENV).is_some() {
            Stdio::inherit()
        } else {
            Stdio::null()
        };
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(stderr)
            .kill_on_drop(true)
            .spawn()
            .map_err(|source| ProcError::Spawn {
                name: name.into(),
                source,
            })?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let log = Arc::new(Log::default());
        let reader = {
            let log = log.clone();
            tokio::spawn(async move {
                let mut lines = BufReader::new(stdout).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    if let Some(event) = Event::parse(&line) {
                        log.events.lock().push(event);
                        log.changed.notify_waiters();
                    }
                }
                *log.closed.lock() = true;
                log.changed.notify_waiters();
            })
        };
        let proc = Proc {
            name: name.into(),
            child,
            log,
            reader,
        };
        proc.wait_for("ready", timeout).await?;
        Ok(proc)
    }

    pub fn events(&self) -> Vec<Event> {
        self.log.events.lock().clone()
    }

    pub fn ready(&self) -> Event {
        self.find("ready").expect("spawned procs are ready")
    }

    pub fn find(&self, event: &str) -> Option<Event> {
        self.log.events.lock().iter().find(|e| e.event == event).cloned()
    }

    pub fn count(&self, event: &str) -> usize {
        self.log.events.lock().iter().filter(|e| e.event == event).count()
    }

    /// Waits until the child has logged `event`, returning the first one.
    pub async fn wait_for(&self, event: &str, timeout: Duration) -> Result<Event, ProcError> {
        self.wait_for_n(event, 1, timeout).await
    }

    /// Waits until the child has logged `event` at least `n` times.
    pub async fn wait_for_n(&self, event: &str, n: usize, timeout: Duration) -> Result<Event, ProcError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.log.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let events = self.log.events.lock();
                let matching = events.iter().filter(|e| e.event == event);
                if let Some(first) = matching.clone().next() {
                    if matching.count() >= n {
                        return Ok(first.clone());
                    }
                }
            }
            if *self.log.closed.lock() {
                return Err(ProcError::Exited {
                    name: self.name.clone(),
                });
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(ProcError::Timeout {
                    name: self.name.clone(),
                    event: event.into(),
                    timeout,
                });
            }
        }
    }

    /// Waits for the child to exit and its output to be drained.
    pub async fn wait(&mut self, timeout: Duration) -> Result<ExitStatus, ProcError> {
        let status = tokio::time::timeout(timeout, self.child.wait())
            .await
            .map_err(|_| ProcError::Timeout {
                name: self.name.clone(),
                event: "exit".into(),
                timeout,
            })?
            .map_err(|source| ProcError::Spawn {
                name: self.name.clone(),
                source,
            })?;
        let _ = tokio::time::timeout(Duration::from_secs(2), &mut self.reader).await;
        Ok(status)
    }

    pub async fn kill(&mut self) {
        let _ = self.child.kill().await;
        let _ = tokio::time::timeout(Duration::from_secs(2), &mut self.reader).await;
    }
}
