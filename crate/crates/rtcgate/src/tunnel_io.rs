//! Tunnel frames over a TCP stream: a reader built on the sans-IO decoder and
//! a writer task that owns the write half, optionally holding every frame
//! back by a fixed hop delay.

use std::io;
use std::time::Duration;

use rtcgate_core::tunnel::{Codec, FrameDecoder, TunnelFrame};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;
use tokio::time::Instant;

pub struct FrameReader<R> {
    inner: R,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl<R: AsyncRead + Unpin> FrameReader<R> {
    pub fn new(inner: R, codec: Codec) -> Self {
        FrameReader {
            inner,
            decoder: FrameDecoder::new(codec),
            buf: vec![0; 64 * 1024],
        }
    }

    /// The next frame, or `None` once the peer closed cleanly between frames.
    pub async fn next(&mut self) -> io::Result<Option<TunnelFrame>> {
        loop {
            match self.decoder.next_frame() {
                Ok(Some(frame)) => return Ok(Some(frame)),
                Ok(None) => {}
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
            }
            let n = self.inner.read(&mut self.buf).await?;
            if n == 0 {
                return if self.decoder.pending() == 0 {
                    Ok(None)
                } else {
                    Err(io::ErrorKind::UnexpectedEof.into())
                };
            }
            self.decoder.extend(&self.buf[..n]);
        }
    }
}

/// Sending side of a connection's writer task. Dropping every clone closes
/// the write half once queued frames are flushed.
#[derive(Debug, Clone)]
pub struct FrameSender {
    tx: mpsc::UnboundedSender<(Instant, TunnelFrame)>,
}

impl FrameSender {
    /// Queues a frame; false once the connection is gone.
    pub fn send(&self, frame: TunnelFrame) -> bool {
        self.tx.send((Instant::now(), frame)).is_ok()
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }
}

/// Network emulation on one direction of a tunnel hop: a fixed one-way
/// delay and, optionally, a link rate that frames queue for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hop {
    pub delay: Duration,
    /// Link rate in kbit/s; 0 leaves the rate unlimited.
    pub rate_kbps: u64,
}

impl Hop {
    pub fn delay(delay: Duration) -> Self {
        Hop { delay, rate_kbps: 0 }
    }

    fn is_transparent(&self) -> bool {
        self.delay.is_zero() && self.rate_kbps == 0
    }
}

/// Departure times on an emulated link. A frame starts transmitting once it
/// is queued and the link is free, occupies the link for its serialization
/// time and arrives `delay` after it finished.
#[derive(Debug)]
struct Link {
    hop: Hop,
    free_at: Option<Instant>,
}

impl Link {
    fn due(&mut self, queued: Instant, len: usize) -> Instant {
        if self.hop.rate_kbps == 0 {
            return queued + self.hop.delay;
        }
        let start = self.free_at.map_or(queued, |f| f.max(queued));
        let done = start + Duration::from_secs_f64(len as f64 * 8.0 / (self.hop.rate_kbps as f64 * 1000.0));
        self.free_at = Some(done);
        done + self.hop.delay
    }
}

/// Spawns the writer task. Frames leave in order, each no earlier than the
/// hop emulation allows.
pub fn spawn_writer<W>(mut out: W, codec: Codec, hop: Hop) -> (FrameSender, tokio::task::JoinHandle<io::Result<()>>)
where
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, TunnelFrame)>();
    let task = tokio::spawn(async move {
        let mut link = Link { hop, free_at: None };
        let mut buf = Vec::with_capacity(64 * 1024);
        let mut frame_buf = Vec::with_capacity(2048);
        while let Some((queued, frame)) = rx.recv().await {
            buf.clear();
            if hop.is_transparent() {
                encode(&codec, &frame, &mut buf);
                // Batch whatever else is already waiting.
                while buf.len() < 60 * 1024 {
                    match rx.try_recv() {
                        Ok((_, frame)) => encode(&codec, &frame, &mut buf),
                        Err(_) => break,
                    }
                }
            } else {
                frame_buf.clear();
                encode(&codec, &frame, &mut frame_buf);
                tokio::time::sleep_until(link.due(queued, frame_buf.len())).await;
                buf.extend_from_slice(&frame_buf);
            }
            out.write_all(&buf).await?;
        }
        out.shutdown().await
    });
    (FrameSender { tx }, task)
}

fn encode(codec: &Codec, frame: &TunnelFrame, buf: &mut Vec<u8>) {
    if let Err(e) = codec.encode_into(frame, buf) {
        tracing::warn!(error = %e, "dropping unencodable frame");
    }
}
