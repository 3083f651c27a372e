//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::net::{SocketAddr, SocketAddrV4};
use std::path::PathBuf;
use std::time::Duration;

use rtcgate::tunnel_io::{spawn_writer, FrameReader, FrameSender, Hop};
use rtcgate_core::session::SessionId;
use rtcgate_core::tunnel::{Codec, FrameType, LeaseAnnouncement, TunnelFrame};
use tokio::net::tcp::OwnedReadHalf;
use tokio::net::TcpStream;

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_rtcgate"))
}

/// A hand-driven local gateway: a bare tunnel connection.
pub struct FakeLgat {
    pub id: String,
    pub tx: FrameSender,
    reader: FrameReader<OwnedReadHalf>,
}

impl FakeLgat {
    pub async fn connect(cgat: SocketAddr, id: &str) -> FakeLgat {
        let stream = TcpStream::connect(cgat).await.unwrap();
        stream.set_nodelay(true).unwrap();
        let (read, write) = stream.into_split();
        let (tx, _writer) = spawn_writer(write, Codec::default(), Hop::default());
        tx.send(TunnelFrame::hello(id));
        FakeLgat {
            id: id.into(),
            tx,
            reader: FrameReader::new(read, Codec::default()),
        }
    }

    /// Opens a session owned by this gateway and waits for the ack.
    pub async fn open(&mut self, session: SessionId, peer_lgat: &str) {
        let announcement = LeaseAnnouncement {
            owner_lgat: self.id.clone(),
            peer_lgat: peer_lgat.into(),
            peer_addr: SocketAddrV4::new([127, 0, 0, 1].into(), 9),
            reply: None,
        };
        self.tx
            .send(TunnelFrame::lease(FrameType::LeaseOpen, session, &announcement));
        let ack = self.next_of(FrameType::LeaseOpenAck).await;
        assert_eq!(ack.session_id, session);
    }

    pub async fn next(&mut self, wait: Duration) -> Option<TunnelFrame> {
        tokio::time::timeout(wait, self.reader.next()).await.ok()?.ok()?
    }

    pub async fn next_of(&mut self, frame_type: FrameType) -> TunnelFrame {
        loop {
            let frame = self.next(Duration::from_secs(5)).await.expect("tunnel frame");
            if frame.frame_type == frame_type {
                return frame;
            }
        }
    }

    pub async fn next_data(&mut self, wait: Duration) -> Option<TunnelFrame> {
        loop {
            let frame = self.next(wait).await?;
            if frame.frame_type == FrameType::Data {
                return Some(frame);
            }
        }
    }
}

pub fn session(tag: u8) -> SessionId {
    let mut id = [0u8; 16];
    id[0] = 0x5e;
    id[15] = tag;
    SessionId(id)
}
