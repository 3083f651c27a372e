use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MEDIA_HEADER_LEN: usize = 12;
pub const MEDIA_PAYLOAD_TYPE: u8 = 96;
/// Header-only packet a peer repeats until it hears from the far end.
pub const PROBE_PAYLOAD_TYPE: u8 = 97;
const VERSION_BYTE: u8 = 0x80;
const MARKER: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MediaError {
    #[error("datagram shorter than a media header")]
    Short,
    #[error("not a media packet")]
    NotMedia,
}

/// RTP-shaped test packet. The marker bit flags a packet echoed back to its
/// sender for round-trip measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaPacket {
    pub seq: u16,
    pub timestamp_ms: u32,
    pub ssrc: u32,
    pub reflected: bool,
    pub payload: Vec<u8>,
}

impl MediaPacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MEDIA_HEADER_LEN + self.payload.len());
        out.push(VERSION_BYTE);
        out.push(if self.reflected { MARKER } else { 0 } | MEDIA_PAYLOAD_TYPE);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.extend_from_slice(&self.ssrc.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(datagram: &[u8]) -> Result<Self, MediaError> {
        if datagram.len() < MEDIA_HEADER_LEN {
            return Err(MediaError::Short);
        }
        if datagram[0] != VERSION_BYTE || datagram[1] & !MARKER != MEDIA_PAYLOAD_TYPE {
            return Err(MediaError::NotMedia);
        }
        Ok(MediaPacket {
            seq: u16::from_be_bytes([datagram[2], datagram[3]]),
            timestamp_ms: u32::from_be_bytes(datagram[4..8].try_into().unwrap()),
            ssrc: u32::from_be_bytes(datagram[8..12].try_into().unwrap()),
            reflected: datagram[1] & MARKER != 0,
            payload: datagram[MEDIA_HEADER_LEN..].to_vec(),
        })
    }

    /// The same datagram with the marker bit set.
    pub fn reflect(datagram: &[u8]) -> Option<Vec<u8>> {
        let packet = MediaPacket::decode(datagram).ok()?;
        if packet.reflected {
            return None;
        }
        let mut out = datagram.to_vec();
        out[1] |= MARKER;
        Some(out)
    }
}

pub fn probe(ssrc: u32) -> Vec<u8> {
    let mut out = MediaPacket {
        seq: 0,
        timestamp_ms: 0,
        ssrc,
        reflected: false,
        payload: Vec::new(),
    }
    .encode();
    out[1] = PROBE_PAYLOAD_TYPE;
    out
}

pub fn is_probe(datagram: &[u8]) -> bool {
    datagram.len() == MEDIA_HEADER_LEN && datagram[0] == VERSION_BYTE && datagram[1] == PROBE_PAYLOAD_TYPE
}

/// The `index`-th packet of a stream. Content depends only on the arguments,
/// so a receiver can rebuild what the sender put on the wire.
pub fn media_datagram(ssrc: u32, index: u32, interval: Duration, payload_len: usize) -> Vec<u8> {
    let mut state = ssrc ^ index.wrapping_mul(0x9E37_79B9);
    let payload = (0..payload_len)
        .map(|_| {
            // xorshift32
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            state as u8
        })
        .collect();
    MediaPacket {
        seq: index as u16,
        timestamp_ms: (u128::from(index) * interval.as_millis()) as u32,
        ssrc,
        reflected: false,
        payload,
    }
    .encode()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub bucket: u64,
    pub samples: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub sent: u64,
    pub received: u64,
    pub reflections: u64,
    pub lost: u64,
    pub corrupted: u64,
    pub rtt_median_ms: Option<f64>,
    pub rtt_mean_ms: Option<f64>,
    pub jitter_ms: f64,
    /// From stream start until the first packet was sent.
    pub first_sent_ms: Option<f64>,
    /// From stream start until the first packet from the far end arrived.
    pub first_received_ms: Option<f64>,
}

/// Per-stream accounting on one peer: what it sent, what the far end sent
/// and what came back reflected.
#[derive(Debug, Clone)]
pub struct MediaStats {
    ssrc: u32,
    interval: Duration,
    origin: Duration,
    sent: u64,
    send_times: BTreeMap<u16, Duration>,
    first_sent: Option<Duration>,
    first_received: Option<Duration>,
    rtt: Vec<(Duration, Duration)>,
    received: u64,
    corrupted: u64,
    base_ext: Option<i64>,
    max_ext: i64,
    last_transit_ms: Option<f64>,
    jitter_ms: f64,
}

impl MediaStats {
    pub fn new(ssrc: u32, interval: Duration, origin: Duration) -> Self {
        MediaStats {
            ssrc,
            interval,
            origin,
            sent: 0,
            send_times: BTreeMap::new(),
            first_sent: None,
            first_received: None,
            rtt: Vec::new(),
            received: 0,
            corrupted: 0,
            base_ext: None,
            max_ext: 0,
            last_transit_ms: None,
            jitter_ms: 0.0,
        }
    }

    pub fn ssrc(&self) -> u32 {
        self.ssrc
    }

    pub fn next_index(&self) -> u32 {
        self.sent as u32
    }

    pub fn record_sent(&mut self, index: u32, now: Duration) {
        self.sent += 1;
        self.first_sent.get_or_insert(now);
        self.send_times.insert(index as u16, now);
        // Anything this old will never come back.
        if self.send_times.len() > 4096 {
            let oldest = *self.send_times.keys().next().unwrap();
            self.send_times.remove(&oldest);
        }
    }

    /// Accounts an incoming media datagram. Returns the reflection to send
    /// back for packets from the far end, `None` for our own echoes.
    pub fn record_received(&mut self, datagram: &[u8], now: Duration) -> Result<Option<Vec<u8>>, MediaError> {
        let packet = MediaPacket::decode(datagram)?;
        if packet.reflected {
            if packet.ssrc == self.ssrc {
                if let Some(sent_at) = self.send_times.remove(&packet.seq) {
                    self.rtt.push((now, now.saturating_sub(sent_at)));
                }
            }
            return Ok(None);
        }

        self.received += 1;
        self.first_received.get_or_insert(now);
        let ext = self.extend_seq(packet.seq);
        let expected = media_datagram(packet.ssrc, ext as u32, self.interval, packet.payload.len());
        if expected != datagram {
            self.corrupted += 1;
        }

        // RFC 3550 interarrival jitter, in milliseconds.
        let arrival_ms = now.as_secs_f64() * 1000.0;
        let transit = arrival_ms - f64::from(packet.timestamp_ms);
        if let Some(last) = self.last_transit_ms {
            let d = (transit - last).abs();
            self.jitter_ms += (d - self.jitter_ms) / 16.0;
        }
        self.last_transit_ms = Some(transit);

        Ok(MediaPacket::reflect(datagram))
    }

    fn extend_seq(&mut self, seq: u16) -> i64 {
        let Some(_) = self.base_ext else {
            self.base_ext = Some(i64::from(seq));
            self.max_ext = i64::from(seq);
            return self.max_ext;
        };
        let delta = i64::from(seq.wrapping_sub(self.max_ext as u16) as i16);
        let ext = self.max_ext + delta;
        self.max_ext = self.max_ext.max(ext);
        ext
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn rtt_samples(&self) -> impl Iterator<Item = Duration> + '_ {
        self.rtt.iter().map(|(_, rtt)| *rtt)
    }

    /// Round trips sampled at or after `since`.
    pub fn rtt_since(&self, since: Duration) -> impl Iterator<Item = Duration> + '_ {
        self.rtt.iter().filter(move |(at, _)| *at >= since).map(|(_, rtt)| *rtt)
    }

    pub fn lost(&self) -> u64 {
        let Some(base) = self.base_ext else { return 0 };
        let expected = (self.max_ext - base + 1) as u64;
        expected.saturating_sub(self.received)
    }

    pub fn per_second(&self) -> Vec<Aggregate> {
        self.aggregate(Duration::from_secs(1))
    }

    pub fn per_minute(&self) -> Vec<Aggregate> {
        self.aggregate(Duration::from_secs(60))
    }

    fn aggregate(&self, width: Duration) -> Vec<Aggregate> {
        let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (at, rtt) in &self.rtt {
            let bucket = (at.saturating_sub(self.origin).as_nanos() / width.as_nanos()) as u64;
            buckets.entry(bucket).or_default().push(ms(*rtt));
        }
        buckets
            .into_iter()
            .map(|(bucket, values)| Aggregate {
                bucket,
                samples: values.len(),
                mean_ms: values.iter().sum::<f64>() / values.len() as f64,
                min_ms: values.iter().copied().fold(f64::INFINITY, f64::min),
                max_ms: values.iter().copied().fold(0.0, f64::max),
            })
            .collect()
    }

    pub fn summary(&self) -> StatsSummary {
        let mut rtts: Vec<f64> = self.rtt_samples().map(ms).collect();
        StatsSummary {
            sent: self.sent,
            received: self.received,
            reflections: self.rtt.len() as u64,
            lost: self.lost(),
            corrupted: self.corrupted,
            rtt_median_ms: median(&mut rtts),
            rtt_mean_ms: (!rtts.is_empty()).then(|| rtts.iter().sum::<f64>() / rtts.len() as f64),
            jitter_ms: self.jitter_ms,
            first_sent_ms: self.first_sent.map(|t| ms(t.saturating_sub(self.origin))),
            first_received_ms: self.first_received.map(|t| ms(t.saturating_sub(self.origin))),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Median of the values; the mean of the middle two for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const IV: Duration = Duration::from_millis(20);

    #[test]
    fn packet_round_trip_and_reflection() {
        let bytes = media_datagram(7, 3, IV, 40);
        let p = MediaPacket::decode(&bytes).unwrap();
        assert_eq!(
            (p.seq, p.timestamp_ms, p.ssrc, p.reflected, p.payload.len()),
            (3, 60, 7, false, 40)
        );
        assert_eq!(p.encode(), bytes);
        let r = MediaPacket::reflect(&bytes).unwrap();
        assert!(MediaPacket::decode(&r).unwrap().reflected);
        assert_eq!(r[2..], bytes[2..]);
        assert!(MediaPacket::reflect(&r).is_none());
        assert!(!crate::stun::peek_is_stun(&bytes));
        assert!(is_probe(&probe(7)) && !is_probe(&bytes));
        assert_eq!(MediaPacket::decode(&probe(7)), Err(MediaError::NotMedia));
    }

    #[test]
    fn rejects_other_traffic() {
        assert_eq!(MediaPacket::decode(&[0x80; 4]), Err(MediaError::Short));
        assert_eq!(MediaPacket::decode(&[0u8; 20]), Err(MediaError::NotMedia));
    }

    #[test]
    fn rtt_from_reflections() {
        let t0 = Duration::from_secs(1);
        let mut a = MediaStats::new(1, IV, t0);
        let mut b = MediaStats::new(2, IV, t0);
        let d = media_datagram(1, 0, IV, 10);
        a.record_sent(0, t0);
        let echo = b.record_received(&d, t0 + Duration::from_millis(5)).unwrap().unwrap();
        assert_eq!(
            a.record_received(&echo, t0 + Duration::from_micros(10_250)).unwrap(),
            None
        );
        assert_eq!(a.rtt_samples().collect::<Vec<_>>(), vec![Duration::from_micros(10_250)]);
        assert_eq!(b.summary().first_received_ms, Some(5.0));
        assert_eq!(b.summary().corrupted, 0);
    }

    #[test]
    fn jitter_follows_rfc3550_recurrence() {
        let mut s = MediaStats::new(9, IV, Duration::ZERO);
        // Transit times 10, 14, 10 ms: D = 4 then 4.
        for (i, delay) in [10u64, 14, 10].iter().enumerate() {
            let at = Duration::from_millis(i as u64 * 20 + delay);
            s.record_received(&media_datagram(1, i as u32, IV, 8), at).unwrap();
        }
        let j1 = 4.0 / 16.0;
        let j2 = j1 + (4.0 - j1) / 16.0;
        assert!((s.summary().jitter_ms - j2).abs() < 1e-9);
    }

    #[test]
    fn loss_uses_extended_sequence() {
        let mut s = MediaStats::new(9, IV, Duration::ZERO);
        for i in (65530u32..65545).filter(|i| i % 5 != 0) {
            s.record_received(&media_datagram(1, i, IV, 8), Duration::ZERO).unwrap();
        }
        assert_eq!(s.lost(), 2);
        assert_eq!(s.received(), 12);
    }

    #[test]
    fn corruption_is_detected() {
        let mut s = MediaStats::new(9, IV, Duration::ZERO);
        let mut d = media_datagram(1, 0, IV, 8);
        d[15] ^= 1;
        s.record_received(&d, Duration::ZERO).unwrap();
        assert_eq!(s.summary().corrupted, 1);
    }

    #[test]
    fn per_second_buckets() {
        let mut s = MediaStats::new(1, IV, Duration::ZERO);
        for i in 0..4u32 {
            let sent = Duration::from_millis(u64::from(i) * 600);
            s.record_sent(i, sent);
            let mut echo = media_datagram(1, i, IV, 4);
            echo[1] |= 0x80;
            s.record_received(&echo, sent + Duration::from_millis(u64::from(i) + 1))
                .unwrap();
        }
        let buckets = s.per_second();
        assert_eq!(
            buckets.iter().map(|b| (b.bucket, b.samples)).collect::<Vec<_>>(),
            [(0, 2), (1, 2)]
        );
        assert!((buckets[0].mean_ms - 1.5).abs() < 1e-9);
        assert_eq!(s.per_minute().len(), 1);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
