//! Frame datagram ingest: chunk reassembly, latest-frame publication, and
//! the latency echo.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use iohrt_core::protocol::{decode_frame_packet, DeviceId, DeviceKind, FramePacket, MAX_DATAGRAM_BYTES};
use iohrt_core::store::{FrameRecord, PutOutcome};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::net::UdpSocket;
use tokio::sync::watch;
use uuid::Uuid;

use crate::state::Shared;

/// Frames being assembled at once before the oldest is evicted.
pub const MAX_PARTIAL_FRAMES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Offer {
    /// All chunks present; the reassembled image.
    Complete { image: Vec<u8>, timestamp_ms: u64 },
    Pending,
    /// Chunk already held; ignored.
    Duplicate,
    /// `chunk_count` disagrees with earlier chunks of the same frame.
    Inconsistent,
}

struct Partial {
    chunks: Vec<Option<Vec<u8>>>,
    have: usize,
    started: Instant,
    timestamp_ms: u64,
}

/// Collects chunks per `(device, frame_seq)` until a frame is whole.
pub struct FrameAssembler {
    partial: HashMap<(Uuid, u32), Partial>,
    timeout: Duration,
}

impl FrameAssembler {
    pub fn new(timeout: Duration) -> Self {
        Self { partial: HashMap::new(), timeout }
    }

    pub fn in_flight(&self) -> usize {
        self.partial.len()
    }

    /// Adds one chunk. Completing frame `n` also discards unfinished frames
    /// of the same device with lower sequence numbers; the second value counts them.
    pub fn offer(&mut self, p: FramePacket, now: Instant) -> (Offer, usize) {
        let key = (p.device_uuid, p.frame_seq);
        let mut evicted = 0;
        if !self.partial.contains_key(&key) && self.partial.len() >= MAX_PARTIAL_FRAMES {
            if let Some(oldest) = self.partial.iter().min_by_key(|(_, v)| v.started).map(|(k, _)| *k) {
                self.partial.remove(&oldest);
                evicted += 1;
            }
        }
        let entry = self.partial.entry(key).or_insert_with(|| Partial {
            chunks: vec![None; p.chunk_count as usize],
            have: 0,
            started: now,
            timestamp_ms: p.timestamp_ms,
        });
        if entry.chunks.len() != p.chunk_count as usize {
            return (Offer::Inconsistent, evicted);
        }
        let slot = &mut entry.chunks[p.chunk_index as usize];
        if slot.is_some() {
            return (Offer::Duplicate, evicted);
        }
        *slot = Some(p.payload);
        entry.have += 1;
        if entry.have < entry.chunks.len() {
            return (Offer::Pending, evicted);
        }
        let done = self.partial.remove(&key).expect("entry present");
        let before = self.partial.len();
        self.partial.retain(|(uuid, seq), _| !(*uuid == p.device_uuid && *seq < p.frame_seq));
        evicted += before - self.partial.len();
        let image = done.chunks.into_iter().flatten().flatten().collect();
        (Offer::Complete { image, timestamp_ms: done.timestamp_ms }, evicted)
    }

    /// Drops frames whose first chunk is older than the timeout.
    pub fn expire(&mut self, now: Instant) -> usize {
        let before = self.partial.len();
        let timeout = self.timeout;
        self.partial.retain(|_, v| now.duration_since(v.started) <= timeout);
        before - self.partial.len()
    }
}

#[derive(Debug, Default)]
pub struct FrameStats {
    pub datagrams: AtomicU64,
    pub bad_packets: AtomicU64,
    pub unknown_device: AtomicU64,
    pub duplicate_chunks: AtomicU64,
    pub late_chunks: AtomicU64,
    pub incomplete_frames: AtomicU64,
    pub frames_stored: AtomicU64,
    pub echoes: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameStatsSnapshot {
    pub datagrams: u64,
    pub bad_packets: u64,
    pub unknown_device: u64,
    pub duplicate_chunks: u64,
    pub late_chunks: u64,
    pub incomplete_frames: u64,
    pub frames_stored: u64,
    pub echoes: u64,
}

impl FrameStats {
    pub fn snapshot(&self) -> FrameStatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        FrameStatsSnapshot {
            datagrams: g(&self.datagrams),
            bad_packets: g(&self.bad_packets),
            unknown_device: g(&self.unknown_device),
            duplicate_chunks: g(&self.duplicate_chunks),
            late_chunks: g(&self.late_chunks),
            incomplete_frames: g(&self.incomplete_frames),
            frames_stored: g(&self.frames_stored),
            echoes: g(&self.echoes),
        }
    }
}

fn bump(a: &AtomicU64, n: u64) {
    a.fetch_add(n, Ordering::Relaxed);
}

/// Per-camera change notification for stream readers.
#[derive(Default)]
pub struct FrameHub {
    watchers: Mutex<HashMap<DeviceId, watch::Sender<u64>>>,
    pub stats: FrameStats,
}

impl FrameHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Receiver whose value changes whenever `camera` stores a new frame.
    pub fn subscribe(&self, camera: &DeviceId) -> watch::Receiver<u64> {
        self.watchers.lock().entry(camera.clone()).or_insert_with(|| watch::channel(0).0).subscribe()
    }

    pub fn notify(&self, camera: &DeviceId) {
        let mut watchers = self.watchers.lock();
        let tx = watchers.entry(camera.clone()).or_insert_with(|| watch::channel(0).0);
        tx.send_modify(|v| *v += 1);
    }
}

/// Handles one datagram. Returns bytes to send back for latency probes.
pub fn ingest_datagram(state: &Shared, assembler: &mut FrameAssembler, bytes: &[u8], now: Instant) -> Option<Vec<u8>> {
    let stats = &state.frames.stats;
    bump(&stats.datagrams, 1);
    let packet = match decode_frame_packet(bytes) {
        Ok(p) => p,
        Err(e) => {
            tracing::trace!(error = %e, "bad frame datagram");
            bump(&stats.bad_packets, 1);
            return None;
        }
    };
    if packet.is_echo() {
        bump(&stats.echoes, 1);
        return Some(bytes.to_vec());
    }
    let Some(rec) = state.registry.lookup_uuid(&packet.device_uuid).filter(|r| r.kind == DeviceKind::Camera) else {
        bump(&stats.unknown_device, 1);
        return None;
    };
    if state.store.is_stale_frame(&rec.id, packet.frame_seq) {
        bump(&stats.late_chunks, 1);
        return None;
    }
    let frame_seq = packet.frame_seq;
    let (offer, evicted) = assembler.offer(packet, now);
    bump(&stats.incomplete_frames, evicted as u64);
    match offer {
        Offer::Complete { image, timestamp_ms } => {
            let outcome = state.store.put_frame(FrameRecord { device_id: rec.id.clone(), frame_seq, timestamp_ms, image });
            if outcome != PutOutcome::Stale {
                bump(&stats.frames_stored, 1);
                state.frames.notify(&rec.id);
            } else {
                bump(&stats.late_chunks, 1);
            }
        }
        Offer::Duplicate => bump(&stats.duplicate_chunks, 1),
        Offer::Inconsistent => bump(&stats.bad_packets, 1),
        Offer::Pending => {}
    }
    None
}

/// Receives datagrams until `shutdown` fires.
pub async fn run_frame_ingest(socket: Arc<UdpSocket>, state: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    let timeout = Duration::from_millis(state.config.frame_assembly_timeout_ms);
    let mut assembler = FrameAssembler::new(timeout);
    let mut buf = vec![0u8; MAX_DATAGRAM_BYTES + 1];
    let mut tick = tokio::time::interval(Duration::from_millis(50).min(timeout));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            received = socket.recv_from(&mut buf) => match received {
                Ok((n, from)) => {
                    if let Some(reply) = ingest_datagram(&state, &mut assembler, &buf[..n], Instant::now()) {
                        if let Err(e) = socket.send_to(&reply, from).await {
                            tracing::debug!(error = %e, "echo send failed");
                        }
                    }
                }
                Err(e) => tracing::debug!(error = %e, "frame socket receive error"),
            },
            _ = tick.tick() => {
                let expired = assembler.expire(Instant::now());
                bump(&state.frames.stats.incomplete_frames, expired as u64);
            }
            _ = shutdown.changed() => break,
        }
    }
}
