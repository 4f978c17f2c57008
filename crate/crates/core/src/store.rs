//! Telemetry and demonstration storage.
//!
//! Sensor readings and operator command logs are durable: each record is one
//! length-prefixed JSON entry appended to a per-category log file and then
//! indexed in memory. Camera frames are ephemeral and live only in a bounded
//! per-device ring.
//!
//! On-disk layout under the store directory:
//!
//! ```text
//! readings.log   [u32 BE len][ReadingRecord JSON]...
//! sessions.log   [u32 BE len][SessionLogEntry JSON]...
//! ```

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::DeviceId;
use crate::registry::SessionId;

pub const DEFAULT_FRAME_CAPACITY: usize = 32;
const MAX_RECORD_BYTES: usize = 1 << 20;
/// A frame sequence drop larger than this starts a new stream.
pub const SEQ_RESTART_GAP: u32 = 1 << 31;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("record encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingRecord {
    pub device_id: DeviceId,
    pub channel: String,
    pub value: f64,
    pub unit: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub device_id: DeviceId,
    pub frame_seq: u32,
    pub timestamp_ms: u64,
    /// Complete JPEG image.
    pub image: Vec<u8>,
}

/// One accepted operator command and the setpoint it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLogEntry {
    pub session_id: SessionId,
    pub user: String,
    pub device_id: DeviceId,
    /// Gateway command sequence number for the device.
    pub cmd_seq: u64,
    pub v_h: Vec<f64>,
    pub v_r: Vec<f64>,
    /// Effective interval after the `dt_max` cap.
    pub dt: f64,
    pub gamma: f64,
    pub m: f64,
    pub prev_pose: Vec<f64>,
    pub pose: Vec<f64>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    pub frame_capacity: usize,
    /// fsync after every append instead of relying on the OS page cache.
    pub sync_writes: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { dir: None, frame_capacity: DEFAULT_FRAME_CAPACITY, sync_writes: false }
    }
}

impl StoreConfig {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Stored,
    /// `frame_seq` not above the newest retained frame; dropped.
    Stale,
    /// Sequence jumped back by more than 2^31: treated as a new stream.
    Restarted,
}

/// Append-only file of length-prefixed JSON records.
struct RecordLog {
    file: File,
    sync: bool,
}

impl RecordLog {
    /// Opens `path`, returning every intact record. A torn tail left by a
    /// crash is truncated away.
    fn open<T: DeserializeOwned>(path: &Path, sync: bool) -> Result<(Self, Vec<T>)> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        let mut records = Vec::new();
        let mut at = 0usize;
        while let Some(prefix) = raw.get(at..at + 4) {
            let len = u32::from_be_bytes(prefix.try_into().expect("4 bytes")) as usize;
            let Some(body) = raw.get(at + 4..at + 4 + len).filter(|_| len <= MAX_RECORD_BYTES) else {
                break;
            };
            match serde_json::from_slice(body) {
                Ok(rec) => records.push(rec),
                Err(_) => break,
            }
            at += 4 + len;
        }
        if at != raw.len() {
            tracing::warn!(path = %path.display(), kept = at, dropped = raw.len() - at, "truncating torn log tail");
            file.set_len(at as u64)?;
        }
        Ok((Self { file, sync }, records))
    }

    fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let body = serde_json::to_vec(record)?;
        if body.len() > MAX_RECORD_BYTES {
            return Err(StoreError::Invalid(format!("record of {} bytes too large", body.len())));
        }
        let mut buf = Vec::with_capacity(body.len() + 4);
        buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
        buf.extend_from_slice(&body);
        self.file.write_all(&buf)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        self.file.sync_all()?;
        Ok(())
    }
}

type ReadingKey = (DeviceId, String);

#[derive(Default)]
struct FrameRing {
    frames: VecDeque<Arc<FrameRecord>>,
}

impl FrameRing {
    fn max_seq(&self) -> Option<u32> {
        self.frames.back().map(|f| f.frame_seq)
    }
}

pub struct Store {
    readings: RwLock<HashMap<ReadingKey, Vec<ReadingRecord>>>,
    readings_log: Mutex<Option<RecordLog>>,
    sessions: RwLock<HashMap<SessionId, Vec<SessionLogEntry>>>,
    sessions_log: Mutex<Option<RecordLog>>,
    frames: RwLock<HashMap<DeviceId, Arc<Mutex<FrameRing>>>>,
    frame_capacity: usize,
    stale_frames: AtomicU64,
}

impl Store {
    pub fn open(config: StoreConfig) -> Result<Self> {
        if config.frame_capacity == 0 {
            return Err(StoreError::Invalid("frame capacity must be >= 1".into()));
        }
        let mut readings: HashMap<ReadingKey, Vec<ReadingRecord>> = HashMap::new();
        let mut sessions: HashMap<SessionId, Vec<SessionLogEntry>> = HashMap::new();
        let (readings_log, sessions_log) = match &config.dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let (rlog, recs) = RecordLog::open::<ReadingRecord>(&dir.join("readings.log"), config.sync_writes)?;
                for r in recs {
                    insert_sorted(readings.entry((r.device_id.clone(), r.channel.clone())).or_default(), r);
                }
                let (slog, entries) =
                    RecordLog::open::<SessionLogEntry>(&dir.join("sessions.log"), config.sync_writes)?;
                for e in entries {
                    sessions.entry(e.session_id.clone()).or_default().push(e);
                }
                (Some(rlog), Some(slog))
            }
            None => (None, None),
        };
        Ok(Self {
            readings: RwLock::new(readings),
            readings_log: Mutex::new(readings_log),
            sessions: RwLock::new(sessions),
            sessions_log: Mutex::new(sessions_log),
            frames: RwLock::new(HashMap::new()),
            frame_capacity: config.frame_capacity,
            stale_frames: AtomicU64::new(0),
        })
    }

    pub fn in_memory() -> Self {
        Self::open(StoreConfig::in_memory()).expect("in-memory store cannot fail to open")
    }

    /// Persists then indexes a reading. Returns only once the record is in the log.
    pub fn append_reading(&self, r: ReadingRecord) -> Result<()> {
        if r.channel.is_empty() || !r.value.is_finite() {
            return Err(StoreError::Invalid("reading needs a channel and a finite value".into()));
        }
        let mut log = self.readings_log.lock();
        if let Some(log) = log.as_mut() {
            log.append(&r)?;
        }
        let mut index = self.readings.write();
        insert_sorted(index.entry((r.device_id.clone(), r.channel.clone())).or_default(), r);
        Ok(())
    }

    /// Readings with `from_ms <= t <= to_ms`, in time order, keeping the newest `limit`.
    pub fn query_readings(
        &self,
        device: &DeviceId,
        channel: &str,
        from_ms: u64,
        to_ms: u64,
        limit: usize,
    ) -> Result<Vec<ReadingRecord>> {
        check_range(from_ms, to_ms, limit)?;
        let index = self.readings.read();
        let Some(series) = index.get(&(device.clone(), channel.to_owned())) else {
            return Ok(Vec::new());
        };
        Ok(window(series, from_ms, to_ms, limit).to_vec())
    }

    /// Like [`Store::query_readings`] across every channel of `device`.
    pub fn query_device_readings(
        &self,
        device: &DeviceId,
        from_ms: u64,
        to_ms: u64,
        limit: usize,
    ) -> Result<Vec<ReadingRecord>> {
        check_range(from_ms, to_ms, limit)?;
        let index = self.readings.read();
        let mut all: Vec<ReadingRecord> = index
            .iter()
            .filter(|((d, _), _)| d == device)
            .flat_map(|(_, series)| window(series, from_ms, to_ms, limit).iter().cloned())
            .collect();
        all.sort_by(|a, b| a.timestamp_ms.cmp(&b.timestamp_ms).then_with(|| a.channel.cmp(&b.channel)));
        let skip = all.len().saturating_sub(limit);
        Ok(all.split_off(skip))
    }

    pub fn channels(&self, device: &DeviceId) -> Vec<String> {
        let mut out: Vec<String> =
            self.readings.read().keys().filter(|(d, _)| d == device).map(|(_, c)| c.clone()).collect();
        out.sort();
        out
    }

    pub fn put_frame(&self, f: FrameRecord) -> PutOutcome {
        let ring = {
            let frames = self.frames.read();
            frames.get(&f.device_id).cloned()
        };
        let ring = match ring {
            Some(r) => r,
            None => self.frames.write().entry(f.device_id.clone()).or_default().clone(),
        };
        let mut ring = ring.lock();
        let mut outcome = PutOutcome::Stored;
        if let Some(max) = ring.max_seq() {
            if f.frame_seq <= max {
                if max - f.frame_seq > SEQ_RESTART_GAP {
                    ring.frames.clear();
                    outcome = PutOutcome::Restarted;
                } else {
                    self.stale_frames.fetch_add(1, Ordering::Relaxed);
                    return PutOutcome::Stale;
                }
            }
        }
        ring.frames.push_back(Arc::new(f));
        while ring.frames.len() > self.frame_capacity {
            ring.frames.pop_front();
        }
        outcome
    }

    /// Forgets every retained frame of `device` so a restarted camera can
    /// begin again from any sequence number.
    pub fn reset_frames(&self, device: &DeviceId) {
        if let Some(ring) = self.frames.read().get(device) {
            ring.lock().frames.clear();
        }
    }

    /// True when `frame_seq` would be dropped as stale by [`Store::put_frame`].
    pub fn is_stale_frame(&self, device: &DeviceId, frame_seq: u32) -> bool {
        let Some(ring) = self.frames.read().get(device).cloned() else {
            return false;
        };
        let max = ring.lock().max_seq();
        max.is_some_and(|max| frame_seq <= max && max - frame_seq <= SEQ_RESTART_GAP)
    }

    pub fn latest_frame(&self, device: &DeviceId) -> Option<Arc<FrameRecord>> {
        let ring = self.frames.read().get(device).cloned()?;
        let ring = ring.lock();
        ring.frames.back().cloned()
    }

    /// Sequence numbers currently retained for `device`, oldest first.
    pub fn retained_frame_seqs(&self, device: &DeviceId) -> Vec<u32> {
        let Some(ring) = self.frames.read().get(device).cloned() else {
            return Vec::new();
        };
        let ring = ring.lock();
        ring.frames.iter().map(|f| f.frame_seq).collect()
    }

    pub fn stale_frame_count(&self) -> u64 {
        self.stale_frames.load(Ordering::Relaxed)
    }

    pub fn log_command(&self, e: SessionLogEntry) -> Result<()> {
        let mut log = self.sessions_log.lock();
        {
            let sessions = self.sessions.read();
            if let Some(last) = sessions.get(&e.session_id).and_then(|s| s.last()) {
                if e.timestamp_ms < last.timestamp_ms {
                    return Err(StoreError::Invalid("session log timestamps must not decrease".into()));
                }
            }
        }
        if let Some(log) = log.as_mut() {
            log.append(&e)?;
        }
        self.sessions.write().entry(e.session_id.clone()).or_default().push(e);
        Ok(())
    }

    /// Every entry of `session` in append order; empty if unknown.
    pub fn export_session(&self, session: &SessionId) -> Vec<SessionLogEntry> {
        self.sessions.read().get(session).cloned().unwrap_or_default()
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        let mut ids: Vec<_> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(log) = self.readings_log.lock().as_mut() {
            log.flush()?;
        }
        if let Some(log) = self.sessions_log.lock().as_mut() {
            log.flush()?;
        }
        Ok(())
    }
}

fn check_range(from_ms: u64, to_ms: u64, limit: usize) -> Result<()> {
    if from_ms > to_ms {
        return Err(StoreError::Invalid("from must not exceed to".into()));
    }
    if limit == 0 {
        return Err(StoreError::Invalid("limit must be >= 1".into()));
    }
    Ok(())
}

fn insert_sorted(series: &mut Vec<ReadingRecord>, r: ReadingRecord) {
    let at = series.partition_point(|x| x.timestamp_ms <= r.timestamp_ms);
    series.insert(at, r);
}

fn window(series: &[ReadingRecord], from_ms: u64, to_ms: u64, limit: usize) -> &[ReadingRecord] {
    let lo = series.partition_point(|x| x.timestamp_ms < from_ms);
    let hi = series.partition_point(|x| x.timestamp_ms <= to_ms);
    let lo = lo.max(hi.saturating_sub(limit));
    &series[lo..hi.max(lo)]
}
