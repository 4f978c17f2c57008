//! Wire formats for the device link and the frame datagram path.
//!
//! Device link: every envelope is a 4-byte big-endian length `N` followed by
//! `N` bytes of UTF-8 JSON. Frame path: one datagram per [`FramePacket`], a
//! fixed big-endian header followed by a chunk of an encoded image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::control::{AutonomyMode, ControlParams};

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on an envelope's JSON body.
pub const MAX_ENVELOPE_BYTES: usize = 1 << 20;
pub const LENGTH_PREFIX_BYTES: usize = 4;

pub const FRAME_MAGIC: [u8; 4] = *b"IHRT";
pub const FRAME_VERSION: u8 = 1;
pub const FRAME_HEADER_BYTES: usize = 40;
pub const MAX_CHUNK_BYTES: usize = 60_000;
pub const DEFAULT_MAX_CHUNK: usize = 60_000;
pub const MAX_DATAGRAM_BYTES: usize = FRAME_HEADER_BYTES + MAX_CHUNK_BYTES;
/// Flag bit marking a latency probe that the receiver echoes back unchanged.
pub const FLAG_ECHO: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("envelope body of {0} bytes exceeds the 1 MiB limit")]
    Oversize(usize),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    BadVersion(u32),
    #[error("unknown msg_type {0:?}")]
    UnknownType(String),
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error("sequence number {got} does not follow {last}")]
    SeqRegression { last: u64, got: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("datagram of {0} bytes is shorter than the frame header")]
    Short(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("payload_len {declared} disagrees with {actual} remaining bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("chunk {index} out of range for {count} chunks")]
    BadChunk { index: u16, count: u16 },
    #[error("payload of {0} bytes exceeds the chunk limit")]
    Oversize(usize),
    #[error("cannot chunk an empty frame")]
    EmptyFrame,
    #[error("max_chunk {0} outside [1, 60000]")]
    BadChunkSize(usize),
    #[error("frame needs more than 65535 chunks")]
    TooManyChunks,
}

/// Device name, `[A-Za-z0-9_-]{1,64}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceId(String);

impl DeviceId {
    pub const MAX_LEN: usize = 64;

    pub fn new(value: impl Into<String>) -> Result<Self, ProtocolError> {
        let value = value.into();
        if value.is_empty() || value.len() > Self::MAX_LEN {
            return Err(ProtocolError::Invalid(format!(
                "device id must be 1..=64 characters, got {}",
                value.len()
            )));
        }
        if !value.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
            return Err(ProtocolError::Invalid(format!("device id {value:?} has illegal characters")));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DeviceId {
    type Error = ProtocolError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<DeviceId> for String {
    fn from(id: DeviceId) -> Self {
        id.0
    }
}

impl FromStr for DeviceId {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for DeviceId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Robot,
    Sensor,
    Actuator,
    Camera,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 4] = [Self::Robot, Self::Sensor, Self::Actuator, Self::Camera];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Robot => "robot",
            Self::Sensor => "sensor",
            Self::Actuator => "actuator",
            Self::Camera => "camera",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceKind {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ProtocolError::Invalid(format!("unknown device kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub kind: DeviceKind,
    #[serde(default)]
    pub dof: u32,
    /// Current pose of a robot, used as its initial setpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ControlParams<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloAck {
    /// Identifier to place in every [`FramePacket`] this device sends.
    pub uuid: Uuid,
    pub heartbeat_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub channel: String,
    pub value: f64,
    pub unit: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobotStatus {
    Idle,
    Teleop,
    Shared,
    Autonomous,
    Fault,
}

impl From<AutonomyMode> for RobotStatus {
    fn from(mode: AutonomyMode) -> Self {
        match mode {
            AutonomyMode::Teleop => Self::Teleop,
            AutonomyMode::Shared => Self::Shared,
            AutonomyMode::Autonomous => Self::Autonomous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper: Option<f64>,
    pub status: RobotStatus,
    /// `cmd_seq` of the last command or mission the robot applied.
    #[serde(default)]
    pub cmd_seq: u64,
    /// Robot-side planned rate when a goal is active.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mission_done: Option<String>,
}

/// New setpoint pushed from the gateway to a robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub cmd_seq: u64,
    pub setpoint: Vec<f64>,
    pub mode: AutonomyMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSet {
    pub channel: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionAssign {
    pub mission_id: String,
    pub cmd_seq: u64,
    pub goal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_id: u64,
}

/// Body of an envelope, tagged on the wire by `msg_type`.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    HelloAck(HelloAck),
    Reading(SensorReading),
    RobotState(RobotState),
    Command(Command),
    ActuatorSet(ActuatorSet),
    MissionAssign(MissionAssign),
    Heartbeat,
    Error(ErrorBody),
    LatencyProbe(Probe),
    LatencyEcho(Probe),
}

impl Message {
    pub const TYPES: [&'static str; 11] = [
        "hello",
        "hello_ack",
        "reading",
        "robot_state",
        "command",
        "actuator_set",
        "mission_assign",
        "heartbeat",
        "error",
        "latency_probe",
        "latency_echo",
    ];

    pub fn msg_type(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::HelloAck(_) => "hello_ack",
            Message::Reading(_) => "reading",
            Message::RobotState(_) => "robot_state",
            Message::Command(_) => "command",
            Message::ActuatorSet(_) => "actuator_set",
            Message::MissionAssign(_) => "mission_assign",
            Message::Heartbeat => "heartbeat",
            Message::Error(_) => "error",
            Message::LatencyProbe(_) => "latency_probe",
            Message::LatencyEcho(_) => "latency_echo",
        }
    }

    fn payload(&self) -> serde_json::Result<serde_json::Value> {
        use serde_json::to_value;
        match self {
            Message::Hello(p) => to_value(p),
            Message::HelloAck(p) => to_value(p),
            Message::Reading(p) => to_value(p),
            Message::RobotState(p) => to_value(p),
            Message::Command(p) => to_value(p),
            Message::ActuatorSet(p) => to_value(p),
            Message::MissionAssign(p) => to_value(p),
            Message::Heartbeat => Ok(serde_json::Value::Object(Default::default())),
            Message::Error(p) => to_value(p),
            Message::LatencyProbe(p) | Message::LatencyEcho(p) => to_value(p),
        }
    }

    fn from_payload(msg_type: &str, payload: serde_json::Value) -> Result<Self, ProtocolError> {
        fn body<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T, ProtocolError> {
            serde_json::from_value(v).map_err(|e| ProtocolError::Malformed(e.to_string()))
        }
        Ok(match msg_type {
            "hello" => Message::Hello(body(payload)?),
            "hello_ack" => Message::HelloAck(body(payload)?),
            "reading" => Message::Reading(body(payload)?),
            "robot_state" => Message::RobotState(body(payload)?),
            "command" => Message::Command(body(payload)?),
            "actuator_set" => Message::ActuatorSet(body(payload)?),
            "mission_assign" => Message::MissionAssign(body(payload)?),
            "heartbeat" => match payload {
                serde_json::Value::Null => Message::Heartbeat,
                serde_json::Value::Object(ref m) if m.is_empty() => Message::Heartbeat,
                _ => return Err(ProtocolError::Malformed("heartbeat payload must be empty".into())),
            },
            "error" => Message::Error(body(payload)?),
            "latency_probe" => Message::LatencyProbe(body(payload)?),
            "latency_echo" => Message::LatencyEcho(body(payload)?),
            other => return Err(ProtocolError::UnknownType(other.to_owned())),
        })
    }

    /// Checks the value-level invariants serde cannot express.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let invalid = |s: &str| Err(ProtocolError::Invalid(s.to_owned()));
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            Message::Hello(h) => {
                if h.kind == DeviceKind::Robot && h.dof == 0 {
                    return invalid("robots must declare dof >= 1");
                }
                if let Some(pose) = &h.pose {
                    if pose.len() != h.dof as usize || !finite(pose) {
                        return invalid("hello pose must be finite with dof entries");
                    }
                }
                if let Some(params) = &h.params {
                    if params.dof() != h.dof as usize {
                        return invalid("hello params dof disagrees with declared dof");
                    }
                    params.validate().map_err(|e| ProtocolError::Invalid(e.to_string()))?;
                }
            }
            Message::Reading(r) => {
                if r.channel.is_empty() {
                    return invalid("reading channel must be non-empty");
                }
                if !r.value.is_finite() {
                    return invalid("reading value must be finite");
                }
            }
            Message::RobotState(s) => {
                if !finite(&s.pose) || s.plan.as_deref().is_some_and(|p| !finite(p)) {
                    return invalid("robot state must be finite");
                }
                if let Some(g) = s.gripper {
                    if !(0.0..=1.0).contains(&g) {
                        return invalid("gripper must lie in [0, 1]");
                    }
                }
            }
            Message::Command(c) => {
                if !finite(&c.setpoint) || c.goal.as_deref().is_some_and(|g| !finite(g)) {
                    return invalid("command must be finite");
                }
            }
            Message::ActuatorSet(a) => {
                if a.channel.is_empty() || !a.value.is_finite() {
                    return invalid("actuator_set needs a channel and a finite value");
                }
            }
            Message::MissionAssign(m) => {
                if !finite(&m.goal) {
                    return invalid("mission goal must be finite");
                }
            }
            Message::HelloAck(_)
            | Message::Heartbeat
            | Message::Error(_)
            | Message::LatencyProbe(_)
            | Message::LatencyEcho(_) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u32,
    /// Absent on administrative server-to-device messages.
    pub device_id: Option<DeviceId>,
    pub seq: u64,
    pub timestamp_ms: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(device_id: Option<DeviceId>, seq: u64, timestamp_ms: u64, message: Message) -> Self {
        Self { version: PROTOCOL_VERSION, device_id, seq, timestamp_ms, message }
    }

    pub fn msg_type(&self) -> &'static str {
        self.message.msg_type()
    }
}

#[derive(Serialize, Deserialize)]
struct WireEnvelope {
    version: u32,
    msg_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    device_id: Option<DeviceId>,
    seq: u64,
    timestamp_ms: u64,
    #[serde(default)]
    payload: serde_json::Value,
}

/// Serializes `e` as a length-prefixed JSON frame.
pub fn encode_envelope(e: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    if e.version != PROTOCOL_VERSION {
        return Err(ProtocolError::BadVersion(e.version));
    }
    e.message.validate()?;
    let wire = WireEnvelope {
        version: e.version,
        msg_type: e.msg_type().to_owned(),
        device_id: e.device_id.clone(),
        seq: e.seq,
        timestamp_ms: e.timestamp_ms,
        payload: e.message.payload().map_err(|err| ProtocolError::Invalid(err.to_string()))?,
    };
    let body = serde_json::to_vec(&wire).map_err(|err| ProtocolError::Invalid(err.to_string()))?;
    frame_body(body)
}

/// Prepends the length prefix to an already-serialized JSON body.
pub fn frame_body(body: Vec<u8>) -> Result<Vec<u8>, ProtocolError> {
    if body.len() > MAX_ENVELOPE_BYTES {
        return Err(ProtocolError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(LENGTH_PREFIX_BYTES + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one envelope from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` holds an incomplete frame, otherwise the
/// envelope and the number of bytes it occupied.
pub fn decode_envelope(buf: &[u8]) -> Result<Option<(Envelope, usize)>, ProtocolError> {
    let Some(prefix) = buf.get(..LENGTH_PREFIX_BYTES) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(prefix.try_into().expect("4-byte prefix")) as usize;
    if len > MAX_ENVELOPE_BYTES {
        return Err(ProtocolError::Oversize(len));
    }
    let total = LENGTH_PREFIX_BYTES + len;
    let Some(body) = buf.get(LENGTH_PREFIX_BYTES..total) else {
        return Ok(None);
    };
    let wire: WireEnvelope =
        serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if wire.version != PROTOCOL_VERSION {
        return Err(ProtocolError::BadVersion(wire.version));
    }
    let message = Message::from_payload(&wire.msg_type, wire.payload)?;
    message.validate()?;
    let envelope = Envelope {
        version: wire.version,
        device_id: wire.device_id,
        seq: wire.seq,
        timestamp_ms: wire.timestamp_ms,
        message,
    };
    Ok(Some((envelope, total)))
}

/// Receiver-side check that `seq` strictly increases on one connection.
#[derive(Debug, Default, Clone)]
pub struct SeqGuard {
    last: Option<u64>,
}

impl SeqGuard {
    pub fn check(&mut self, seq: u64) -> Result<(), ProtocolError> {
        match self.last {
            Some(last) if seq <= last => Err(ProtocolError::SeqRegression { last, got: seq }),
            _ => {
                self.last = Some(seq);
                Ok(())
            }
        }
    }
}

/// One datagram on the frame path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePacket {
    pub flags: u8,
    pub device_uuid: Uuid,
    pub frame_seq: u32,
    pub chunk_index: u16,
    pub chunk_count: u16,
    pub timestamp_ms: u64,
    pub payload: Vec<u8>,
}

impl FramePacket {
    pub fn is_echo(&self) -> bool {
        self.flags & FLAG_ECHO != 0
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }
}

pub fn encode_frame_packet(p: &FramePacket) -> Result<Vec<u8>, FrameError> {
    if p.chunk_count == 0 || p.chunk_index >= p.chunk_count {
        return Err(FrameError::BadChunk { index: p.chunk_index, count: p.chunk_count });
    }
    if p.payload.len() > MAX_CHUNK_BYTES {
        return Err(FrameError::Oversize(p.payload.len()));
    }
    let mut out = Vec::with_capacity(p.encoded_len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(p.flags);
    out.extend_from_slice(p.device_uuid.as_bytes());
    out.extend_from_slice(&p.frame_seq.to_be_bytes());
    out.extend_from_slice(&p.chunk_index.to_be_bytes());
    out.extend_from_slice(&p.chunk_count.to_be_bytes());
    out.extend_from_slice(&p.timestamp_ms.to_be_bytes());
    out.extend_from_slice(&(p.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&p.payload);
    Ok(out)
}

pub fn decode_frame_packet(b: &[u8]) -> Result<FramePacket, FrameError> {
    if b.len() < FRAME_HEADER_BYTES {
        return Err(FrameError::Short(b.len()));
    }
    if b[0..4] != FRAME_MAGIC {
        return Err(FrameError::BadMagic);
    }
    if b[4] != FRAME_VERSION {
        return Err(FrameError::BadVersion(b[4]));
    }
    let be16 = |at: usize| u16::from_be_bytes([b[at], b[at + 1]]);
    let flags = b[5];
    let device_uuid = Uuid::from_bytes(b[6..22].try_into().expect("16 bytes"));
    let frame_seq = u32::from_be_bytes(b[22..26].try_into().expect("4 bytes"));
    let chunk_index = be16(26);
    let chunk_count = be16(28);
    let timestamp_ms = u64::from_be_bytes(b[30..38].try_into().expect("8 bytes"));
    let declared = be16(38) as usize;
    let actual = b.len() - FRAME_HEADER_BYTES;
    if declared != actual {
        return Err(FrameError::LengthMismatch { declared, actual });
    }
    if declared > MAX_CHUNK_BYTES {
        return Err(FrameError::Oversize(declared));
    }
    if chunk_count == 0 || chunk_index >= chunk_count {
        return Err(FrameError::BadChunk { index: chunk_index, count: chunk_count });
    }
    Ok(FramePacket {
        flags,
        device_uuid,
        frame_seq,
        chunk_index,
        chunk_count,
        timestamp_ms,
        payload: b[FRAME_HEADER_BYTES..].to_vec(),
    })
}

/// Identity shared by all chunks of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameMeta {
    pub device_uuid: Uuid,
    pub frame_seq: u32,
    pub timestamp_ms: u64,
}

/// Splits an encoded frame into `ceil(len / max_chunk)` packets.
pub fn chunk_frame(frame: &[u8], max_chunk: usize, meta: FrameMeta) -> Result<Vec<FramePacket>, FrameError> {
    if frame.is_empty() {
        return Err(FrameError::EmptyFrame);
    }
    if !(1..=MAX_CHUNK_BYTES).contains(&max_chunk) {
        return Err(FrameError::BadChunkSize(max_chunk));
    }
    let count = frame.len().div_ceil(max_chunk);
    let count = u16::try_from(count).map_err(|_| FrameError::TooManyChunks)?;
    Ok(frame
        .chunks(max_chunk)
        .enumerate()
        .map(|(i, chunk)| FramePacket {
            flags: 0,
            device_uuid: meta.device_uuid,
            frame_seq: meta.frame_seq,
            chunk_index: i as u16,
            chunk_count: count,
            timestamp_ms: meta.timestamp_ms,
            payload: chunk.to_vec(),
        })
        .collect())
}
