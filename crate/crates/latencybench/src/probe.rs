//! Sequential round-trip probes. Intervals use the monotonic clock only.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures::StreamExt;
use iohrt_core::protocol::{decode_frame_packet, encode_frame_packet, DeviceId, DeviceKind, FramePacket, Hello, Message, Probe, FLAG_ECHO};
use iohrt_edgesim::DeviceLink;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::net::UdpSocket;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::report::{LatencyReport, ProbePath};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub n: usize,
    /// Per-probe deadline; a probe that misses it is a loss.
    pub timeout: Duration,
    /// Fraction of datagram probes withheld by the sender to exercise loss accounting.
    pub inject_loss: f64,
    pub seed: u64,
    /// Bytes of padding carried by each datagram probe.
    pub payload_bytes: usize,
    /// Device id used to register the stream probe.
    pub device_id: String,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            n: 100,
            timeout: DEFAULT_TIMEOUT,
            inject_loss: 0.0,
            seed: 0,
            payload_bytes: 64,
            device_id: "latencybench".into(),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Probe→echo over the device stream link.
pub async fn probe_stream(device_addr: SocketAddr, opts: &ProbeOptions) -> LatencyReport {
    let path = ProbePath::Stream;
    let id = match DeviceId::new(opts.device_id.clone()) {
        Ok(id) => id,
        Err(e) => return LatencyReport::failed(path, opts.n, e.to_string()),
    };
    let hello = Hello { kind: DeviceKind::Sensor, dof: 0, pose: None, params: None };
    let DeviceLink { mut tx, mut rx, .. } = match tokio::time::timeout(opts.timeout, DeviceLink::connect(device_addr, id, hello)).await {
        Ok(Ok(link)) => link,
        Ok(Err(e)) => return LatencyReport::failed(path, opts.n, format!("connect {device_addr}: {e}")),
        Err(_) => return LatencyReport::failed(path, opts.n, format!("connect {device_addr}: timed out")),
    };
    let mut samples = Vec::with_capacity(opts.n);
    let mut errors = Vec::new();
    let mut losses = 0;
    for i in 0..opts.n {
        let probe_id = i as u64;
        let t0 = Instant::now();
        if let Err(e) = tx.send(Message::LatencyProbe(Probe { probe_id })).await {
            errors.push(format!("probe {i}: send failed: {e}"));
            losses += opts.n - i;
            break;
        }
        let wait = async {
            loop {
                match rx.recv().await {
                    Ok(Some(env)) => {
                        if let Message::LatencyEcho(p) = env.message {
                            if p.probe_id == probe_id {
                                return Ok(t0.elapsed());
                            }
                        }
                    }
                    Ok(None) => return Err("link closed".to_owned()),
                    Err(e) => return Err(e.to_string()),
                }
            }
        };
        match tokio::time::timeout(opts.timeout, wait).await {
            Ok(Ok(d)) => samples.push(ms(d)),
            Ok(Err(e)) => {
                errors.push(format!("probe {i}: {e}"));
                losses += opts.n - i;
                break;
            }
            Err(_) => {
                errors.push(format!("probe {i}: no echo within {:?}", opts.timeout));
                losses += 1;
            }
        }
    }
    LatencyReport::new(path, opts.n, samples, losses, errors)
}

/// Echo datagrams over the frame path. Lost datagrams count as losses, not errors.
pub async fn probe_datagram(frame_addr: SocketAddr, opts: &ProbeOptions) -> LatencyReport {
    let path = ProbePath::Datagram;
    let bind: SocketAddr = if frame_addr.is_ipv4() { ([0, 0, 0, 0], 0).into() } else { ([0u16; 8], 0).into() };
    let sock = match UdpSocket::bind(bind).await {
        Ok(s) => s,
        Err(e) => return LatencyReport::failed(path, opts.n, format!("bind: {e}")),
    };
    if let Err(e) = sock.connect(frame_addr).await {
        return LatencyReport::failed(path, opts.n, format!("connect {frame_addr}: {e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::with_capacity(opts.n);
    let mut errors = Vec::new();
    let mut losses = 0;
    let mut buf = vec![0u8; 65_536];
    for i in 0..opts.n {
        let pkt = FramePacket {
            flags: FLAG_ECHO,
            device_uuid: uuid::Uuid::nil(),
            frame_seq: i as u32,
            chunk_index: 0,
            chunk_count: 1,
            timestamp_ms: 0,
            payload: vec![0xA5; opts.payload_bytes.max(1)],
        };
        if opts.inject_loss > 0.0 && rng.random::<f64>() < opts.inject_loss {
            losses += 1;
            continue;
        }
        let bytes = match encode_frame_packet(&pkt) {
            Ok(b) => b,
            Err(e) => return LatencyReport::failed(path, opts.n, e.to_string()),
        };
        let t0 = Instant::now();
        if let Err(e) = sock.send(&bytes).await {
            errors.push(format!("probe {i}: send failed: {e}"));
            losses += 1;
            continue;
        }
        let wait = async {
            loop {
                let n = sock.recv(&mut buf).await?;
                // Late echoes of earlier probes are discarded.
                if let Ok(echo) = decode_frame_packet(&buf[..n]) {
                    if echo.is_echo() && echo.frame_seq == i as u32 {
                        return Ok::<_, std::io::Error>(t0.elapsed());
                    }
                }
            }
        };
        match tokio::time::timeout(opts.timeout, wait).await {
            Ok(Ok(d)) => samples.push(ms(d)),
            Ok(Err(e)) => {
                // On some platforms an unreachable port surfaces as a receive error.
                errors.push(format!("probe {i}: {e}"));
                losses += 1;
            }
            Err(_) => losses += 1,
        }
    }
    LatencyReport::new(path, opts.n, samples, losses, errors)
}

/// Where and as whom to run the command→state probe.
#[derive(Debug, Clone)]
pub struct EndToEndTarget {
    /// `http://host:port` of the gateway REST API.
    pub base_url: String,
    pub token: String,
    pub robot_id: String,
}

async fn json_call(req: reqwest::RequestBuilder) -> Result<Value, String> {
    let resp = req.send().await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let body: Value = resp.json().await.unwrap_or(Value::Null);
    if !status.is_success() {
        let code = body["error"].as_str().unwrap_or("error");
        let msg = body["message"].as_str().unwrap_or("");
        return Err(format!("{} {code}: {msg}", status.as_u16()));
    }
    Ok(body)
}

/// Time from a zero-increment command POST to the robot's matching state on the telemetry socket.
pub async fn probe_end_to_end(target: &EndToEndTarget, opts: &ProbeOptions) -> LatencyReport {
    let path = ProbePath::EndToEnd;
    let http = reqwest::Client::new();
    let base = target.base_url.trim_end_matches('/');
    let robot = &target.robot_id;
    let auth = |r: reqwest::RequestBuilder| r.bearer_auth(&target.token);

    let dev = match json_call(auth(http.get(format!("{base}/api/devices/{robot}")))).await {
        Ok(v) => v,
        Err(e) => return LatencyReport::failed(path, opts.n, format!("lookup {robot}: {e}")),
    };
    let dof = dev["dof"].as_u64().unwrap_or(0) as usize;
    if dev["kind"] != "robot" || dof == 0 {
        return LatencyReport::failed(path, opts.n, format!("{robot} is not a robot"));
    }
    if let Err(e) = json_call(auth(http.post(format!("{base}/api/robots/{robot}/acquire")))).await {
        return LatencyReport::failed(path, opts.n, format!("acquire {robot}: {e}"));
    }
    let ws_base = base.replacen("http", "ws", 1);
    let url = format!("{ws_base}/ws/telemetry?token={}&topics=robot_state", target.token);
    let mut ws = match tokio::time::timeout(opts.timeout, tokio_tungstenite::connect_async(url)).await {
        Ok(Ok((ws, _))) => ws,
        Ok(Err(e)) => return LatencyReport::failed(path, opts.n, format!("telemetry socket: {e}")),
        Err(_) => return LatencyReport::failed(path, opts.n, "telemetry socket: timed out"),
    };

    let body = json!({ "v_h": vec![0.0; dof], "dt": 0.01 });
    let mut samples = Vec::with_capacity(opts.n);
    let mut errors = Vec::new();
    let mut losses = 0;
    for i in 0..opts.n {
        let t0 = Instant::now();
        let out = match json_call(auth(http.post(format!("{base}/api/robots/{robot}/command")).json(&body))).await {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("probe {i}: command: {e}"));
                losses += 1;
                continue;
            }
        };
        if out["pose"] != out["prev_pose"] {
            errors.push(format!("probe {i}: zero command moved the setpoint"));
        }
        let seq = out["cmd_seq"].as_u64().unwrap_or(u64::MAX);
        let wait = async {
            while let Some(msg) = ws.next().await {
                let Ok(WsMessage::Text(text)) = msg else { continue };
                let Ok(ev) = serde_json::from_str::<Value>(text.as_str()) else { continue };
                if ev["type"] == "robot_state"
                    && ev["device_id"] == robot.as_str()
                    && ev["payload"]["cmd_seq"].as_u64().is_some_and(|s| s >= seq)
                {
                    return Some(t0.elapsed());
                }
            }
            None
        };
        match tokio::time::timeout(opts.timeout, wait).await {
            Ok(Some(d)) => samples.push(ms(d)),
            Ok(None) => {
                errors.push(format!("probe {i}: telemetry socket closed"));
                losses += opts.n - i;
                break;
            }
            Err(_) => {
                errors.push(format!("probe {i}: no robot_state within {:?}", opts.timeout));
                losses += 1;
            }
        }
    }
    let _ = json_call(auth(http.post(format!("{base}/api/robots/{robot}/release")))).await;
    LatencyReport::new(path, opts.n, samples, losses, errors)
}
