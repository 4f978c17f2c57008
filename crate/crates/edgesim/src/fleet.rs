//! Runs a fleet of simulated devices against a gateway.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use iohrt_core::protocol::{
    chunk_frame, encode_frame_packet, DeviceId, DeviceKind, ErrorBody, FrameMeta, Hello, Message, SensorReading,
};
use iohrt_core::time::now_ms;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::UdpSocket;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio::time::{interval, Interval, MissedTickBehavior};

use crate::camera::render_frame;
use crate::config::{FleetConfig, SimActuatorConfig, SimCameraConfig, SimConfigError, SimRobotConfig};
use crate::link::{DeviceLink, LinkError};
use crate::robot::SimRobot;
use crate::sensor::{device_seed, SimSensor};

pub const BACKOFF_MIN: Duration = Duration::from_millis(500);
pub const BACKOFF_MAX: Duration = Duration::from_secs(8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatewayEndpoints {
    pub device: SocketAddr,
    pub frame: SocketAddr,
}

/// Exponential reconnect delay: 0.5 s doubling up to 8 s.
#[derive(Debug, Clone)]
pub struct Backoff {
    next: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { next: BACKOFF_MIN }
    }
}

impl Backoff {
    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(BACKOFF_MAX);
        d
    }

    pub fn reset(&mut self) {
        self.next = BACKOFF_MIN;
    }
}

#[derive(Debug, Default)]
pub struct FleetStats {
    pub connects: AtomicU64,
    pub readings_sent: AtomicU64,
    pub states_sent: AtomicU64,
    pub frames_sent: AtomicU64,
    pub datagrams_sent: AtomicU64,
    pub datagrams_dropped: AtomicU64,
    pub commands_applied: AtomicU64,
    pub commands_rejected: AtomicU64,
    pub missions_done: AtomicU64,
    pub actuator_sets: AtomicU64,
}

impl FleetStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

pub struct FleetHandle {
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
    pub stats: Arc<FleetStats>,
    robots: HashMap<String, Arc<Mutex<SimRobot>>>,
    actuators: HashMap<String, Arc<Mutex<HashMap<String, f64>>>>,
}

impl FleetHandle {
    pub fn device_count(&self) -> usize {
        self.tasks.len()
    }

    /// Current simulated pose of a robot.
    pub fn robot_pose(&self, id: &str) -> Option<Vec<f64>> {
        self.robots.get(id).map(|r| r.lock().expect("robot lock").pose().to_vec())
    }

    /// Last value received per channel by an actuator.
    pub fn actuator_values(&self, id: &str) -> Option<HashMap<String, f64>> {
        self.actuators.get(id).map(|a| a.lock().expect("actuator lock").clone())
    }

    pub async fn stop(self) {
        self.stop.send_replace(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

/// Starts every configured device on the current Tokio runtime.
pub fn run_fleet(fleet: FleetConfig, ep: GatewayEndpoints) -> Result<FleetHandle, SimConfigError> {
    fleet.validate()?;
    let (stop, _) = watch::channel(false);
    let stats = Arc::new(FleetStats::default());
    let mut tasks = Vec::new();
    let mut robots = HashMap::new();
    let mut actuators = HashMap::new();
    for cfg in fleet.robots {
        let robot = Arc::new(Mutex::new(SimRobot::new(&cfg)));
        robots.insert(cfg.id.clone(), robot.clone());
        let (stats, stop) = (stats.clone(), stop.subscribe());
        tasks.push(tokio::spawn(supervise(cfg.id.clone(), stop.clone(), move |backoff| {
            robot_session(cfg.clone(), robot.clone(), ep, stats.clone(), stop.clone(), backoff)
        })));
    }
    for cfg in fleet.sensors {
        let sensor = Arc::new(Mutex::new(SimSensor::new(cfg.clone(), fleet.seed)));
        let (stats, stop) = (stats.clone(), stop.subscribe());
        tasks.push(tokio::spawn(supervise(cfg.id.clone(), stop.clone(), move |backoff| {
            sensor_session(cfg.id.clone(), sensor.clone(), ep, stats.clone(), stop.clone(), backoff)
        })));
    }
    for cfg in fleet.cameras {
        let state = Arc::new(Mutex::new(CameraState {
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(device_seed(fleet.seed, &cfg.id)),
        }));
        let (stats, stop) = (stats.clone(), stop.subscribe());
        tasks.push(tokio::spawn(supervise(cfg.id.clone(), stop.clone(), move |backoff| {
            camera_session(cfg.clone(), state.clone(), ep, stats.clone(), stop.clone(), backoff)
        })));
    }
    for cfg in fleet.actuators {
        let values = Arc::new(Mutex::new(HashMap::new()));
        actuators.insert(cfg.id.clone(), values.clone());
        let (stats, stop) = (stats.clone(), stop.subscribe());
        tasks.push(tokio::spawn(supervise(cfg.id.clone(), stop.clone(), move |backoff| {
            actuator_session(cfg.clone(), values.clone(), ep, stats.clone(), stop.clone(), backoff)
        })));
    }
    Ok(FleetHandle { stop, tasks, stats, robots, actuators })
}

/// Reruns `session` until stop, sleeping with backoff between attempts.
async fn supervise<F, Fut>(name: String, mut stop: watch::Receiver<bool>, mut session: F)
where
    F: FnMut(Arc<Mutex<Backoff>>) -> Fut,
    Fut: std::future::Future<Output = Result<(), LinkError>>,
{
    let backoff = Arc::new(Mutex::new(Backoff::default()));
    loop {
        if *stop.borrow() {
            return;
        }
        match session(backoff.clone()).await {
            Ok(()) => return,
            Err(e) => tracing::debug!(device = %name, error = %e, "link lost"),
        }
        let delay = backoff.lock().expect("backoff lock").next_delay();
        tokio::select! {
            _ = tokio::time::sleep(delay) => {}
            _ = stop.changed() => return,
        }
    }
}

fn ticker(hz: f64) -> Interval {
    let mut t = interval(Duration::from_secs_f64(1.0 / hz));
    t.set_missed_tick_behavior(MissedTickBehavior::Delay);
    t
}

fn heartbeat(ms: u64) -> Interval {
    ticker(1000.0 / ms.max(1) as f64)
}

fn id_of(s: &str) -> Result<DeviceId, LinkError> {
    DeviceId::new(s).map_err(LinkError::Protocol)
}

async fn connect(
    ep: GatewayEndpoints,
    id: &str,
    hello: Hello,
    stats: &FleetStats,
    backoff: &Mutex<Backoff>,
) -> Result<DeviceLink, LinkError> {
    let link = DeviceLink::connect(ep.device, id_of(id)?, hello).await?;
    backoff.lock().expect("backoff lock").reset();
    bump(&stats.connects);
    tracing::debug!(device = id, "connected");
    Ok(link)
}

async fn robot_session(
    cfg: SimRobotConfig,
    robot: Arc<Mutex<SimRobot>>,
    ep: GatewayEndpoints,
    stats: Arc<FleetStats>,
    mut stop: watch::Receiver<bool>,
    backoff: Arc<Mutex<Backoff>>,
) -> Result<(), LinkError> {
    let hello = {
        let r = robot.lock().expect("robot lock");
        Hello { kind: DeviceKind::Robot, dof: r.dof() as u32, pose: Some(r.pose().to_vec()), params: Some(r.params().clone()) }
    };
    let DeviceLink { mut tx, mut rx, ack } = connect(ep, &cfg.id, hello, &stats, &backoff).await?;
    let dt = 1.0 / cfg.tick_hz;
    let mut tick = ticker(cfg.tick_hz);
    let mut publish = ticker(cfg.publish_hz);
    let mut hb = heartbeat(ack.heartbeat_interval_ms);
    loop {
        // Every branch decides what to send while holding the lock, then sends after releasing it.
        let out: Option<Message> = tokio::select! {
            _ = stop.changed() => return Ok(()),
            env = rx.recv() => {
                let Some(env) = env? else { return Err(LinkError::Closed) };
                let mut r = robot.lock().expect("robot lock");
                match env.message {
                    Message::Command(c) => match r.apply_command(&c) {
                        Ok(()) => {
                            bump(&stats.commands_applied);
                            Some(Message::RobotState(r.state()))
                        }
                        Err(e) => {
                            bump(&stats.commands_rejected);
                            Some(Message::Error(ErrorBody { code: "bad_command".into(), message: e.to_string() }))
                        }
                    },
                    Message::MissionAssign(m) => match r.assign_mission(&m) {
                        Ok(()) => Some(Message::RobotState(r.state())),
                        Err(e) => Some(Message::Error(ErrorBody { code: "bad_mission".into(), message: e.to_string() })),
                    },
                    Message::Error(b) => {
                        tracing::warn!(device = %cfg.id, code = %b.code, "gateway error: {}", b.message);
                        None
                    }
                    _ => None,
                }
            }
            _ = tick.tick() => {
                let mut r = robot.lock().expect("robot lock");
                r.tick(dt).map(|_| {
                    bump(&stats.missions_done);
                    let s = r.state();
                    r.take_finished();
                    Message::RobotState(s)
                })
            }
            _ = publish.tick() => Some(Message::RobotState(robot.lock().expect("robot lock").state())),
            _ = hb.tick() => Some(Message::Heartbeat),
        };
        if let Some(msg) = out {
            if matches!(msg, Message::RobotState(_)) {
                bump(&stats.states_sent);
            }
            tx.send(msg).await?;
        }
    }
}

async fn sensor_session(
    id: String,
    sensor: Arc<Mutex<SimSensor>>,
    ep: GatewayEndpoints,
    stats: Arc<FleetStats>,
    mut stop: watch::Receiver<bool>,
    backoff: Arc<Mutex<Backoff>>,
) -> Result<(), LinkError> {
    let hello = Hello { kind: DeviceKind::Sensor, dof: 0, pose: None, params: None };
    let DeviceLink { mut tx, mut rx, ack } = connect(ep, &id, hello, &stats, &backoff).await?;
    let hz = sensor.lock().expect("sensor lock").config().publish_hz;
    let mut publish = ticker(hz);
    let mut hb = heartbeat(ack.heartbeat_interval_ms);
    loop {
        let out = tokio::select! {
            _ = stop.changed() => return Ok(()),
            env = rx.recv() => {
                if env?.is_none() {
                    return Err(LinkError::Closed);
                }
                None
            }
            _ = publish.tick() => Some(Message::Reading(sensor.lock().expect("sensor lock").step(now_ms()))),
            _ = hb.tick() => Some(Message::Heartbeat),
        };
        if let Some(msg) = out {
            let reading = matches!(msg, Message::Reading(_));
            tx.send(msg).await?;
            if reading {
                bump(&stats.readings_sent);
            }
        }
    }
}

struct CameraState {
    seq: u32,
    rng: ChaCha8Rng,
}

async fn camera_session(
    cfg: SimCameraConfig,
    state: Arc<Mutex<CameraState>>,
    ep: GatewayEndpoints,
    stats: Arc<FleetStats>,
    mut stop: watch::Receiver<bool>,
    backoff: Arc<Mutex<Backoff>>,
) -> Result<(), LinkError> {
    let hello = Hello { kind: DeviceKind::Camera, dof: 0, pose: None, params: None };
    let DeviceLink { mut tx, mut rx, ack } = connect(ep, &cfg.id, hello, &stats, &backoff).await?;
    let bind: SocketAddr = if ep.frame.is_ipv4() { ([0, 0, 0, 0], 0).into() } else { "[::]:0".parse().expect("literal") };
    let udp = UdpSocket::bind(bind).await?;
    udp.connect(ep.frame).await?;
    let mut frame_tick = interval(Duration::from_secs_f64(1.0 / cfg.fps));
    frame_tick.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let mut hb = heartbeat(ack.heartbeat_interval_ms);
    loop {
        tokio::select! {
            _ = stop.changed() => return Ok(()),
            env = rx.recv() => {
                if env?.is_none() {
                    return Err(LinkError::Closed);
                }
            }
            _ = hb.tick() => tx.send(Message::Heartbeat).await?,
            _ = frame_tick.tick() => {
                let datagrams = {
                    let mut st = state.lock().expect("camera lock");
                    let seq = st.seq;
                    let jpeg = render_frame(&cfg, seq);
                    let meta = FrameMeta { device_uuid: ack.uuid, frame_seq: seq, timestamp_ms: now_ms() };
                    let packets = chunk_frame(&jpeg, cfg.max_chunk, meta).map_err(|e| {
                        LinkError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
                    })?;
                    st.seq = st.seq.wrapping_add(1);
                    let mut keep = Vec::with_capacity(packets.len());
                    for p in &packets {
                        if cfg.drop_rate > 0.0 && st.rng.random::<f64>() < cfg.drop_rate {
                            bump(&stats.datagrams_dropped);
                            continue;
                        }
                        keep.push(encode_frame_packet(p).expect("chunk_frame output encodes"));
                    }
                    keep
                };
                for d in datagrams {
                    if udp.send(&d).await.is_ok() {
                        bump(&stats.datagrams_sent);
                    }
                }
                bump(&stats.frames_sent);
            }
        }
    }
}

async fn actuator_session(
    cfg: SimActuatorConfig,
    values: Arc<Mutex<HashMap<String, f64>>>,
    ep: GatewayEndpoints,
    stats: Arc<FleetStats>,
    mut stop: watch::Receiver<bool>,
    backoff: Arc<Mutex<Backoff>>,
) -> Result<(), LinkError> {
    let hello = Hello { kind: DeviceKind::Actuator, dof: 0, pose: None, params: None };
    let DeviceLink { mut tx, mut rx, ack } = connect(ep, &cfg.id, hello, &stats, &backoff).await?;
    let mut hb = heartbeat(ack.heartbeat_interval_ms);
    loop {
        let out = tokio::select! {
            _ = stop.changed() => return Ok(()),
            env = rx.recv() => {
                let Some(env) = env? else { return Err(LinkError::Closed) };
                match env.message {
                    Message::ActuatorSet(a) => {
                        bump(&stats.actuator_sets);
                        values.lock().expect("actuator lock").insert(a.channel.clone(), a.value);
                        // Report the new output level as a reading so it shows up in telemetry.
                        Some(Message::Reading(SensorReading { channel: a.channel, value: a.value, unit: String::new(), timestamp_ms: now_ms() }))
                    }
                    _ => None,
                }
            }
            _ = hb.tick() => Some(Message::Heartbeat),
        };
        if let Some(msg) = out {
            tx.send(msg).await?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let mut b = Backoff::default();
        let seq: Vec<u64> = (0..7).map(|_| b.next_delay().as_millis() as u64).collect();
        assert_eq!(seq, vec![500, 1000, 2000, 4000, 8000, 8000, 8000]);
        b.reset();
        assert_eq!(b.next_delay(), BACKOFF_MIN);
    }

    #[tokio::test]
    async fn empty_fleet_is_noop() {
        let ep = GatewayEndpoints { device: ([127, 0, 0, 1], 9).into(), frame: ([127, 0, 0, 1], 9).into() };
        let h = run_fleet(FleetConfig::default(), ep).unwrap();
        assert_eq!(h.device_count(), 0);
        h.stop().await;
    }

    #[tokio::test]
    async fn unreachable_gateway_retries_without_crashing() {
        let ep = GatewayEndpoints { device: ([127, 0, 0, 1], 1).into(), frame: ([127, 0, 0, 1], 1).into() };
        let fleet = FleetConfig { sensors: vec![Default::default()], ..FleetConfig::default() };
        let h = run_fleet(fleet, ep).unwrap();
        tokio::time::sleep(Duration::from_millis(700)).await;
        assert_eq!(FleetStats::get(&h.stats.connects), 0);
        h.stop().await;
    }
}
