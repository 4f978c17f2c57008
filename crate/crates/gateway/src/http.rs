//! REST, multipart and WebSocket interface.

use std::collections::{HashMap, HashSet};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use iohrt_core::auth::{Action, Role};
use iohrt_core::control::{AutonomyMode, ControlParams};
use iohrt_core::protocol::{ActuatorSet, DeviceId, DeviceKind, Message, RobotState};
use iohrt_core::registry::{DeviceRecord, Grant, SessionId};
use iohrt_core::store::ReadingRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::AnomalyRule;
use crate::error::ApiError;
use crate::fanout::Topic;
use crate::state::{parse_device, CommandRequest, Shared};

type AppState = Arc<Shared>;
type ApiResult<T> = Result<T, ApiError>;

/// Default and maximum `limit` for reading queries.
pub const DEFAULT_READING_LIMIT: usize = 1_000;
pub const MAX_READING_LIMIT: usize = 100_000;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut resp = (status, Json(self.body())).into_response();
        if let ApiError::LockedOut { retry_after_ms } = self {
            let secs = retry_after_ms.div_ceil(1000).to_string();
            if let Ok(v) = HeaderValue::from_str(&secs) {
                resp.headers_mut().insert(header::RETRY_AFTER, v);
            }
        }
        resp
    }
}

/// Bearer token from the `Authorization` header, or the `token` query
/// parameter for clients that cannot set headers (image tags, WebSockets).
pub struct Caller(pub Option<String>);

impl<S: Send + Sync> FromRequestParts<S> for Caller {
    type Rejection = Infallible;

    async fn from_request_parts(parts: &mut Parts, _state: &S) -> Result<Self, Self::Rejection> {
        let from_header = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|t| t.trim().to_owned());
        let from_query = || {
            parts.uri.query().and_then(|q| {
                q.split('&').find_map(|kv| kv.strip_prefix("token=")).map(|t| t.to_owned())
            })
        };
        Ok(Caller(from_header.or_else(from_query)))
    }
}

impl Caller {
    fn token(&self) -> Option<&str> {
        self.0.as_deref()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::Invalid(format!("request body: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/login", post(login))
        .route("/api/logout", post(logout))
        .route("/api/stats", get(stats))
        .route("/api/devices", get(list_devices))
        .route("/api/devices/{id}", get(get_device))
        .route("/api/sensors/{id}/readings", get(readings))
        .route("/api/robots/{id}/acquire", post(acquire))
        .route("/api/robots/{id}/release", post(release))
        .route("/api/robots/{id}/command", post(command))
        .route("/api/robots/{id}/goal", post(goal))
        .route("/api/robots/{id}/config", put(set_config))
        .route("/api/actuators/{id}/set", post(actuator_set))
        .route("/api/cameras/{id}/frame", get(frame))
        .route("/api/cameras/{id}/stream", get(stream))
        .route("/api/missions", get(missions))
        .route("/api/missions/{id}/ack", post(ack_mission))
        .route("/api/alerts", get(alerts))
        .route("/api/rules", get(get_rules).put(put_rules))
        .route("/api/sessions/{id}", get(session_log))
        .route("/api/users", get(list_users).post(create_user))
        .route("/api/users/{name}/role", put(set_role))
        .route("/ws/telemetry", get(telemetry))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoginRequest {
    username: String,
    password: String,
}

async fn login(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: LoginRequest = parse_body(&body)?;
    let state = s.clone();
    // Password hashing is CPU-bound; keep it off the async workers.
    let issued = tokio::task::spawn_blocking(move || state.auth.authenticate(&req.username, &req.password, state.now()))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(issued).into_response())
}

async fn logout(State(s): State<AppState>, caller: Caller) -> ApiResult<Json<serde_json::Value>> {
    let token = caller.token().ok_or(ApiError::Unauthenticated)?;
    let who = s.auth.logout(token, s.now())?;
    let released = s.registry.release_session(&who.session_id);
    Ok(Json(serde_json::json!({ "released": released })))
}

#[derive(Serialize)]
struct Stats {
    devices_connected: usize,
    devices_known: usize,
    commands_accepted: u64,
    readings_ingested: u64,
    link_errors: u64,
    telemetry_subscribers: usize,
    telemetry_dropped: u64,
    stale_frames: u64,
    frames: crate::frames::FrameStatsSnapshot,
}

async fn stats(State(s): State<AppState>, caller: Caller) -> ApiResult<Json<Stats>> {
    s.authorize(caller.token(), Action::ReadDevices)?;
    let devices = s.registry.snapshot();
    let load = |a: &std::sync::atomic::AtomicU64| a.load(std::sync::atomic::Ordering::Relaxed);
    Ok(Json(Stats {
        devices_connected: devices.iter().filter(|d| d.is_connected()).count(),
        devices_known: devices.len(),
        commands_accepted: load(&s.counters.commands_accepted),
        readings_ingested: load(&s.counters.readings_ingested),
        link_errors: load(&s.counters.link_errors),
        telemetry_subscribers: s.fanout.subscriber_count(),
        telemetry_dropped: s.fanout.dropped_count(),
        stale_frames: s.store.stale_frame_count(),
        frames: s.frames.stats.snapshot(),
    }))
}

#[derive(Serialize)]
struct RobotView {
    setpoint: Vec<f64>,
    cmd_seq: u64,
    mode: AutonomyMode,
    goal: Option<Vec<f64>>,
    last_state: Option<RobotState>,
}

#[derive(Serialize)]
struct DeviceView {
    #[serde(flatten)]
    record: DeviceRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    robot: Option<RobotView>,
}

async fn view(s: &Shared, record: DeviceRecord) -> DeviceView {
    let robot = match s.robot_slot(&record.id) {
        Some(slot) if record.is_robot() => {
            let slot = slot.lock().await;
            Some(RobotView {
                setpoint: slot.setpoint.coords().to_vec(),
                cmd_seq: slot.cmd_seq,
                mode: slot.mode,
                goal: slot.goal.clone(),
                last_state: slot.last_state.clone(),
            })
        }
        _ => None,
    };
    DeviceView { record, robot }
}

async fn list_devices(State(s): State<AppState>, caller: Caller) -> ApiResult<Json<Vec<DeviceView>>> {
    s.authorize(caller.token(), Action::ReadDevices)?;
    let mut out = Vec::new();
    for rec in s.registry.snapshot() {
        out.push(view(&s, rec).await);
    }
    Ok(Json(out))
}

fn lookup(s: &Shared, id: &str) -> ApiResult<DeviceRecord> {
    let id = parse_device(id)?;
    s.registry.lookup(&id).ok_or_else(|| ApiError::NotFound(format!("unknown device {id}")))
}

fn lookup_kind(s: &Shared, id: &str, kind: DeviceKind) -> ApiResult<DeviceRecord> {
    let rec = lookup(s, id)?;
    if rec.kind != kind {
        return Err(ApiError::NotFound(format!("device {} is not a {kind}", rec.id)));
    }
    Ok(rec)
}

async fn get_device(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<Json<DeviceView>> {
    s.authorize(caller.token(), Action::ReadDevices)?;
    let rec = lookup(&s, &id)?;
    Ok(Json(view(&s, rec).await))
}

fn query_u64(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<u64>> {
    q.get(key)
        .map(|v| v.parse::<u64>().map_err(|_| ApiError::Invalid(format!("{key} must be a non-negative integer"))))
        .transpose()
}

async fn readings(
    State(s): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Vec<ReadingRecord>>> {
    s.authorize(caller.token(), Action::ReadTelemetry)?;
    let dev = parse_device(&id)?;
    if s.registry.lookup(&dev).is_none() && s.store.channels(&dev).is_empty() {
        return Err(ApiError::NotFound(format!("unknown sensor {dev}")));
    }
    let from = query_u64(&q, "from")?.unwrap_or(0);
    let to = query_u64(&q, "to")?.unwrap_or(u64::MAX);
    let limit = query_u64(&q, "limit")?.map_or(DEFAULT_READING_LIMIT, |l| l as usize);
    if limit > MAX_READING_LIMIT {
        return Err(ApiError::Invalid(format!("limit must be <= {MAX_READING_LIMIT}")));
    }
    let rows = match q.get("channel") {
        Some(ch) => s.store.query_readings(&dev, ch, from, to, limit)?,
        None => s.store.query_device_readings(&dev, from, to, limit)?,
    };
    Ok(Json(rows))
}

#[derive(Serialize)]
struct ControlReply {
    device_id: DeviceId,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    previous_holder: Option<SessionId>,
}

async fn acquire(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<Json<ControlReply>> {
    let who = s.authorize(caller.token(), Action::AcquireControl)?;
    let rec = lookup_kind(&s, &id, DeviceKind::Robot)?;
    let status = match s.registry.acquire_control(&who.session_id, &rec.id)? {
        Grant::Granted => "granted",
        Grant::AlreadyHeld => "already_held",
    };
    s.publish(Topic::Device, Some(&rec.id), s.registry.lookup(&rec.id));
    Ok(Json(ControlReply { device_id: rec.id, status, previous_holder: None }))
}

async fn release(
    State(s): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<ControlReply>> {
    let force = q.get("force").is_some_and(|v| v == "true" || v == "1");
    let action = if force { Action::ForceRelease } else { Action::ReleaseControl };
    let who = s.authorize(caller.token(), action)?;
    let rec = lookup_kind(&s, &id, DeviceKind::Robot)?;
    let previous_holder = if force {
        s.registry.force_release(&rec.id)?
    } else {
        s.registry.release_control(&who.session_id, &rec.id)?;
        None
    };
    s.publish(Topic::Device, Some(&rec.id), s.registry.lookup(&rec.id));
    Ok(Json(ControlReply { device_id: rec.id, status: "released", previous_holder }))
}

async fn command(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let who = s.authorize(caller.token(), Action::SendCommand)?;
    let dev = lookup(&s, &id)?.id;
    let req: CommandRequest = parse_body(&body)?;
    Ok(Json(s.route_command(&who, &dev, req).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalRequest {
    goal: Vec<f64>,
}

async fn goal(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let who = s.authorize(caller.token(), Action::SetGoal)?;
    let dev = lookup(&s, &id)?.id;
    let req: GoalRequest = parse_body(&body)?;
    Ok(Json(s.set_goal(&who, &dev, req.goal).await?).into_response())
}

async fn set_config(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<DeviceRecord>> {
    s.authorize(caller.token(), Action::RegisterDeviceConfig)?;
    let dev = lookup_kind(&s, &id, DeviceKind::Robot)?.id;
    let params: ControlParams<f64> = parse_body(&body)?;
    let rec = s.registry.set_config(&dev, params)?;
    s.publish(Topic::Device, Some(&dev), &rec);
    Ok(Json(rec))
}

async fn actuator_set(State(s): State<AppState>, caller: Caller, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ActuatorSet>> {
    s.authorize(caller.token(), Action::SetActuator)?;
    let rec = lookup_kind(&s, &id, DeviceKind::Actuator)?;
    let req: ActuatorSet = parse_body(&body)?;
    let msg = Message::ActuatorSet(req.clone());
    msg.validate().map_err(|e| ApiError::Invalid(e.to_string()))?;
    if !rec.is_connected() {
        return Err(ApiError::DeviceOffline(format!("actuator {} is disconnected", rec.id)));
    }
    s.send_to_device(&rec.id, msg)?;
    s.publish(Topic::Actuator, Some(&rec.id), &req);
    Ok(Json(req))
}

async fn frame(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ReadFrames)?;
    let rec = lookup_kind(&s, &id, DeviceKind::Camera)?;
    let f = s
        .store
        .latest_frame(&rec.id)
        .ok_or_else(|| ApiError::NotFound(format!("camera {} has no frame yet", rec.id)))?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/jpeg".to_owned()),
            (header::CACHE_CONTROL, "no-store".to_owned()),
            (header::HeaderName::from_static("x-frame-seq"), f.frame_seq.to_string()),
            (header::HeaderName::from_static("x-frame-timestamp"), f.timestamp_ms.to_string()),
        ],
        f.image.clone(),
    )
        .into_response())
}

pub const STREAM_BOUNDARY: &str = "frame";

fn multipart_part(seq: u32, timestamp_ms: u64, image: &[u8]) -> Bytes {
    let head = format!(
        "--{STREAM_BOUNDARY}\r\nContent-Type: image/jpeg\r\nContent-Length: {}\r\nX-Frame-Seq: {seq}\r\nX-Frame-Timestamp: {timestamp_ms}\r\n\r\n",
        image.len()
    );
    let mut out = Vec::with_capacity(head.len() + image.len() + 2);
    out.extend_from_slice(head.as_bytes());
    out.extend_from_slice(image);
    out.extend_from_slice(b"\r\n");
    Bytes::from(out)
}

struct StreamCursor {
    state: AppState,
    camera: DeviceId,
    changes: tokio::sync::watch::Receiver<u64>,
    shutdown: tokio::sync::watch::Receiver<bool>,
    last: Option<(u32, u64)>,
    last_sent: Option<Instant>,
    min_gap: Duration,
}

impl StreamCursor {
    /// Next part to emit: the latest frame once it is newer than the last one
    /// sent and the rate limit allows. A camera re-registration (new epoch)
    /// restarts sequencing.
    async fn next_part(&mut self) -> Option<Bytes> {
        loop {
            if *self.shutdown.borrow() {
                return None;
            }
            self.changes.borrow_and_update();
            let epoch = self.state.registry.lookup(&self.camera).map_or(0, |r| r.epoch);
            if let Some(f) = self.state.store.latest_frame(&self.camera) {
                let fresh = match self.last {
                    None => true,
                    Some((seq, last_epoch)) => f.frame_seq > seq || epoch != last_epoch,
                };
                if fresh {
                    let wait = self.last_sent.map_or(Duration::ZERO, |t| self.min_gap.saturating_sub(t.elapsed()));
                    if wait.is_zero() {
                        self.last = Some((f.frame_seq, epoch));
                        self.last_sent = Some(Instant::now());
                        return Some(multipart_part(f.frame_seq, f.timestamp_ms, &f.image));
                    }
                    tokio::select! {
                        _ = tokio::time::sleep(wait) => {}
                        _ = self.shutdown.changed() => return None,
                    }
                    continue;
                }
            }
            tokio::select! {
                changed = self.changes.changed() => if changed.is_err() { return None },
                _ = self.shutdown.changed() => return None,
            }
        }
    }
}

async fn stream(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ReadFrames)?;
    let rec = lookup_kind(&s, &id, DeviceKind::Camera)?;
    let cursor = StreamCursor {
        changes: s.frames.subscribe(&rec.id),
        shutdown: s.shutdown_signal(),
        camera: rec.id,
        last: None,
        last_sent: None,
        min_gap: Duration::from_secs_f64(1.0 / s.config.max_stream_hz),
        state: s.clone(),
    };
    let parts = futures::stream::unfold(cursor, |mut c| async move {
        c.next_part().await.map(|b| (Ok::<_, Infallible>(b), c))
    });
    Ok((
        [
            (header::CONTENT_TYPE, format!("multipart/x-mixed-replace; boundary={STREAM_BOUNDARY}")),
            (header::CACHE_CONTROL, "no-store".to_owned()),
        ],
        Body::from_stream(parts),
    )
        .into_response())
}

async fn missions(State(s): State<AppState>, caller: Caller) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ReadMissions)?;
    Ok(Json(s.missions.missions()).into_response())
}

async fn ack_mission(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::AckMission)?;
    let m = s.missions.acknowledge(&id, s.now())?;
    s.publish(Topic::Mission, Some(&m.target_robot), &m);
    Ok(Json(m).into_response())
}

async fn alerts(State(s): State<AppState>, caller: Caller) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ReadMissions)?;
    Ok(Json(s.missions.alerts()).into_response())
}

async fn get_rules(State(s): State<AppState>, caller: Caller) -> ApiResult<Json<Vec<AnomalyRule>>> {
    s.authorize(caller.token(), Action::ReadRules)?;
    Ok(Json(s.rules.read().clone()))
}

async fn put_rules(State(s): State<AppState>, caller: Caller, body: Bytes) -> ApiResult<Json<Vec<AnomalyRule>>> {
    s.authorize(caller.token(), Action::UpdateAnomalyRule)?;
    let rules: Vec<AnomalyRule> = parse_body(&body)?;
    for r in &rules {
        r.validate().map_err(|e| ApiError::Invalid(e.to_string()))?;
    }
    let mut ids: Vec<&str> = rules.iter().map(|r| r.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != rules.len() {
        return Err(ApiError::Invalid("rule ids must be unique".into()));
    }
    *s.rules.write() = rules.clone();
    Ok(Json(rules))
}

async fn session_log(State(s): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ReadSessionLog)?;
    let session = SessionId::new(id);
    let entries = s.store.export_session(&session);
    if entries.is_empty() && !s.auth.has_session(&session, s.now()) {
        return Err(ApiError::NotFound(format!("unknown session {session}")));
    }
    Ok(Json(entries).into_response())
}

#[derive(Serialize)]
struct UserView {
    username: String,
    role: Role,
    created_ms: u64,
}

async fn list_users(State(s): State<AppState>, caller: Caller) -> ApiResult<Json<Vec<UserView>>> {
    s.authorize(caller.token(), Action::ManageUsers)?;
    Ok(Json(
        s.auth
            .users()
            .into_iter()
            .map(|u| UserView { username: u.username, role: u.role, created_ms: u.created_ms })
            .collect(),
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewUser {
    username: String,
    password: String,
    role: Role,
}

async fn create_user(State(s): State<AppState>, caller: Caller, body: Bytes) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ManageUsers)?;
    let req: NewUser = parse_body(&body)?;
    let state = s.clone();
    let u = tokio::task::spawn_blocking(move || state.auth.insert_user(&req.username, &req.password, req.role, state.now()))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(UserView { username: u.username, role: u.role, created_ms: u.created_ms })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoleChange {
    role: Role,
}

async fn set_role(State(s): State<AppState>, caller: Caller, Path(name): Path<String>, body: Bytes) -> ApiResult<Json<UserView>> {
    s.authorize(caller.token(), Action::ManageUsers)?;
    let req: RoleChange = parse_body(&body)?;
    let u = s.auth.assign_role(&name, req.role)?;
    Ok(Json(UserView { username: u.username, role: u.role, created_ms: u.created_ms }))
}

fn parse_topics(q: &HashMap<String, String>) -> ApiResult<Option<HashSet<Topic>>> {
    let Some(raw) = q.get("topics").filter(|t| !t.is_empty()) else {
        return Ok(None);
    };
    raw.split(',')
        .map(|t| Topic::parse(t.trim()).ok_or_else(|| ApiError::Invalid(format!("unknown topic {t:?}"))))
        .collect::<ApiResult<HashSet<_>>>()
        .map(Some)
}

async fn telemetry(
    State(s): State<AppState>,
    caller: Caller,
    Query(q): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    s.authorize(caller.token(), Action::ReadTelemetry)?;
    let topics = parse_topics(&q)?;
    Ok(ws.on_upgrade(move |socket| telemetry_session(socket, s, topics)))
}

async fn telemetry_session(mut socket: WebSocket, s: AppState, topics: Option<HashSet<Topic>>) {
    let mut sub = s.fanout.subscribe(topics);
    let mut shutdown = s.shutdown_signal();
    loop {
        tokio::select! {
            event = sub.rx.recv() => {
                let Some(event) = event else { break };
                let Ok(text) = serde_json::to_string(&*event) else { continue };
                if socket.send(WsMessage::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(WsMessage::Close(_))) => break,
                Some(Ok(_)) => {}
            },
            _ = shutdown.changed() => break,
        }
    }
    s.fanout.unsubscribe(sub.id);
    let _ = socket.send(WsMessage::Close(None)).await;
}
