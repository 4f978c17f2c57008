#![allow(dead_code)]

use std::time::Duration;

use futures::StreamExt;
use iohrt_core::auth::{HashCost, Role};
use iohrt_edgesim::{DeviceLink, GatewayEndpoints};
use iohrt_core::protocol::{DeviceId, DeviceKind, Hello};
use iohrt_gateway::config::UserSeed;
use iohrt_gateway::{start, GatewayConfig, RunningGateway};
use reqwest::{Method, StatusCode};
use serde_json::Value;

pub const USERS: [(&str, Role); 5] = [
    ("viewer", Role::Viewer),
    ("oper", Role::Operator),
    ("oper2", Role::Operator),
    ("dev", Role::Developer),
    ("admin", Role::Admin),
];

pub fn password(user: &str) -> String {
    format!("pw-{user}-secret")
}

pub fn test_config() -> GatewayConfig {
    let mut cfg = GatewayConfig::loopback();
    cfg.hash_cost = HashCost { memory_kib: 64, iterations: 1 };
    cfg.bootstrap_users = USERS
        .iter()
        .map(|(u, r)| UserSeed { username: (*u).into(), password: password(u), role: *r })
        .collect();
    cfg
}

pub struct Harness {
    pub gw: RunningGateway,
    pub http: reqwest::Client,
}

impl Harness {
    pub async fn start() -> Self {
        Self::with_config(test_config()).await
    }

    pub async fn with_config(cfg: GatewayConfig) -> Self {
        let gw = start(cfg).await.expect("gateway starts");
        Self { gw, http: reqwest::Client::new() }
    }

    pub fn endpoints(&self) -> GatewayEndpoints {
        GatewayEndpoints { device: self.gw.device_addr, frame: self.gw.frame_addr }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.gw.base_url(), path)
    }

    pub async fn login(&self, user: &str) -> String {
        let (status, body) = self
            .call(Method::POST, "/api/login", None, Some(serde_json::json!({"username": user, "password": password(user)})))
            .await;
        assert_eq!(status, StatusCode::OK, "login {user}: {body}");
        body["token"].as_str().expect("token").to_owned()
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self.http.request(method, self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.expect("request");
        let status = resp.status();
        let bytes = resp.bytes().await.expect("body");
        let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        (status, value)
    }

    pub async fn get(&self, path: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }

    pub async fn connect(&self, id: &str, hello: Hello) -> DeviceLink {
        DeviceLink::connect(self.gw.device_addr, DeviceId::new(id).unwrap(), hello).await.expect("device connects")
    }

    pub async fn connect_robot(&self, id: &str, pose: Vec<f64>) -> DeviceLink {
        let dof = pose.len() as u32;
        self.connect(id, Hello { kind: DeviceKind::Robot, dof, pose: Some(pose), params: None }).await
    }

    pub async fn connect_simple(&self, id: &str, kind: DeviceKind) -> DeviceLink {
        self.connect(id, Hello { kind, dof: 0, pose: None, params: None }).await
    }

    pub async fn shutdown(self) {
        self.gw.shutdown().await.expect("clean shutdown");
    }
}

/// Polls `f` until it yields `Some` or the deadline passes.
pub async fn eventually<T, F, Fut>(timeout: Duration, mut f: F) -> Option<T>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Option<T>>,
{
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        if let Some(v) = f().await {
            return Some(v);
        }
        if tokio::time::Instant::now() >= deadline {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

pub type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

pub async fn open_ws(h: &Harness, token: &str, topics: &str) -> Ws {
    let url = format!("ws://{}/ws/telemetry?token={token}&topics={topics}", h.gw.http_addr);
    let (ws, _) = tokio_tungstenite::connect_async(url).await.expect("ws upgrade");
    ws
}

/// Next JSON text event, or `None` after `timeout`.
pub async fn next_event(ws: &mut Ws, timeout: Duration) -> Option<Value> {
    loop {
        let msg = tokio::time::timeout(timeout, ws.next()).await.ok()??.ok()?;
        if let tokio_tungstenite::tungstenite::Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).ok();
        }
    }
}
