//! Cloud-layer gateway.
//!
//! Three listeners share one [`Shared`] state: the device stream port
//! (length-prefixed JSON envelopes), the frame datagram port, and the
//! HTTP/WebSocket API.

pub mod config;
pub mod device_link;
pub mod error;
pub mod fanout;
pub mod frames;
pub mod http;
pub mod missions;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use iohrt_core::auth::{Auth, AuthConfig, AuthError};
use iohrt_core::store::{Store, StoreConfig, StoreError};
use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket};
use tokio::task::JoinHandle;

pub use config::{AnomalyRule, GatewayConfig};
pub use error::ApiError;
pub use state::Shared;

/// File name of the user database inside the data directory.
pub const USERS_FILE: &str = "users.json";

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("cannot bind {what} listener on {addr}: {source}")]
    Bind { what: &'static str, addr: SocketAddr, source: std::io::Error },
    #[error("cannot open store: {0}")]
    Store(#[from] StoreError),
    #[error("cannot open user database: {0}")]
    Auth(#[from] AuthError),
}

pub struct RunningGateway {
    pub device_addr: SocketAddr,
    pub frame_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub state: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningGateway {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// Stops all listeners, waits briefly for tasks to drain, then flushes the store.
    pub async fn shutdown(self) -> Result<(), StoreError> {
        self.state.begin_shutdown();
        for task in self.tasks {
            let abort = task.abort_handle();
            if tokio::time::timeout(Duration::from_secs(5), task).await.is_err() {
                abort.abort();
            }
        }
        self.state.store.flush()
    }
}

fn bind_err(what: &'static str, addr: SocketAddr) -> impl FnOnce(std::io::Error) -> StartError {
    move |source| StartError::Bind { what, addr, source }
}

pub async fn start(config: GatewayConfig) -> Result<RunningGateway, StartError> {
    config.validate()?;
    let store = Store::open(StoreConfig {
        dir: config.data_dir.clone(),
        frame_capacity: config.frame_ring_capacity,
        sync_writes: config.sync_writes,
    })?;
    let auth = Auth::open(AuthConfig {
        users_file: config.data_dir.as_ref().map(|d| d.join(USERS_FILE)),
        token_ttl_ms: config.token_ttl_ms,
        hash_cost: config.hash_cost,
    })?;
    if auth.user_count() == 0 {
        for seed in &config.bootstrap_users {
            auth.insert_user(&seed.username, &seed.password, seed.role, iohrt_core::time::now_ms())?;
        }
    }

    let device_listener = TcpListener::bind(config.device_addr).await.map_err(bind_err("device", config.device_addr))?;
    let frame_socket = UdpSocket::bind(config.frame_addr).await.map_err(bind_err("frame", config.frame_addr))?;
    let http_listener = TcpListener::bind(config.http_addr).await.map_err(bind_err("http", config.http_addr))?;
    let device_addr = device_listener.local_addr().map_err(bind_err("device", config.device_addr))?;
    let frame_addr = frame_socket.local_addr().map_err(bind_err("frame", config.frame_addr))?;
    let http_addr = http_listener.local_addr().map_err(bind_err("http", config.http_addr))?;

    let state = Arc::new(Shared::new(config, auth, store));
    let mut tasks = Vec::new();
    tasks.push(tokio::spawn(device_link::run_device_listener(device_listener, state.clone(), state.shutdown_signal())));
    tasks.push(tokio::spawn(frames::run_frame_ingest(Arc::new(frame_socket), state.clone(), state.shutdown_signal())));

    let app = http::router(state.clone());
    let mut stop = state.shutdown_signal();
    tasks.push(tokio::spawn(async move {
        let serve = axum::serve(http_listener, app).with_graceful_shutdown(async move {
            let _ = stop.wait_for(|v| *v).await;
        });
        if let Err(e) = serve.await {
            tracing::error!(error = %e, "http server failed");
        }
    }));

    let sweeper = state.clone();
    let mut stop = state.shutdown_signal();
    tasks.push(tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_millis(sweeper.config.heartbeat_interval_ms));
        loop {
            tokio::select! {
                _ = tick.tick() => {
                    sweeper.sweep_stale();
                    sweeper.release_expired_sessions();
                }
                _ = stop.changed() => break,
            }
        }
    }));

    tracing::info!(%device_addr, %frame_addr, %http_addr, "gateway listening");
    Ok(RunningGateway { device_addr, frame_addr, http_addr, state, tasks })
}
