//! Device stream listener: one task per connection.

use std::sync::Arc;
use std::time::Duration;

use bytes::{Buf, BytesMut};
use iohrt_core::protocol::{
    decode_envelope, encode_envelope, DeviceId, DeviceKind, Envelope, ErrorBody, HelloAck, Message, ProtocolError,
    SeqGuard,
};
use iohrt_core::time::now_ms;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};

use crate::state::{Shared, LINK_QUEUE};

#[derive(Debug, Error)]
enum LinkError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connection closed mid-envelope")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

async fn read_envelope(rd: &mut OwnedReadHalf, buf: &mut BytesMut) -> Result<Option<Envelope>, LinkError> {
    loop {
        if let Some((env, used)) = decode_envelope(buf)? {
            buf.advance(used);
            return Ok(Some(env));
        }
        buf.reserve(8192);
        if rd.read_buf(buf).await? == 0 {
            return if buf.is_empty() { Ok(None) } else { Err(LinkError::Truncated) };
        }
    }
}

fn error_message(code: &str, message: impl Into<String>) -> Message {
    Message::Error(ErrorBody { code: code.into(), message: message.into() })
}

async fn reject(mut wr: OwnedWriteHalf, code: &str, message: String) {
    tracing::debug!(code, %message, "rejecting device link");
    let env = Envelope::new(None, 1, now_ms(), error_message(code, message));
    if let Ok(bytes) = encode_envelope(&env) {
        let _ = wr.write_all(&bytes).await;
    }
    let _ = wr.shutdown().await;
}

async fn run_writer(mut wr: OwnedWriteHalf, mut rx: mpsc::Receiver<Message>, id: DeviceId) {
    let mut seq = 0u64;
    while let Some(msg) = rx.recv().await {
        seq += 1;
        let env = Envelope::new(Some(id.clone()), seq, now_ms(), msg);
        let bytes = match encode_envelope(&env) {
            Ok(b) => b,
            Err(e) => {
                tracing::error!(device = %id, error = %e, "dropping unencodable message");
                continue;
            }
        };
        if let Err(e) = wr.write_all(&bytes).await {
            tracing::debug!(device = %id, error = %e, "device write failed");
            break;
        }
    }
    let _ = wr.shutdown().await;
}

pub async fn run_device_listener(listener: TcpListener, state: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tracing::debug!(%peer, "device connection");
                    tokio::spawn(handle_device_link(stream, state.clone(), shutdown.clone()));
                }
                Err(e) => {
                    tracing::warn!(error = %e, "device accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            _ = shutdown.changed() => break,
        }
    }
}

/// Runs one device session: hello, registration, then message dispatch
/// until the link closes, misbehaves, times out or the gateway stops.
pub async fn handle_device_link(stream: TcpStream, state: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    let _ = stream.set_nodelay(true);
    let (mut rd, wr) = stream.into_split();
    let mut buf = BytesMut::with_capacity(8192);
    let mut guard = SeqGuard::default();

    let hello_wait = Duration::from_millis(state.config.hello_timeout_ms);
    let first = match tokio::time::timeout(hello_wait, read_envelope(&mut rd, &mut buf)).await {
        Err(_) => return reject(wr, "hello_timeout", "no hello received".into()).await,
        Ok(Err(e)) => return reject(wr, "protocol_error", e.to_string()).await,
        Ok(Ok(None)) => return,
        Ok(Ok(Some(env))) => env,
    };
    let _ = guard.check(first.seq);
    let (Message::Hello(hello), Some(id)) = (first.message, first.device_id) else {
        return reject(wr, "protocol_error", "first message must be a hello carrying device_id".into()).await;
    };

    let (tx, rx) = mpsc::channel(LINK_QUEUE);
    let (rec, kill) = match state.attach_device(id.clone(), &hello, tx.clone()).await {
        Ok(r) => r,
        Err(e) => return reject(wr, e.code(), e.to_string()).await,
    };
    tracing::info!(device = %id, kind = %rec.kind, epoch = rec.epoch, "device registered");
    tokio::spawn(run_writer(wr, rx, id.clone()));
    let ack = HelloAck { uuid: rec.uuid, heartbeat_interval_ms: state.config.heartbeat_interval_ms };
    if tx.send(Message::HelloAck(ack)).await.is_err() {
        state.detach_device(&id, rec.epoch);
        return;
    }
    if rec.kind == DeviceKind::Robot {
        state.dispatch_pending(&id).await;
    }

    loop {
        let env = tokio::select! {
            r = read_envelope(&mut rd, &mut buf) => r,
            _ = kill.notified() => break,
            _ = shutdown.changed() => break,
        };
        let env = match env {
            Ok(Some(env)) => env,
            Ok(None) => break,
            Err(e) => {
                state.counters.link_errors.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                tracing::info!(device = %id, error = %e, "closing device link");
                let _ = tx.try_send(error_message("protocol_error", e.to_string()));
                break;
            }
        };
        if let Err(reason) = check_envelope(&env, &id, &mut guard) {
            let _ = tx.try_send(error_message("protocol_error", reason));
            break;
        }
        if !state.registry.touch(&id, rec.epoch, state.now()) {
            break;
        }
        match env.message {
            Message::Reading(r) => {
                if let Err(e) = state.ingest_reading(&id, r).await {
                    tracing::error!(device = %id, error = %e, "reading not stored");
                    let _ = tx.try_send(error_message(e.code(), e.to_string()));
                }
            }
            Message::RobotState(s) if rec.kind == DeviceKind::Robot => state.ingest_robot_state(&id, s).await,
            Message::Heartbeat => {}
            Message::LatencyProbe(p) => {
                let _ = tx.try_send(Message::LatencyEcho(p));
            }
            Message::Error(b) => tracing::warn!(device = %id, code = %b.code, message = %b.message, "device reported error"),
            other => {
                let _ = tx.try_send(error_message("protocol_error", format!("unexpected {} from device", other.msg_type())));
                break;
            }
        }
    }
    state.detach_device(&id, rec.epoch);
    tracing::info!(device = %id, "device link closed");
}

fn check_envelope(env: &Envelope, id: &DeviceId, guard: &mut SeqGuard) -> Result<(), String> {
    if env.device_id.as_ref().is_some_and(|d| d != id) {
        return Err(format!("envelope names {:?} on the link of {id}", env.device_id));
    }
    guard.check(env.seq).map_err(|e| e.to_string())
}
