//! Device-side client for the gateway's stream port.

use std::net::SocketAddr;
use std::time::Duration;

use bytes::{Buf, BytesMut};
use iohrt_core::protocol::{
    decode_envelope, encode_envelope, DeviceId, Envelope, ErrorBody, Hello, HelloAck, Message, ProtocolError,
};
use iohrt_core::time::now_ms;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("gateway rejected the device: {} ({})", .0.message, .0.code)]
    Rejected(ErrorBody),
    #[error("link closed by gateway")]
    Closed,
    #[error("no hello_ack within the handshake timeout")]
    Timeout,
    #[error("unexpected {0} during handshake")]
    Unexpected(&'static str),
}

pub struct LinkSender {
    wr: OwnedWriteHalf,
    id: DeviceId,
    seq: u64,
}

impl LinkSender {
    pub async fn send(&mut self, msg: Message) -> Result<(), LinkError> {
        self.seq += 1;
        let env = Envelope::new(Some(self.id.clone()), self.seq, now_ms(), msg);
        self.wr.write_all(&encode_envelope(&env)?).await?;
        Ok(())
    }

    /// Writes pre-encoded bytes as they are, for protocol fault injection.
    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), LinkError> {
        self.wr.write_all(bytes).await?;
        Ok(())
    }

    pub fn id(&self) -> &DeviceId {
        &self.id
    }
}

pub struct LinkReceiver {
    rd: OwnedReadHalf,
    buf: BytesMut,
}

impl LinkReceiver {
    /// Next envelope, or `None` once the gateway closes the link. Safe to
    /// cancel: partial input stays buffered.
    pub async fn recv(&mut self) -> Result<Option<Envelope>, LinkError> {
        loop {
            if let Some((env, used)) = decode_envelope(&self.buf)? {
                self.buf.advance(used);
                return Ok(Some(env));
            }
            self.buf.reserve(8192);
            if self.rd.read_buf(&mut self.buf).await? == 0 {
                return Ok(None);
            }
        }
    }
}

/// A registered device link.
pub struct DeviceLink {
    pub tx: LinkSender,
    pub rx: LinkReceiver,
    pub ack: HelloAck,
}

impl DeviceLink {
    /// Connects, sends `hello` and waits for the gateway's acknowledgement.
    pub async fn connect(addr: SocketAddr, id: DeviceId, hello: Hello) -> Result<Self, LinkError> {
        let stream = TcpStream::connect(addr).await?;
        let _ = stream.set_nodelay(true);
        let (rd, wr) = stream.into_split();
        let mut tx = LinkSender { wr, id, seq: 0 };
        let mut rx = LinkReceiver { rd, buf: BytesMut::with_capacity(8192) };
        tx.send(Message::Hello(hello)).await?;
        let first = tokio::time::timeout(HANDSHAKE_TIMEOUT, rx.recv()).await.map_err(|_| LinkError::Timeout)??;
        match first.map(|e| e.message) {
            Some(Message::HelloAck(ack)) => Ok(Self { tx, rx, ack }),
            Some(Message::Error(body)) => Err(LinkError::Rejected(body)),
            Some(other) => Err(LinkError::Unexpected(other.msg_type())),
            None => Err(LinkError::Closed),
        }
    }
}
