//! Async MQTT client for the QoS 0 subset.
//!
//! [`ClientSession`] is the transport-free state machine (handshake ordering,
//! packet ids); [`MqttClient`] drives it over TCP with a reader task that
//! dispatches subscription callbacks in arrival order and a writer task that
//! keeps the connection alive with PINGREQ. A lost connection is reported
//! through [`MqttClient::closed`]; there is no automatic reconnect.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use parking_lot::{Mutex, RwLock};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::codec::{
    Codec, CodecError, ConnAck, Connect, ConnectReturnCode, LastWill, Packet, Publish, Subscribe, SUBACK_FAILURE,
};
use super::topic::{self, TopicError};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const SUBACK_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, thiserror::Error)]
pub enum ClientError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("broker refused connection: {0:?}")]
    Refused(ConnectReturnCode),
    #[error("not connected: the CONNACK has not been received")]
    NotConnected,
    #[error("session already closed: {0}")]
    SessionClosed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid topic: {0}")]
    Topic(#[from] TopicError),
    #[error("subscription to {0:?} rejected")]
    SubscribeRejected(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    AwaitingConnAck,
    Connected,
    Closed,
}

/// Transport-free client state: enforces CONNECT → CONNACK before any other
/// traffic and hands out SUBSCRIBE packet ids.
#[derive(Debug, Clone)]
pub struct ClientSession {
    state: SessionState,
    client_id: String,
    keep_alive_s: u16,
    will: Option<LastWill>,
    next_packet_id: u16,
}

impl ClientSession {
    pub fn new(client_id: impl Into<String>, keep_alive_s: u16) -> Self {
        Self {
            state: SessionState::Idle,
            client_id: client_id.into(),
            keep_alive_s,
            will: None,
            next_packet_id: 1,
        }
    }

    /// Message the broker publishes if this client goes away without DISCONNECT.
    pub fn with_will(mut self, will: LastWill) -> Self {
        self.will = Some(will);
        self
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn connect_packet(&mut self) -> Result<Packet, ClientError> {
        if self.state != SessionState::Idle {
            return Err(ClientError::Protocol("CONNECT already sent".into()));
        }
        self.state = SessionState::AwaitingConnAck;
        let mut connect = Connect::new(self.client_id.clone(), self.keep_alive_s);
        connect.will = self.will.clone();
        Ok(Packet::Connect(connect))
    }

    pub fn handle_connack(&mut self, ack: ConnAck) -> Result<(), ClientError> {
        if self.state != SessionState::AwaitingConnAck {
            return Err(ClientError::Protocol("unexpected CONNACK".into()));
        }
        if ack.return_code != ConnectReturnCode::Accepted {
            self.state = SessionState::Closed;
            return Err(ClientError::Refused(ack.return_code));
        }
        self.state = SessionState::Connected;
        Ok(())
    }

    fn require_connected(&self) -> Result<(), ClientError> {
        match self.state {
            SessionState::Connected => Ok(()),
            SessionState::Closed => Err(ClientError::SessionClosed("disconnected".into())),
            _ => Err(ClientError::NotConnected),
        }
    }

    pub fn publish_packet(&self, topic_name: &str, payload: Bytes, retain: bool) -> Result<Packet, ClientError> {
        self.require_connected()?;
        topic::validate_topic_name(topic_name)?;
        Ok(Packet::Publish(Publish {
            topic: topic_name.to_owned(),
            payload,
            retain,
            dup: false,
        }))
    }

    pub fn subscribe_packet(&mut self, filter: &str) -> Result<(u16, Packet), ClientError> {
        self.require_connected()?;
        topic::validate_topic_filter(filter)?;
        let packet_id = self.next_packet_id;
        self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
        Ok((
            packet_id,
            Packet::Subscribe(Subscribe {
                packet_id,
                filters: vec![(filter.to_owned(), 0)],
            }),
        ))
    }

    pub fn disconnect_packet(&mut self) -> Result<Packet, ClientError> {
        self.require_connected()?;
        self.state = SessionState::Closed;
        Ok(Packet::Disconnect)
    }

    pub fn mark_closed(&mut self) {
        self.state = SessionState::Closed;
    }
}

/// A received application message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub payload: Bytes,
    /// Set only on retained messages replayed at subscribe time.
    pub retain: bool,
}

pub type Callback = Arc<dyn Fn(&Message) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Link {
    Up,
    /// `None` after a local disconnect.
    Down(Option<String>),
}

enum Outgoing {
    Packet(Packet),
    Close,
}

struct Inner {
    session: Mutex<ClientSession>,
    out: mpsc::UnboundedSender<Outgoing>,
    callbacks: RwLock<Vec<(String, Callback)>>,
    pending: Mutex<HashMap<u16, oneshot::Sender<Vec<u8>>>>,
    link: watch::Sender<Link>,
    codec: Codec,
    writer: Mutex<Option<JoinHandle<()>>>,
}

impl Inner {
    fn fail(&self, reason: String) {
        self.link.send_if_modified(|link| {
            if *link == Link::Up {
                *link = Link::Down(Some(reason));
                true
            } else {
                false
            }
        });
        self.session.lock().mark_closed();
        self.pending.lock().clear();
        let _ = self.out.send(Outgoing::Close);
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub keep_alive_s: u16,
    pub max_payload: usize,
    pub will: Option<LastWill>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            keep_alive_s: 30,
            max_payload: super::codec::DEFAULT_MAX_PAYLOAD,
            will: None,
        }
    }
}

/// Closes the connection without DISCONNECT once the last handle is dropped,
/// so the broker publishes the will.
struct DropGuard(Arc<Inner>);

impl Drop for DropGuard {
    fn drop(&mut self) {
        self.0.fail("client dropped".into());
    }
}

/// Shareable client handle.
#[derive(Clone)]
pub struct MqttClient {
    inner: Arc<Inner>,
    _guard: Arc<DropGuard>,
}

impl std::fmt::Debug for MqttClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MqttClient")
            .field("client_id", &self.client_id())
            .field("connected", &self.is_connected())
            .finish()
    }
}

impl MqttClient {
    pub async fn connect(addr: impl ToSocketAddrs, client_id: &str, keep_alive_s: u16) -> Result<Self, ClientError> {
        Self::connect_with(
            addr,
            client_id,
            ClientOptions {
                keep_alive_s,
                ..ClientOptions::default()
            },
        )
        .await
    }

    /// Opens the TCP connection and completes the CONNECT/CONNACK handshake
    /// before returning.
    pub async fn connect_with(addr: impl ToSocketAddrs, client_id: &str, options: ClientOptions) -> Result<Self, ClientError> {
        let codec = Codec {
            max_payload: options.max_payload,
        };
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| ClientError::Timeout("TCP connect"))?
            .map_err(|e| ClientError::Connect(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (mut read_half, mut write_half) = stream.into_split();

        let mut session = ClientSession::new(client_id, options.keep_alive_s);
        if let Some(will) = options.will.clone() {
            session = session.with_will(will);
        }
        let mut buf = BytesMut::new();
        codec.encode(&session.connect_packet()?, &mut buf)?;
        write_half
            .write_all(&buf)
            .await
            .map_err(|e| ClientError::Connect(e.to_string()))?;

        buf.clear();
        let (ack, used) = tokio::time::timeout(CONNECT_TIMEOUT, async {
            loop {
                if let Some(found) = codec.decode(&buf)? {
                    return Ok::<_, ClientError>(found);
                }
                let n = read_half
                    .read_buf(&mut buf)
                    .await
                    .map_err(|e| ClientError::Connect(e.to_string()))?;
                if n == 0 {
                    return Err(ClientError::Connect("closed during handshake".into()));
                }
            }
        })
        .await
        .map_err(|_| ClientError::Timeout("CONNACK"))??;
        let _ = buf.split_to(used);
        match ack {
            Packet::ConnAck(ack) => session.handle_connack(ack)?,
            other => return Err(ClientError::Protocol(format!("expected CONNACK, got {}", other.name()))),
        }

        let (out, out_rx) = mpsc::unbounded_channel();
        let (link, _) = watch::channel(Link::Up);
        let inner = Arc::new(Inner {
            session: Mutex::new(session),
            out,
            callbacks: RwLock::new(Vec::new()),
            pending: Mutex::new(HashMap::new()),
            link,
            codec,
            writer: Mutex::new(None),
        });
        let keep_alive = (options.keep_alive_s > 0).then(|| Duration::from_secs(options.keep_alive_s as u64));
        let writer = tokio::spawn(write_loop(write_half, out_rx, inner.clone(), keep_alive));
        *inner.writer.lock() = Some(writer);
        tokio::spawn(read_loop(read_half, buf, inner.clone(), keep_alive));
        Ok(Self {
            _guard: Arc::new(DropGuard(inner.clone())),
            inner,
        })
    }

    pub fn client_id(&self) -> String {
        self.inner.session.lock().client_id().to_owned()
    }

    pub fn is_connected(&self) -> bool {
        *self.inner.link.borrow() == Link::Up
    }

    fn check_link(&self) -> Result<(), ClientError> {
        match &*self.inner.link.borrow() {
            Link::Up => Ok(()),
            Link::Down(reason) => Err(ClientError::SessionClosed(
                reason.clone().unwrap_or_else(|| "disconnected".into()),
            )),
        }
    }

    /// Fire-and-forget QoS 0 publish.
    pub fn publish(&self, topic_name: &str, payload: impl Into<Bytes>, retain: bool) -> Result<(), ClientError> {
        self.check_link()?;
        let payload = payload.into();
        if payload.len() > self.inner.codec.max_payload {
            return Err(CodecError::TooLarge {
                size: payload.len(),
                max: self.inner.codec.max_payload,
            }
            .into());
        }
        let packet = self.inner.session.lock().publish_packet(topic_name, payload, retain)?;
        self.inner
            .out
            .send(Outgoing::Packet(packet))
            .map_err(|_| ClientError::SessionClosed("writer stopped".into()))
    }

    /// Subscribes and waits for the SUBACK. The callback is registered first so
    /// retained messages delivered right after the SUBACK are not missed.
    /// Callbacks run on the receive task and must not block.
    pub async fn subscribe<F>(&self, filter: &str, callback: F) -> Result<(), ClientError>
    where
        F: Fn(&Message) + Send + Sync + 'static,
    {
        self.check_link()?;
        let (packet_id, packet) = self.inner.session.lock().subscribe_packet(filter)?;
        let callback: Callback = Arc::new(callback);
        self.inner.callbacks.write().push((filter.to_owned(), callback.clone()));
        let (tx, rx) = oneshot::channel();
        self.inner.pending.lock().insert(packet_id, tx);
        if self.inner.out.send(Outgoing::Packet(packet)).is_err() {
            return Err(ClientError::SessionClosed("writer stopped".into()));
        }
        let codes = match tokio::time::timeout(SUBACK_TIMEOUT, rx).await {
            Err(_) => Err(ClientError::Timeout("SUBACK")),
            Ok(Err(_)) => Err(self.check_link().err().unwrap_or(ClientError::SessionClosed("SUBACK lost".into()))),
            Ok(Ok(codes)) => Ok(codes),
        };
        match codes {
            Ok(codes) if codes.first().is_some_and(|&c| c != SUBACK_FAILURE) => Ok(()),
            other => {
                self.inner
                    .callbacks
                    .write()
                    .retain(|(f, cb)| !(f == filter && Arc::ptr_eq(cb, &callback)));
                match other {
                    Ok(_) => Err(ClientError::SubscribeRejected(filter.to_owned())),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// Sends DISCONNECT and closes the socket after flushing queued packets.
    pub async fn disconnect(&self) -> Result<(), ClientError> {
        self.check_link()?;
        let packet = self.inner.session.lock().disconnect_packet()?;
        self.inner.link.send_replace(Link::Down(None));
        let _ = self.inner.out.send(Outgoing::Packet(packet));
        let _ = self.inner.out.send(Outgoing::Close);
        let writer = self.inner.writer.lock().take();
        if let Some(writer) = writer {
            let _ = writer.await;
        }
        Ok(())
    }

    /// Resolves once the connection is gone. `Some(reason)` when it was lost
    /// rather than closed locally.
    pub async fn closed(&self) -> Option<String> {
        let mut rx = self.inner.link.subscribe();
        let link = rx.wait_for(|l| *l != Link::Up).await.map(|l| l.clone());
        match link {
            Ok(Link::Down(reason)) => reason,
            _ => Some("client dropped".into()),
        }
    }
}

async fn write_loop(
    mut half: OwnedWriteHalf,
    mut rx: mpsc::UnboundedReceiver<Outgoing>,
    inner: Arc<Inner>,
    keep_alive: Option<Duration>,
) {
    let codec = inner.codec;
    // ping at half the keep-alive so one late ping cannot trip the broker's 1.5x limit
    let ping_every = keep_alive.map(|k| k / 2);
    let mut last_write = Instant::now();
    let mut buf = BytesMut::with_capacity(4096);
    loop {
        let deadline = ping_every.map(|p| last_write + p);
        let item = tokio::select! {
            item = rx.recv() => item,
            _ = async {
                match deadline {
                    Some(d) => tokio::time::sleep_until(d).await,
                    None => std::future::pending().await,
                }
            } => Some(Outgoing::Packet(Packet::PingReq)),
        };
        let mut close = false;
        let mut next = item;
        while let Some(out) = next.take() {
            match out {
                Outgoing::Packet(p) => {
                    if let Err(e) = codec.encode(&p, &mut buf) {
                        log::warn!("dropping unencodable {}: {e}", p.name());
                    }
                }
                Outgoing::Close => {
                    close = true;
                    break;
                }
            }
            if buf.len() < 64 * 1024 {
                next = rx.try_recv().ok();
            }
        }
        if next.is_none() && !close && buf.is_empty() && rx.is_closed() {
            close = true;
        }
        if !buf.is_empty() {
            if let Err(e) = half.write_all(&buf).await {
                inner.fail(format!("write failed: {e}"));
                break;
            }
            buf.clear();
            last_write = Instant::now();
        }
        if close {
            break;
        }
    }
    let _ = half.shutdown().await;
}

async fn read_loop(mut half: OwnedReadHalf, mut buf: BytesMut, inner: Arc<Inner>, keep_alive: Option<Duration>) {
    let idle_limit = keep_alive.map(|k| k + k / 2);
    let reason = loop {
        let packet = loop {
            match inner.codec.decode(&buf) {
                Ok(Some((p, used))) => {
                    let _ = buf.split_to(used);
                    break Ok(p);
                }
                Ok(None) => {}
                Err(e) => break Err(format!("protocol error: {e}")),
            }
            let read = match idle_limit {
                Some(limit) => match tokio::time::timeout(limit, half.read_buf(&mut buf)).await {
                    Ok(r) => r,
                    Err(_) => break Err("broker silent beyond keep-alive".into()),
                },
                None => half.read_buf(&mut buf).await,
            };
            match read {
                Ok(0) => break Err("connection closed by broker".into()),
                Ok(_) => {}
                Err(e) => break Err(format!("read failed: {e}")),
            }
        };
        match packet {
            Ok(Packet::Publish(p)) => {
                let message = Message {
                    topic: p.topic,
                    payload: p.payload,
                    retain: p.retain,
                };
                let targets: Vec<Callback> = inner
                    .callbacks
                    .read()
                    .iter()
                    .filter(|(filter, _)| topic::matches(filter, &message.topic))
                    .map(|(_, cb)| cb.clone())
                    .collect();
                for cb in targets {
                    cb(&message);
                }
            }
            Ok(Packet::SubAck(ack)) => {
                if let Some(tx) = inner.pending.lock().remove(&ack.packet_id) {
                    let _ = tx.send(ack.return_codes);
                }
            }
            Ok(Packet::PingResp) => {}
            Ok(other) => break format!("unexpected {} from broker", other.name()),
            Err(reason) => break reason,
        }
    };
    if *inner.link.borrow() == Link::Up {
        log::debug!("mqtt link lost: {reason}");
    }
    inner.fail(reason);
}
