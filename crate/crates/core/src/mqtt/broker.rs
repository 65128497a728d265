//! TCP broker for the QoS 0 subset: CONNECT handshake, topic routing with
//! wildcards, retained messages, keep-alive enforcement and last-will delivery.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use parking_lot::RwLock;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use super::codec::{Codec, ConnAck, Connect, ConnectReturnCode, Packet, Publish, SubAck, SUBACK_FAILURE};
use super::topic;

/// Time a fresh connection gets to send CONNECT.
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub bind: SocketAddr,
    pub max_clients: usize,
    pub max_payload: usize,
}

impl BrokerConfig {
    pub fn new(bind: SocketAddr) -> Self {
        Self {
            bind,
            max_clients: 64,
            max_payload: super::codec::DEFAULT_MAX_PAYLOAD,
        }
    }

    /// Loopback with an OS-assigned port.
    pub fn ephemeral() -> Self {
        Self::new(SocketAddr::from(([127, 0, 0, 1], 0)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

enum Outbound {
    Packet(Packet),
    Close,
}

struct Session {
    conn_id: u64,
    tx: mpsc::UnboundedSender<Outbound>,
}

#[derive(Default)]
struct RoutingTable {
    sessions: HashMap<String, Session>,
    /// filter → subscribed client ids
    subscriptions: HashMap<String, HashSet<String>>,
    retained: HashMap<String, Bytes>,
}

impl RoutingTable {
    fn remove_client(&mut self, client_id: &str) {
        self.sessions.remove(client_id);
        self.subscriptions.retain(|_, clients| {
            clients.remove(client_id);
            !clients.is_empty()
        });
    }
}

struct Shared {
    table: RwLock<RoutingTable>,
    codec: Codec,
    max_clients: usize,
    next_conn: AtomicU64,
    delivered: AtomicU64,
}

impl Shared {
    /// Delivers once to every live client holding at least one matching filter.
    /// The forwarded copy never carries the retain flag.
    fn route(&self, publish: &Publish) {
        // retained update and fan-out happen under one lock so a concurrent
        // SUBSCRIBE sees either the retained copy or the live one, not both
        if publish.retain {
            let mut table = self.table.write();
            if publish.payload.is_empty() {
                table.retained.remove(&publish.topic);
            } else {
                table.retained.insert(publish.topic.clone(), publish.payload.clone());
            }
            self.fan_out(&table, publish);
        } else {
            self.fan_out(&self.table.read(), publish);
        }
    }

    fn fan_out(&self, table: &RoutingTable, publish: &Publish) {
        let mut targets: HashSet<&str> = HashSet::new();
        for (filter, clients) in &table.subscriptions {
            if topic::matches(filter, &publish.topic) {
                targets.extend(clients.iter().map(String::as_str));
            }
        }
        let forwarded = Publish {
            topic: publish.topic.clone(),
            payload: publish.payload.clone(),
            retain: false,
            dup: false,
        };
        for client in targets {
            if let Some(session) = table.sessions.get(client) {
                if session.tx.send(Outbound::Packet(Packet::Publish(forwarded.clone()))).is_ok() {
                    self.delivered.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
}

/// Handle to a running broker. Dropping the handle stops the broker;
/// [`BrokerHandle::shutdown`] also waits for the accept loop to exit.
pub struct BrokerHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    task: Option<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn client_count(&self) -> usize {
        self.shared.table.read().sessions.len()
    }

    pub fn retained(&self, topic: &str) -> Option<Bytes> {
        self.shared.table.read().retained.get(topic).cloned()
    }

    /// Total PUBLISH deliveries queued to subscribers.
    pub fn delivered(&self) -> u64 {
        self.shared.delivered.load(Ordering::Relaxed)
    }

    /// Stops accepting, closes every connection and waits for the listener.
    pub async fn shutdown(mut self) {
        self.stop_now();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    fn stop_now(&self) {
        let _ = self.stop.send(true);
        let table = self.shared.table.read();
        for session in table.sessions.values() {
            let _ = session.tx.send(Outbound::Close);
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        if self.task.is_some() {
            self.stop_now();
        }
    }
}

/// Binds the listener and spawns the accept loop on the current runtime.
pub async fn broker_serve(config: BrokerConfig) -> Result<BrokerHandle, BrokerError> {
    let listener = TcpListener::bind(config.bind).await.map_err(|source| BrokerError::Bind {
        addr: config.bind,
        source,
    })?;
    let local_addr = listener.local_addr().map_err(|source| BrokerError::Bind {
        addr: config.bind,
        source,
    })?;
    let shared = Arc::new(Shared {
        table: RwLock::new(RoutingTable::default()),
        codec: Codec {
            max_payload: config.max_payload,
        },
        max_clients: config.max_clients,
        next_conn: AtomicU64::new(1),
        delivered: AtomicU64::new(0),
    });
    let (stop, mut stopped) = watch::channel(false);
    let accept_shared = shared.clone();
    let task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = stopped.changed() => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nodelay(true);
                        let shared = accept_shared.clone();
                        let stop = stopped.clone();
                        tokio::spawn(async move {
                            if let Err(e) = serve_connection(stream, shared, stop).await {
                                log::debug!("connection {peer} closed: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                },
            }
        }
    });
    log::info!("broker listening on {local_addr}");
    Ok(BrokerHandle {
        local_addr,
        shared,
        stop,
        task: Some(task),
    })
}

#[derive(Debug, thiserror::Error)]
enum ConnectionError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("keep-alive expired")]
    KeepAlive,
    #[error("no CONNECT received")]
    ConnectTimeout,
}

struct PacketReader {
    half: OwnedReadHalf,
    buf: BytesMut,
    codec: Codec,
}

impl PacketReader {
    /// `Ok(None)` on clean EOF.
    async fn next(&mut self) -> Result<Option<Packet>, ConnectionError> {
        loop {
            match self.codec.decode(&self.buf) {
                Ok(Some((packet, used))) => {
                    let _ = self.buf.split_to(used);
                    return Ok(Some(packet));
                }
                Ok(None) => {}
                Err(e) => return Err(ConnectionError::Protocol(e.to_string())),
            }
            if self.half.read_buf(&mut self.buf).await? == 0 {
                return if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(ConnectionError::Protocol("connection closed mid-packet".into()))
                };
            }
        }
    }
}

async fn write_loop(mut half: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Outbound>, codec: Codec) {
    let mut buf = BytesMut::with_capacity(4096);
    'outer: while let Some(first) = rx.recv().await {
        let mut next = Some(first);
        // coalesce whatever is already queued into one write
        while let Some(item) = next.take() {
            match item {
                Outbound::Packet(p) => {
                    if let Err(e) = codec.encode(&p, &mut buf) {
                        log::warn!("dropping unencodable {}: {e}", p.name());
                    }
                }
                Outbound::Close => {
                    let _ = half.write_all(&buf).await;
                    break 'outer;
                }
            }
            if buf.len() < 64 * 1024 {
                next = rx.try_recv().ok();
            }
        }
        if half.write_all(&buf).await.is_err() {
            break;
        }
        buf.clear();
    }
    let _ = half.shutdown().await;
}

async fn serve_connection(
    stream: TcpStream,
    shared: Arc<Shared>,
    mut stop: watch::Receiver<bool>,
) -> Result<(), ConnectionError> {
    let (read_half, write_half) = stream.into_split();
    let mut reader = PacketReader {
        half: read_half,
        buf: BytesMut::with_capacity(4096),
        codec: shared.codec,
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(write_loop(write_half, rx, shared.codec));

    let connect = match tokio::time::timeout(CONNECT_TIMEOUT, reader.next()).await {
        Err(_) => return Err(ConnectionError::ConnectTimeout),
        Ok(Ok(Some(Packet::Connect(c)))) => c,
        Ok(Ok(Some(other))) => {
            return Err(ConnectionError::Protocol(format!("{} before CONNECT", other.name())));
        }
        Ok(Ok(None)) => return Ok(()),
        Ok(Err(e)) => return Err(e),
    };

    let conn_id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let client_id = match admit(&shared, &connect, conn_id, &tx) {
        Ok(id) => id,
        Err(code) => {
            let _ = tx.send(Outbound::Packet(Packet::ConnAck(ConnAck {
                session_present: false,
                return_code: code,
            })));
            let _ = tx.send(Outbound::Close);
            let _ = writer.await;
            return Ok(());
        }
    };
    let _ = tx.send(Outbound::Packet(Packet::ConnAck(ConnAck {
        session_present: false,
        return_code: ConnectReturnCode::Accepted,
    })));

    let idle_limit = (connect.keep_alive_s > 0).then(|| Duration::from_millis(connect.keep_alive_s as u64 * 1500));
    let result = session_loop(&mut reader, &shared, &client_id, &tx, idle_limit, &mut stop).await;

    let graceful = matches!(result, Ok(true));
    {
        let mut table = shared.table.write();
        if table.sessions.get(&client_id).is_some_and(|s| s.conn_id == conn_id) {
            table.remove_client(&client_id);
        }
    }
    if !graceful {
        if let Some(will) = &connect.will {
            shared.route(&Publish {
                topic: will.topic.clone(),
                payload: will.message.clone(),
                retain: will.retain,
                dup: false,
            });
        }
    }
    let _ = tx.send(Outbound::Close);
    let _ = writer.await;
    result.map(|_| ())
}

/// Registers the session, taking over any existing connection with the same id.
fn admit(
    shared: &Shared,
    connect: &Connect,
    conn_id: u64,
    tx: &mpsc::UnboundedSender<Outbound>,
) -> Result<String, ConnectReturnCode> {
    let client_id = if connect.client_id.is_empty() {
        if !connect.clean_session {
            return Err(ConnectReturnCode::IdentifierRejected);
        }
        format!("auto-{conn_id}")
    } else {
        connect.client_id.clone()
    };
    let mut table = shared.table.write();
    let takeover = table.sessions.contains_key(&client_id);
    if !takeover && table.sessions.len() >= shared.max_clients {
        return Err(ConnectReturnCode::ServerUnavailable);
    }
    if let Some(old) = table.sessions.get(&client_id) {
        let _ = old.tx.send(Outbound::Close);
    }
    // no persistent sessions: a reconnect starts with no subscriptions
    table.remove_client(&client_id);
    table.sessions.insert(
        client_id.clone(),
        Session {
            conn_id,
            tx: tx.clone(),
        },
    );
    Ok(client_id)
}

/// Returns `Ok(true)` after a DISCONNECT, `Ok(false)` on EOF or shutdown.
async fn session_loop(
    reader: &mut PacketReader,
    shared: &Shared,
    client_id: &str,
    tx: &mpsc::UnboundedSender<Outbound>,
    idle_limit: Option<Duration>,
    stop: &mut watch::Receiver<bool>,
) -> Result<bool, ConnectionError> {
    loop {
        let packet = tokio::select! {
            _ = stop.changed() => return Ok(false),
            next = async {
                match idle_limit {
                    Some(limit) => tokio::time::timeout(limit, reader.next()).await.map_err(|_| ConnectionError::KeepAlive)?,
                    None => reader.next().await,
                }
            } => next?,
        };
        let Some(packet) = packet else {
            return Ok(false);
        };
        match packet {
            Packet::Publish(p) => shared.route(&p),
            Packet::Subscribe(sub) => {
                let mut codes = Vec::with_capacity(sub.filters.len());
                let mut accepted = Vec::new();
                // one lock for register + SUBACK + retained replay, so no live
                // publish can slip in between
                let mut table = shared.table.write();
                // a superseded connection must not re-register
                if !table.sessions.get(client_id).is_some_and(|s| s.tx.same_channel(tx)) {
                    return Ok(false);
                }
                for (filter, _qos) in &sub.filters {
                    if topic::validate_topic_filter(filter).is_ok() {
                        table
                            .subscriptions
                            .entry(filter.clone())
                            .or_default()
                            .insert(client_id.to_owned());
                        accepted.push(filter.clone());
                        codes.push(0);
                    } else {
                        codes.push(SUBACK_FAILURE);
                    }
                }
                let _ = tx.send(Outbound::Packet(Packet::SubAck(SubAck {
                    packet_id: sub.packet_id,
                    return_codes: codes,
                })));
                for (topic_name, payload) in &table.retained {
                    if accepted.iter().any(|f| topic::matches(f, topic_name)) {
                        let _ = tx.send(Outbound::Packet(Packet::Publish(Publish {
                            topic: topic_name.clone(),
                            payload: payload.clone(),
                            retain: true,
                            dup: false,
                        })));
                    }
                }
            }
            Packet::PingReq => {
                let _ = tx.send(Outbound::Packet(Packet::PingResp));
            }
            Packet::Disconnect => return Ok(true),
            other => {
                return Err(ConnectionError::Protocol(format!("unexpected {} from client", other.name())));
            }
        }
    }
}
