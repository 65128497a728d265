//! WebSocket bridge for operator consoles.
//!
//! Every console receives the same event stream (`hr`, `beat_event`,
//! `status`, `modality_change`, `movie_change`) as JSON text frames, starting
//! with a status snapshot and the latest hr of each device. Commands are JSON
//! objects with a `type` of `set_modality`, `set_movie`, `start` (advance to
//! the next plan segment) or `stop`, an optional `value`, and an optional `id`
//! echoed in the reply. Replies (`ack` or `error`) go to the sending console
//! only.
//!
//! Each console is served on its own thread; commands are applied through the
//! same [`SessionHandle`] methods a local caller would use.

use std::fmt;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use tokio::sync::broadcast::error::TryRecvError;
use tungstenite::handshake::HandshakeError;
use tungstenite::{Message, WebSocket};

use super::session::{SessionError, SessionHandle};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("the bridge must be started from within a tokio runtime")]
    NoRuntime,
}

/// Reply frame sent to the console that issued a command.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    Ack {
        command: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        #[serde(skip_serializing_if = "Option::is_none")]
        segment: Option<usize>,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        command: Option<String>,
        message: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
    },
}

pub struct BridgeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    consoles: Arc<AtomicUsize>,
    accept: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Consoles currently connected.
    pub fn consoles(&self) -> usize {
        self.consoles.load(Ordering::SeqCst)
    }

    /// Closes every console connection and stops accepting.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(accept) = self.accept.take() {
            let _ = accept.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Serves the bridge on `addr`. Must be called from a tokio runtime, which
/// is used to apply console commands.
pub fn bridge_serve(session: SessionHandle, addr: impl ToSocketAddrs + fmt::Display) -> Result<BridgeHandle, BridgeError> {
    let runtime = tokio::runtime::Handle::try_current().map_err(|_| BridgeError::NoRuntime)?;
    let bind_err = |source| BridgeError::Bind {
        addr: addr.to_string(),
        source,
    };
    let listener = TcpListener::bind(&addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;
    let stop = Arc::new(AtomicBool::new(false));
    let consoles = Arc::new(AtomicUsize::new(0));

    let accept = {
        let stop = stop.clone();
        let consoles = consoles.clone();
        std::thread::Builder::new()
            .name("ws-bridge".into())
            .spawn(move || {
                let mut workers: Vec<JoinHandle<()>> = Vec::new();
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            let ctx = Console {
                                session: session.clone(),
                                runtime: runtime.clone(),
                                stop: stop.clone(),
                                consoles: consoles.clone(),
                            };
                            let spawned = std::thread::Builder::new()
                                .name(format!("ws-console-{peer}"))
                                .spawn(move || ctx.serve(stream));
                            match spawned {
                                Ok(h) => workers.push(h),
                                Err(e) => log::error!("cannot start console thread: {e}"),
                            }
                            workers.retain(|h| !h.is_finished());
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                        Err(e) => {
                            log::warn!("bridge accept failed: {e}");
                            std::thread::sleep(POLL);
                        }
                    }
                }
                for h in workers {
                    let _ = h.join();
                }
            })
            .map_err(bind_err)?
    };

    Ok(BridgeHandle {
        addr: local,
        stop,
        consoles,
        accept: Some(accept),
    })
}

struct Console {
    session: SessionHandle,
    runtime: tokio::runtime::Handle,
    stop: Arc<AtomicBool>,
    consoles: Arc<AtomicUsize>,
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

impl Console {
    fn serve(self, stream: TcpStream) {
        let mut ws = match self.handshake(stream) {
            Some(ws) => ws,
            None => return,
        };
        self.consoles.fetch_add(1, Ordering::SeqCst);
        if let Err(e) = self.run(&mut ws) {
            log::debug!("console closed: {e}");
        }
        let _ = ws.close(None);
        let _ = ws.flush();
        self.consoles.fetch_sub(1, Ordering::SeqCst);
    }

    fn handshake(&self, stream: TcpStream) -> Option<WebSocket<TcpStream>> {
        let setup = stream
            .set_nonblocking(false)
            .and_then(|_| stream.set_read_timeout(Some(POLL)))
            .and_then(|_| stream.set_nodelay(true));
        if let Err(e) = setup {
            log::warn!("console socket setup failed: {e}");
            return None;
        }
        let mut attempt = tungstenite::accept(stream);
        // allow a slow client about five seconds to finish the upgrade
        for _ in 0..250 {
            match attempt {
                Ok(ws) => return Some(ws),
                Err(HandshakeError::Interrupted(mid)) => {
                    if self.stop.load(Ordering::SeqCst) {
                        return None;
                    }
                    attempt = mid.handshake();
                }
                Err(HandshakeError::Failure(e)) => {
                    log::debug!("websocket handshake failed: {e}");
                    return None;
                }
            }
        }
        None
    }

    fn run(&self, ws: &mut WebSocket<TcpStream>) -> Result<(), tungstenite::Error> {
        // subscribe before the snapshot so nothing falls in between
        let mut events = self.session.subscribe();
        for event in self.session.snapshot_events() {
            ws.send(Message::text(serde_json::to_string(&event).expect("event serializes")))?;
        }
        while !self.stop.load(Ordering::SeqCst) {
            match ws.read() {
                Ok(Message::Text(text)) => {
                    let reply = self.command(text.as_str());
                    ws.send(Message::text(serde_json::to_string(&reply).expect("reply serializes")))?;
                }
                Ok(Message::Binary(_)) => {
                    let reply = Reply::Error {
                        command: None,
                        message: "binary frames are not accepted".into(),
                        id: None,
                    };
                    ws.send(Message::text(serde_json::to_string(&reply).expect("reply serializes")))?;
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(e) => return Err(e),
            }
            loop {
                match events.try_recv() {
                    Ok(event) => ws.write(Message::text(serde_json::to_string(&event).expect("event serializes")))?,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Lagged(n)) => log::warn!("console fell behind, {n} events skipped"),
                    Err(TryRecvError::Closed) => return Ok(()),
                }
            }
            match ws.flush() {
                Err(e) if !is_timeout(&e) => return Err(e),
                _ => {}
            }
        }
        Ok(())
    }

    fn command(&self, text: &str) -> Reply {
        let parsed: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => {
                return Reply::Error {
                    command: None,
                    message: format!("malformed command: {e}"),
                    id: None,
                }
            }
        };
        let id = parsed.get("id").cloned();
        let Some(kind) = parsed.get("type").and_then(Value::as_str).map(str::to_owned) else {
            return Reply::Error {
                command: None,
                message: "command needs a string \"type\"".into(),
                id,
            };
        };
        let value = parsed.get("value").and_then(Value::as_str);
        let session = &self.session;
        let result: Result<Option<usize>, String> = match (kind.as_str(), value) {
            ("set_modality", Some(v)) => self.block(session.set_modality_str(v)).map(|_| None),
            ("set_movie", Some(v)) => self.block(session.set_movie(v)).map(|_| None),
            ("set_modality" | "set_movie", None) => Err(format!("{kind} needs a string \"value\"")),
            ("start", _) => self.block(session.next_segment()).map(Some),
            ("stop", _) => self.block(session.stop()).map(|_| None),
            (other, _) => Err(format!("unknown command {other:?}")),
        };
        match result {
            Ok(segment) => Reply::Ack {
                command: kind,
                id,
                segment,
            },
            Err(message) => Reply::Error {
                command: Some(kind),
                message,
                id,
            },
        }
    }

    fn block<T>(&self, fut: impl std::future::Future<Output = Result<T, SessionError>>) -> Result<T, String> {
        self.runtime.block_on(fut).map_err(|e| e.to_string())
    }
}
