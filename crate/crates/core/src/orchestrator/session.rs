//! A running session. One routing task owns the modality, movie and segment
//! state; broker callbacks and operator commands are queued to it, so a
//! modality switch always falls between two incoming messages. Records go to
//! a dedicated writer thread that appends JSONL.

use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use super::plan::{PlanError, SessionPlan};
use super::record::{RecordBody, SessionRecord};
use super::{Modality, UnknownModality};
use crate::mqtt::{ClientError, MqttClient};
use crate::node::payload::{self, BeatEventMessage, BeatRateCommand, BvpBatch, HrMessage, StatusMessage};

const EVENT_CAPACITY: usize = 4096;

/// One device broker. `device_id` is discovered from the node's retained
/// status message when not given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceEndpoint {
    pub label: String,
    pub address: String,
    pub device_id: Option<String>,
}

impl DeviceEndpoint {
    pub fn new(label: impl Into<String>, address: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            address: address.into(),
            device_id: None,
        }
    }

    /// Parses `host:port` or `device_id@host:port`.
    pub fn parse(label: &str, target: &str) -> Self {
        match target.split_once('@') {
            Some((id, address)) => Self {
                label: label.to_owned(),
                address: address.to_owned(),
                device_id: Some(id.to_owned()),
            },
            None => Self::new(label, target),
        }
    }
}

pub enum LogTarget {
    /// Created fresh; an existing file refuses the session.
    Path(PathBuf),
    Writer(Box<dyn Write + Send>),
}

impl fmt::Debug for LogTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogTarget::Path(p) => f.debug_tuple("Path").field(p).finish(),
            LogTarget::Writer(_) => f.write_str("Writer(..)"),
        }
    }
}

#[derive(Debug)]
pub struct SessionConfig {
    pub plan: SessionPlan,
    pub devices: [DeviceEndpoint; 2],
    pub log: LogTarget,
    /// How long to wait for each node's status announcement.
    pub discovery_timeout: Duration,
}

impl SessionConfig {
    pub fn new(plan: SessionPlan, device_a: &str, device_b: &str, log: LogTarget) -> Self {
        Self {
            plan,
            devices: [DeviceEndpoint::parse("A", device_a), DeviceEndpoint::parse("B", device_b)],
            log,
            discovery_timeout: Duration::from_secs(3),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("device {label} unreachable at {address}: {source}")]
    Unreachable {
        label: String,
        address: String,
        #[source]
        source: ClientError,
    },
    #[error("device {label}: {problem}")]
    Device { label: String, problem: String },
    #[error("log file {0} already exists")]
    LogExists(PathBuf),
    #[error("cannot open log {path}: {source}")]
    LogOpen {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Modality(#[from] UnknownModality),
    #[error("movie title is empty")]
    EmptyTitle,
    #[error("session is not active")]
    NotActive,
    #[error("segment {0} is the last one")]
    NoMoreSegments(usize),
    #[error("export failed: {0}")]
    Export(String),
    #[error("session task has ended")]
    Gone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Active,
    /// Recording failed; routing continues.
    Degraded,
    Stopped,
    /// A device broker connection was lost.
    Failed,
}

impl SessionPhase {
    pub fn is_running(self) -> bool {
        matches!(self, SessionPhase::Active | SessionPhase::Degraded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStatus {
    pub pair_id: u32,
    pub phase: SessionPhase,
    pub segment: usize,
    pub modality: Modality,
    pub movie: String,
    pub labels: [String; 2],
    pub device_ids: [String; 2],
    /// Most recent hr per device as `(bpm, t_ms)`.
    pub latest_hr: [Option<(f64, u64)>; 2],
    pub hr_records: [u64; 2],
    pub beat_rates_sent: [u64; 2],
    pub records_written: u64,
    pub write_errors: u64,
    pub error: Option<String>,
}

/// Live events relayed to consoles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Hr {
        device: String,
        bpm: f64,
        t_ms: u64,
        ts: u64,
    },
    BeatEvent {
        device: String,
        bpm: f64,
        t_ms: u64,
        ts: u64,
    },
    Status {
        phase: SessionPhase,
        segment: usize,
        modality: Modality,
        movie: String,
        error: Option<String>,
        ts: u64,
    },
    ModalityChange {
        value: Modality,
        ts: u64,
    },
    MovieChange {
        value: String,
        ts: u64,
    },
}

enum Command {
    SetModality(Modality, oneshot::Sender<Result<(), SessionError>>),
    SetMovie(String, oneshot::Sender<Result<(), SessionError>>),
    NextSegment(oneshot::Sender<Result<usize, SessionError>>),
    Export(PathBuf, oneshot::Sender<Result<u64, SessionError>>),
    Stop(oneshot::Sender<Result<SessionStatus, SessionError>>),
}

enum Inbound {
    Hr(usize, HrMessage),
    Bvp(usize, BvpBatch),
    Beat(usize, BeatEventMessage),
}

#[derive(Debug, Clone, Default)]
struct RecorderStats {
    written: u64,
    failed: u64,
    last_error: Option<String>,
}

enum RecorderMsg {
    Record(SessionRecord),
    Export(PathBuf, oneshot::Sender<Result<u64, String>>),
}

/// Shareable handle; every mutation is serialized through the routing task.
#[derive(Clone)]
pub struct SessionHandle {
    commands: mpsc::UnboundedSender<Command>,
    events: broadcast::Sender<SessionEvent>,
    status: watch::Receiver<SessionStatus>,
    recorder: watch::Receiver<RecorderStats>,
}

impl fmt::Debug for SessionHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionHandle").field("status", &*self.status.borrow()).finish()
    }
}

impl SessionHandle {
    async fn call<T>(&self, make: impl FnOnce(oneshot::Sender<Result<T, SessionError>>) -> Command) -> Result<T, SessionError> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(make(tx)).map_err(|_| SessionError::NotActive)?;
        rx.await.map_err(|_| SessionError::Gone)?
    }

    pub async fn set_modality(&self, modality: Modality) -> Result<(), SessionError> {
        self.call(|tx| Command::SetModality(modality, tx)).await
    }

    pub async fn set_modality_str(&self, value: &str) -> Result<(), SessionError> {
        self.set_modality(Modality::from_str(value)?).await
    }

    pub async fn set_movie(&self, title: &str) -> Result<(), SessionError> {
        if title.trim().is_empty() {
            return Err(SessionError::EmptyTitle);
        }
        self.call(|tx| Command::SetMovie(title.to_owned(), tx)).await
    }

    /// Moves to the next plan segment: movie first, then modality.
    pub async fn next_segment(&self) -> Result<usize, SessionError> {
        self.call(Command::NextSegment).await
    }

    /// Copies every record written so far to `dest`; returns the record count.
    pub async fn export_log(&self, dest: impl Into<PathBuf>) -> Result<u64, SessionError> {
        let dest = dest.into();
        self.call(|tx| Command::Export(dest, tx)).await
    }

    /// Idles both actuators, flushes the log and disconnects.
    pub async fn stop(&self) -> Result<SessionStatus, SessionError> {
        self.call(Command::Stop).await
    }

    pub fn status(&self) -> SessionStatus {
        let mut status = self.status.borrow().clone();
        let rec = self.recorder.borrow();
        status.records_written = rec.written;
        status.write_errors = rec.failed;
        status
    }

    pub fn subscribe(&self) -> broadcast::Receiver<SessionEvent> {
        self.events.subscribe()
    }

    /// Status followed by the latest hr of each device, for a console that
    /// just connected.
    pub fn snapshot_events(&self) -> Vec<SessionEvent> {
        let s = self.status();
        let ts = now_ms();
        let mut out = vec![SessionEvent::Status {
            phase: s.phase,
            segment: s.segment,
            modality: s.modality,
            movie: s.movie.clone(),
            error: s.error.clone(),
            ts,
        }];
        for (label, latest) in s.labels.iter().zip(s.latest_hr) {
            if let Some((bpm, t_ms)) = latest {
                out.push(SessionEvent::Hr {
                    device: label.clone(),
                    bpm,
                    t_ms,
                    ts,
                });
            }
        }
        out
    }

    /// Resolves once the session is stopped or failed.
    pub async fn finished(&self) -> SessionStatus {
        let mut rx = self.status.clone();
        let _ = rx.wait_for(|s| !s.phase.is_running()).await;
        self.status()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn connect_device(endpoint: &DeviceEndpoint, timeout: Duration) -> Result<(MqttClient, String), SessionError> {
    let unreachable = |source| SessionError::Unreachable {
        label: endpoint.label.clone(),
        address: endpoint.address.clone(),
        source,
    };
    let client_id = format!("piheart-orchestrator-{}", endpoint.label);
    let client = MqttClient::connect(endpoint.address.as_str(), &client_id, 10)
        .await
        .map_err(unreachable)?;

    let filter = match &endpoint.device_id {
        Some(id) => payload::topic(id, payload::STATUS),
        None => format!("{}/+/{}", payload::TOPIC_ROOT, payload::STATUS),
    };
    let (tx, mut rx) = mpsc::unbounded_channel();
    client
        .subscribe(&filter, move |m| {
            // retained, or live from a node that came up after we subscribed
            let _ = tx.send((m.topic.clone(), m.payload.clone()));
        })
        .await
        .map_err(unreachable)?;
    let device = |problem: &str| SessionError::Device {
        label: endpoint.label.clone(),
        problem: problem.to_owned(),
    };
    let (topic, body) = tokio::time::timeout(timeout, rx.recv())
        .await
        .map_err(|_| device("no node announced itself on this broker"))?
        .ok_or_else(|| device("connection closed during discovery"))?;
    match serde_json::from_slice::<StatusMessage>(&body) {
        Ok(StatusMessage::Offline) => return Err(device("node is offline")),
        Ok(_) => {}
        Err(_) => return Err(device("unreadable node status")),
    }
    let id = topic.split('/').nth(1).unwrap_or_default().to_owned();
    Ok((client, id))
}

async fn subscribe_device(client: &MqttClient, index: usize, id: &str, tx: mpsc::UnboundedSender<Inbound>) -> Result<(), ClientError> {
    let hr_tx = tx.clone();
    client
        .subscribe(&payload::topic(id, payload::HR), move |m| {
            // a retained hr predates the session
            if m.retain {
                return;
            }
            match serde_json::from_slice(&m.payload) {
                Ok(hr) => {
                    let _ = hr_tx.send(Inbound::Hr(index, hr));
                }
                Err(e) => log::warn!("bad hr payload on {}: {e}", m.topic),
            }
        })
        .await?;
    let bvp_tx = tx.clone();
    client
        .subscribe(&payload::topic(id, payload::BVP), move |m| match serde_json::from_slice(&m.payload) {
            Ok(batch) => {
                let _ = bvp_tx.send(Inbound::Bvp(index, batch));
            }
            Err(e) => log::warn!("bad bvp payload on {}: {e}", m.topic),
        })
        .await?;
    client
        .subscribe(&payload::topic(id, payload::BEAT_EVENT), move |m| match serde_json::from_slice(&m.payload) {
            Ok(beat) => {
                let _ = tx.send(Inbound::Beat(index, beat));
            }
            Err(e) => log::warn!("bad beat_event payload on {}: {e}", m.topic),
        })
        .await?;
    Ok(())
}

/// Connects to both device brokers, opens the log and applies the first
/// segment. Nothing is started unless both devices answer.
pub async fn start_session(config: SessionConfig) -> Result<SessionHandle, SessionError> {
    config.plan.validate()?;
    if let LogTarget::Path(path) = &config.log {
        if path.exists() {
            return Err(SessionError::LogExists(path.clone()));
        }
    }

    let (a, b) = tokio::join!(
        connect_device(&config.devices[0], config.discovery_timeout),
        connect_device(&config.devices[1], config.discovery_timeout)
    );
    let ((client_a, id_a), (client_b, id_b)) = (a?, b?);
    let clients = [client_a, client_b];
    let ids = [id_a, id_b];
    let labels = [config.devices[0].label.clone(), config.devices[1].label.clone()];

    let (in_tx, in_rx) = mpsc::unbounded_channel();
    for (i, client) in clients.iter().enumerate() {
        subscribe_device(client, i, &ids[i], in_tx.clone())
            .await
            .map_err(|source| SessionError::Unreachable {
                label: labels[i].clone(),
                address: config.devices[i].address.clone(),
                source,
            })?;
    }
    drop(in_tx);

    let (writer, log_path): (Box<dyn Write + Send>, Option<PathBuf>) = match config.log {
        LogTarget::Path(path) => {
            let file = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .map_err(|source| match source.kind() {
                    std::io::ErrorKind::AlreadyExists => SessionError::LogExists(path.clone()),
                    _ => SessionError::LogOpen {
                        path: path.clone(),
                        source,
                    },
                })?;
            (Box::new(file), Some(path))
        }
        LogTarget::Writer(w) => (w, None),
    };
    let (rec_tx, rec_rx) = mpsc::unbounded_channel();
    let (rec_stats_tx, rec_stats) = watch::channel(RecorderStats::default());
    let recorder = std::thread::Builder::new()
        .name("session-recorder".into())
        .spawn(move || run_recorder(writer, log_path, rec_rx, rec_stats_tx))
        .map_err(|source| SessionError::LogOpen {
            path: PathBuf::from("<recorder thread>"),
            source,
        })?;

    let first = &config.plan.segments[0];
    let status = SessionStatus {
        pair_id: config.plan.pair_id,
        phase: SessionPhase::Active,
        segment: 0,
        modality: first.modality,
        movie: first.movie.clone(),
        labels: labels.clone(),
        device_ids: ids.clone(),
        latest_hr: [None; 2],
        hr_records: [0; 2],
        beat_rates_sent: [0; 2],
        records_written: 0,
        write_errors: 0,
        error: None,
    };
    let (status_tx, status_rx) = watch::channel(status);
    let (events, _) = broadcast::channel(EVENT_CAPACITY);
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();

    let mut router = Router {
        plan: config.plan,
        labels,
        ids,
        clients,
        modality: None,
        movie: None,
        segment: 0,
        phase: SessionPhase::Active,
        last_ts: 0,
        recorder: Some(rec_tx),
        recorder_thread: Some(recorder),
        events: events.clone(),
        status: status_tx,
    };
    router.apply_segment(0);
    tokio::spawn(router.run(cmd_rx, in_rx, rec_stats.clone()));

    Ok(SessionHandle {
        commands: cmd_tx,
        events,
        status: status_rx,
        recorder: rec_stats,
    })
}

fn run_recorder(
    writer: Box<dyn Write + Send>,
    path: Option<PathBuf>,
    mut rx: mpsc::UnboundedReceiver<RecorderMsg>,
    stats: watch::Sender<RecorderStats>,
) {
    let mut out = BufWriter::new(writer);
    let fail = |e: String| {
        stats.send_modify(|s| {
            s.failed += 1;
            s.last_error = Some(e);
        })
    };
    while let Some(msg) = rx.blocking_recv() {
        match msg {
            RecorderMsg::Record(record) => {
                let mut line = match serde_json::to_vec(&record) {
                    Ok(line) => line,
                    Err(e) => {
                        fail(e.to_string());
                        continue;
                    }
                };
                line.push(b'\n');
                // flush whenever the queue is empty so the file trails by at most one burst
                let result = out.write_all(&line).and_then(|_| if rx.is_empty() { out.flush() } else { Ok(()) });
                match result {
                    // only failures notify the routing task
                    Ok(()) => {
                        stats.send_if_modified(|s| {
                            s.written += 1;
                            false
                        });
                    }
                    Err(e) => fail(e.to_string()),
                }
            }
            RecorderMsg::Export(dest, reply) => {
                let result = out.flush().map_err(|e| e.to_string()).and_then(|_| {
                    let src = path.as_ref().ok_or("log is not a file")?;
                    std::fs::copy(src, &dest).map_err(|e| e.to_string())?;
                    Ok(stats.borrow().written)
                });
                let _ = reply.send(result);
            }
        }
    }
    if let Err(e) = out.flush() {
        fail(e.to_string());
    }
}

struct Router {
    plan: SessionPlan,
    labels: [String; 2],
    ids: [String; 2],
    clients: [MqttClient; 2],
    modality: Option<Modality>,
    movie: Option<String>,
    segment: usize,
    phase: SessionPhase,
    last_ts: u64,
    recorder: Option<mpsc::UnboundedSender<RecorderMsg>>,
    recorder_thread: Option<std::thread::JoinHandle<()>>,
    events: broadcast::Sender<SessionEvent>,
    status: watch::Sender<SessionStatus>,
}

impl Router {
    async fn run(
        mut self,
        mut commands: mpsc::UnboundedReceiver<Command>,
        mut inbound: mpsc::UnboundedReceiver<Inbound>,
        mut rec_stats: watch::Receiver<RecorderStats>,
    ) {
        let [a, b] = self.clients.clone();
        loop {
            tokio::select! {
                biased;
                cmd = commands.recv() => match cmd {
                    Some(Command::Stop(reply)) => {
                        let status = self.stop().await;
                        let _ = reply.send(Ok(status));
                        break;
                    }
                    Some(cmd) => self.command(cmd),
                    None => {
                        self.stop().await;
                        break;
                    }
                },
                Some(msg) = inbound.recv() => self.inbound(msg),
                changed = rec_stats.changed() => {
                    if changed.is_ok() && self.phase == SessionPhase::Active {
                        let err = rec_stats.borrow().last_error.clone();
                        log::error!("session log write failed: {}", err.as_deref().unwrap_or("?"));
                        self.set_phase(SessionPhase::Degraded, err);
                    }
                }
                reason = a.closed() => {
                    self.fail(0, reason);
                    break;
                }
                reason = b.closed() => {
                    self.fail(1, reason);
                    break;
                }
            }
        }
        // keep answering so callers get a clear error instead of a hang
        while let Some(cmd) = commands.recv().await {
            match cmd {
                Command::SetModality(_, r) | Command::SetMovie(_, r) => {
                    let _ = r.send(Err(SessionError::NotActive));
                }
                Command::NextSegment(r) => {
                    let _ = r.send(Err(SessionError::NotActive));
                }
                Command::Export(_, r) => {
                    let _ = r.send(Err(SessionError::NotActive));
                }
                Command::Stop(r) => {
                    let _ = r.send(Ok(self.status.borrow().clone()));
                }
            }
        }
    }

    fn ts(&mut self) -> u64 {
        self.last_ts = self.last_ts.max(now_ms());
        self.last_ts
    }

    fn modality(&self) -> Modality {
        self.modality.unwrap_or(self.plan.segments[0].modality)
    }

    fn movie(&self) -> String {
        self.movie.clone().unwrap_or_default()
    }

    fn record(&mut self, ts: u64, device: Option<usize>, body: RecordBody) {
        let record = SessionRecord {
            ts,
            body,
            device: device.map(|i| self.labels[i].clone()),
            modality: self.modality(),
            movie: self.movie(),
        };
        if let Some(tx) = &self.recorder {
            let _ = tx.send(RecorderMsg::Record(record));
        }
    }

    fn emit(&self, event: SessionEvent) {
        let _ = self.events.send(event);
    }

    fn emit_status(&mut self) {
        let ts = self.ts();
        let s = self.status.borrow().clone();
        self.emit(SessionEvent::Status {
            phase: s.phase,
            segment: s.segment,
            modality: s.modality,
            movie: s.movie,
            error: s.error,
            ts,
        });
    }

    fn set_phase(&mut self, phase: SessionPhase, error: Option<String>) {
        self.phase = phase;
        self.status.send_modify(|s| {
            s.phase = phase;
            if error.is_some() {
                s.error = error;
            }
        });
        self.emit_status();
    }

    fn send_rate(&mut self, target: usize, cmd: &BeatRateCommand) {
        let topic = payload::topic(&self.ids[target], payload::BEAT_RATE);
        match self.clients[target].publish(&topic, cmd.to_json(), false) {
            Ok(()) => self.status.send_modify(|s| s.beat_rates_sent[target] += 1),
            Err(e) => log::warn!("beat_rate to {} failed: {e}", self.labels[target]),
        }
    }

    fn apply_modality(&mut self, modality: Modality) {
        let previous = self.modality.replace(modality);
        self.announce_modality(modality, previous);
    }

    fn announce_modality(&mut self, modality: Modality, previous: Option<Modality>) {
        let ts = self.ts();
        self.record(ts, None, RecordBody::ModalityChange { previous });
        if modality == Modality::WithoutHeart {
            self.send_rate(0, &BeatRateCommand::Stop);
            self.send_rate(1, &BeatRateCommand::Stop);
        }
        self.status.send_modify(|s| s.modality = modality);
        self.emit(SessionEvent::ModalityChange { value: modality, ts });
    }

    fn apply_movie(&mut self, title: String) {
        let previous = self.movie.replace(title.clone());
        self.announce_movie(title, previous);
    }

    fn announce_movie(&mut self, title: String, previous: Option<String>) {
        let ts = self.ts();
        self.record(ts, None, RecordBody::MovieChange { previous });
        self.status.send_modify(|s| s.movie = title.clone());
        self.emit(SessionEvent::MovieChange { value: title, ts });
    }

    /// Switches movie and modality together, so both change records carry
    /// the new segment's tags.
    fn apply_segment(&mut self, index: usize) {
        let segment = self.plan.segments[index].clone();
        self.segment = index;
        self.status.send_modify(|s| s.segment = index);
        let previous_movie = self.movie.replace(segment.movie.clone());
        let previous_modality = self.modality.replace(segment.modality);
        self.announce_movie(segment.movie, previous_movie);
        self.announce_modality(segment.modality, previous_modality);
        self.emit_status();
    }

    fn command(&mut self, cmd: Command) {
        match cmd {
            Command::SetModality(m, reply) => {
                self.apply_modality(m);
                let _ = reply.send(Ok(()));
            }
            Command::SetMovie(title, reply) => {
                self.apply_movie(title);
                let _ = reply.send(Ok(()));
            }
            Command::NextSegment(reply) => {
                let next = self.segment + 1;
                if next >= self.plan.segments.len() {
                    let _ = reply.send(Err(SessionError::NoMoreSegments(self.segment)));
                } else {
                    self.apply_segment(next);
                    let _ = reply.send(Ok(next));
                }
            }
            Command::Export(dest, reply) => {
                let Some(tx) = &self.recorder else {
                    let _ = reply.send(Err(SessionError::NotActive));
                    return;
                };
                let (done_tx, done_rx) = oneshot::channel();
                let _ = tx.send(RecorderMsg::Export(dest, done_tx));
                // the recorder answers after every earlier record is flushed
                tokio::spawn(async move {
                    let result = match done_rx.await {
                        Ok(r) => r.map_err(SessionError::Export),
                        Err(_) => Err(SessionError::Gone),
                    };
                    let _ = reply.send(result);
                });
            }
            Command::Stop(_) => unreachable!("handled by the loop"),
        }
    }

    fn inbound(&mut self, msg: Inbound) {
        match msg {
            Inbound::Hr(src, hr) => {
                let ts = self.ts();
                self.record(ts, Some(src), RecordBody::Hr { bpm: hr.bpm, t_ms: hr.t_ms });
                if let Some(target) = self.modality().route(src) {
                    let cmd = BeatRateCommand::Rate {
                        bpm: hr.bpm,
                        source: Some(self.labels[src].clone()),
                        t_ms: Some(hr.t_ms),
                    };
                    self.send_rate(target, &cmd);
                }
                self.status.send_modify(|s| {
                    s.latest_hr[src] = Some((hr.bpm, hr.t_ms));
                    s.hr_records[src] += 1;
                });
                self.emit(SessionEvent::Hr {
                    device: self.labels[src].clone(),
                    bpm: hr.bpm,
                    t_ms: hr.t_ms,
                    ts,
                });
            }
            Inbound::Bvp(src, batch) => {
                let ts = self.ts();
                self.record(
                    ts,
                    Some(src),
                    RecordBody::BvpBatch {
                        t_ms: batch.t_ms,
                        samples: batch.samples,
                    },
                );
            }
            Inbound::Beat(src, beat) => {
                let ts = self.ts();
                self.record(ts, Some(src), RecordBody::BeatEvent { t_ms: beat.t_ms, bpm: beat.bpm });
                self.emit(SessionEvent::BeatEvent {
                    device: self.labels[src].clone(),
                    bpm: beat.bpm,
                    t_ms: beat.t_ms,
                    ts,
                });
            }
        }
    }

    async fn close_recorder(&mut self) {
        self.recorder = None;
        if let Some(thread) = self.recorder_thread.take() {
            let _ = tokio::task::spawn_blocking(move || thread.join()).await;
        }
    }

    async fn stop(&mut self) -> SessionStatus {
        self.send_rate(0, &BeatRateCommand::Stop);
        self.send_rate(1, &BeatRateCommand::Stop);
        self.close_recorder().await;
        for client in &self.clients {
            let _ = client.disconnect().await;
        }
        self.set_phase(SessionPhase::Stopped, None);
        self.status.borrow().clone()
    }

    fn fail(&mut self, device: usize, reason: Option<String>) {
        let reason = format!(
            "device {} broker lost: {}",
            self.labels[device],
            reason.unwrap_or_else(|| "disconnected".into())
        );
        log::error!("{reason}");
        // the surviving actuator must not keep beating a stale rate
        let other = 1 - device;
        self.send_rate(other, &BeatRateCommand::Stop);
        self.recorder = None;
        if let Some(thread) = self.recorder_thread.take() {
            std::thread::spawn(move || thread.join());
        }
        self.set_phase(SessionPhase::Failed, Some(reason));
    }
}
