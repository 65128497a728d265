//! Two brokers, two device nodes and a session on accelerated clocks.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::mpsc as std_mpsc;
use std::time::{Duration, Instant};

use piheart_core::bvp::BvpConfig;
use piheart_core::clock::ClockMode;
use piheart_core::mqtt::{broker_serve, BrokerConfig, BrokerHandle};
use piheart_core::node::{run_node, BvpSource, DeviceConfig, NodeHandle};
use piheart_core::orchestrator::{start_session, LogTarget, SessionConfig, SessionHandle, SessionPlan};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::Message;

pub const ACCEL: f64 = 100.0;

pub struct Rig {
    pub brokers: Vec<BrokerHandle>,
    pub nodes: Vec<NodeHandle>,
    pub dir: tempfile::TempDir,
}

impl Rig {
    /// Node A and B on their own brokers, sharing one signal-time epoch.
    pub async fn start(bpm_a: f64, bpm_b: f64) -> Rig {
        Rig::with_sources(BvpConfig::constant(bpm_a).with_seed(1), BvpConfig::constant(bpm_b).with_seed(2)).await
    }

    pub async fn with_sources(a: BvpConfig, b: BvpConfig) -> Rig {
        let epoch = Instant::now();
        let mut brokers = Vec::new();
        let mut nodes = Vec::new();
        for (id, bvp) in [("devA", a), ("devB", b)] {
            let broker = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
            let mut cfg = DeviceConfig::new(id, broker.local_addr().to_string(), BvpSource::Synth(bvp))
                .with_clock(ClockMode::Accelerated(ACCEL));
            cfg.epoch = Some(epoch);
            nodes.push(run_node(cfg).await.unwrap());
            brokers.push(broker);
        }
        Rig {
            brokers,
            nodes,
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn addr(&self, i: usize) -> String {
        self.brokers[i].local_addr().to_string()
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.path().join("session.jsonl")
    }

    pub async fn session(&self, plan: SessionPlan) -> SessionHandle {
        let cfg = SessionConfig::new(plan, &self.addr(0), &self.addr(1), LogTarget::Path(self.log_path()));
        start_session(cfg).await.unwrap()
    }

    /// Waits until both nodes have published `n` more heart rates.
    pub async fn hops(&self, n: u64) {
        let target: Vec<u64> = self.nodes.iter().map(|node| node.status().hr_published + n).collect();
        until("hops", 30, || self.nodes.iter().zip(&target).all(|(node, t)| node.status().hr_published >= *t)).await;
    }

    /// Stops both nodes and returns each one's published `(t_ms, bpm)` series.
    pub async fn stop_nodes_with_history(&mut self) -> Vec<Vec<(u64, f64)>> {
        let mut out = Vec::new();
        for node in self.nodes.drain(..) {
            let history = node.hr_history().iter().map(|h| (h.t_ms, h.bpm)).collect();
            node.shutdown().await.unwrap();
            out.push(history);
        }
        // let the last messages reach the orchestrator
        tokio::time::sleep(Duration::from_millis(100)).await;
        out
    }

    pub async fn shutdown_nodes(&mut self) {
        for node in self.nodes.drain(..) {
            node.shutdown().await.unwrap();
        }
    }
}

pub async fn until(what: &str, timeout_s: u64, mut cond: impl FnMut() -> bool) {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(timeout_s);
    while !cond() {
        assert!(tokio::time::Instant::now() < deadline, "timed out waiting for {what}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

/// Blocking WebSocket console driven from a helper thread.
pub struct TestConsole {
    pub frames: std_mpsc::Receiver<serde_json::Value>,
    outgoing: Option<std_mpsc::Sender<String>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestConsole {
    pub fn connect(addr: std::net::SocketAddr) -> TestConsole {
        let (mut ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_mut() {
            s.set_read_timeout(Some(Duration::from_millis(10))).unwrap();
        }
        let (frames_tx, frames) = std_mpsc::channel();
        let (outgoing, out_rx) = std_mpsc::channel::<String>();
        let thread = std::thread::spawn(move || loop {
            loop {
                match out_rx.try_recv() {
                    Ok(text) => ws.send(Message::text(text)).unwrap(),
                    Err(std_mpsc::TryRecvError::Empty) => break,
                    Err(std_mpsc::TryRecvError::Disconnected) => {
                        let _ = ws.close(None);
                        let _ = ws.flush();
                        return;
                    }
                }
            }
            match ws.read() {
                Ok(Message::Text(t)) => {
                    let v = serde_json::from_str(t.as_str()).unwrap();
                    if frames_tx.send(v).is_err() {
                        return;
                    }
                }
                Ok(Message::Close(_)) => return,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(_) => return,
            }
        });
        TestConsole {
            frames,
            outgoing: Some(outgoing),
            thread: Some(thread),
        }
    }

    pub fn send(&self, json: &str) {
        self.outgoing.as_ref().unwrap().send(json.to_owned()).unwrap();
    }

    /// Next frame whose `type` is `kind`, skipping others.
    pub fn next_of(&self, kind: &str, timeout: Duration) -> serde_json::Value {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let v = self.frames.recv_timeout(left).unwrap_or_else(|_| panic!("no {kind} frame"));
            if v["type"] == kind {
                return v;
            }
        }
    }

    pub fn drain(&self) -> Vec<serde_json::Value> {
        self.frames.try_iter().collect()
    }

    pub fn close(mut self) {
        self.outgoing.take();
        if let Some(t) = self.thread.take() {
            t.join().unwrap();
        }
    }
}
