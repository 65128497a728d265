//! A simulated device node.
//!
//! Three tasks cooperate over channels: the sampler paces the BVP source
//! against the node clock and publishes raw batches, the estimator runs the
//! sliding-window STFT and publishes each heart rate, and the actuator turns
//! `beat_rate` commands into scheduled servo sweeps. Each task owns its state
//! and reports counters through its own watch channel.

pub mod payload;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::Serialize;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::beat::{BeatError, BeatScheduler, ServoConfig};
use crate::bvp::{self, BvpConfig, BvpGenerator, BvpSample, ConfigError, HrProfile, InputError};
use crate::clock::{ClockMode, SimClock};
use crate::estimator::{EstimatorConfig, HrEstimate, SlidingWindow, SpectrumMode, StreamError};
use crate::mqtt::{ClientError, ClientOptions, LastWill, MqttClient};
use payload::{BeatEventMessage, BeatRateCommand, BvpBatch, HrMessage, StatusMessage};

/// Wall-clock pacing step of the sampler.
const SAMPLER_STEP: Duration = Duration::from_millis(2);
const HISTORY_CAP: usize = 4096;

#[derive(Debug, Clone)]
pub enum BvpSource {
    Synth(BvpConfig),
    /// CSV file in the `t_ms,value` schema.
    Replay(PathBuf),
    Samples(Vec<BvpSample>),
}

impl FromStr for BvpSource {
    type Err = NodeError;

    /// `synth:hr=72,noise=0.02,seed=42,artifacts=6,amp=2` or `replay:<path>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: String| NodeError::BadSource(msg);
        if let Some(path) = s.strip_prefix("replay:") {
            if path.is_empty() {
                return Err(bad("replay needs a path".into()));
            }
            return Ok(BvpSource::Replay(PathBuf::from(path)));
        }
        let rest = match s.strip_prefix("synth") {
            Some(rest) => rest.strip_prefix(':').unwrap_or(rest),
            None => return Err(bad(format!("unknown source {s:?}, expected synth:... or replay:..."))),
        };
        let mut config = BvpConfig::default();
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {pair:?}")))?;
            let number = || value.parse::<f64>().map_err(|_| bad(format!("{key}: not a number: {value:?}")));
            match key {
                "hr" => config.hr_profile = HrProfile::Constant(number()?),
                "noise" => config.noise_sigma = number()?,
                "artifacts" => config.artifact_rate = number()?,
                "amp" => config.artifact_amplitude = number()?,
                "rate" => config.sample_rate_hz = number()?,
                "seed" => config.seed = value.parse().map_err(|_| bad(format!("seed: not an integer: {value:?}")))?,
                other => return Err(bad(format!("unknown synth key {other:?}"))),
            }
        }
        config.validate()?;
        Ok(BvpSource::Synth(config))
    }
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub device_id: String,
    /// `host:port` of the node's local broker.
    pub broker: String,
    pub bvp_source: BvpSource,
    pub mode: SpectrumMode,
    pub clock: ClockMode,
    /// Signal time zero. Defaults to the moment the node starts.
    pub epoch: Option<Instant>,
    pub estimator: EstimatorConfig,
    pub servo: ServoConfig,
    pub keep_alive_s: u16,
}

impl DeviceConfig {
    pub fn new(device_id: impl Into<String>, broker: impl Into<String>, bvp_source: BvpSource) -> Self {
        Self {
            device_id: device_id.into(),
            broker: broker.into(),
            bvp_source,
            mode: SpectrumMode::Magnitude,
            clock: ClockMode::Wall,
            epoch: None,
            estimator: EstimatorConfig::default(),
            servo: ServoConfig::default(),
            keep_alive_s: 10,
        }
    }

    pub fn with_clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("invalid device id {0:?}")]
    DeviceId(String),
    #[error("invalid BVP source: {0}")]
    BadSource(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("estimator runs at {estimator} Hz but the source delivers {source_rate} Hz")]
    RateMismatch { estimator: f64, source_rate: f64 },
    #[error("cannot reach broker: {0}")]
    Connect(#[source] ClientError),
    #[error("broker session lost: {0}")]
    Session(String),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PublishedHr {
    pub t_ms: u64,
    pub bpm: f64,
    #[serde(skip)]
    pub wall: Instant,
}

/// A `beat_rate` command as applied by the actuator.
#[derive(Debug, Clone, Serialize)]
pub struct RateUpdate {
    /// `None` for a stop.
    pub bpm: Option<f64>,
    pub source: Option<String>,
    pub hr_t_ms: Option<u64>,
    /// Node signal time at which the command took effect.
    pub applied_ms: f64,
    pub accepted: bool,
    #[serde(skip)]
    pub wall: Instant,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExecutedBeat {
    pub t_ms: u64,
    pub bpm: f64,
}

#[derive(Debug, Clone, Default)]
struct SamplerStats {
    samples_emitted: u64,
    bvp_batches: u64,
    source_exhausted: bool,
}

#[derive(Debug, Clone, Default)]
struct EstimatorStats {
    samples_processed: u64,
    last_estimate: Option<HrEstimate>,
    hr_published: u64,
    dropped_samples: u64,
    stream_errors: u64,
    history: Vec<PublishedHr>,
}

#[derive(Debug, Clone, Default)]
struct ActuatorStats {
    current_bpm: Option<f64>,
    beats_executed: u64,
    dropped_beats: u64,
    rejected_rates: u64,
    rates: Vec<RateUpdate>,
    beats: Vec<ExecutedBeat>,
}

/// Read-only snapshot of a running node.
#[derive(Debug, Clone, Serialize)]
pub struct NodeStatus {
    pub device_id: String,
    pub uptime: Duration,
    pub signal_ms: f64,
    pub running: bool,
    pub session_error: Option<String>,
    pub samples_emitted: u64,
    pub samples_processed: u64,
    pub source_exhausted: bool,
    pub bvp_batches: u64,
    pub last_estimate: Option<HrEstimate>,
    pub hr_published: u64,
    pub dropped_samples: u64,
    pub stream_errors: u64,
    pub current_bpm: Option<f64>,
    pub beats_executed: u64,
    pub dropped_beats: u64,
    pub rejected_rates: u64,
}

fn push_capped<T>(v: &mut Vec<T>, item: T) {
    if v.len() == HISTORY_CAP {
        v.remove(0);
    }
    v.push(item);
}

pub struct NodeHandle {
    device_id: String,
    clock: SimClock,
    started: Instant,
    sampler: watch::Receiver<SamplerStats>,
    estimator: watch::Receiver<EstimatorStats>,
    actuator: watch::Receiver<ActuatorStats>,
    session_error: watch::Receiver<Option<String>>,
    shutdown: watch::Sender<bool>,
    supervisor: Option<JoinHandle<Result<(), NodeError>>>,
}

impl fmt::Debug for NodeHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeHandle").field("device_id", &self.device_id).finish()
    }
}

impl NodeHandle {
    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    /// Snapshot of all task counters. Never waits on the pipeline.
    pub fn status(&self) -> NodeStatus {
        let s = self.sampler.borrow().clone();
        let (processed, last_estimate, hr_published, dropped_samples, stream_errors) = {
            let e = self.estimator.borrow();
            (e.samples_processed, e.last_estimate.clone(), e.hr_published, e.dropped_samples, e.stream_errors)
        };
        let (current_bpm, beats_executed, dropped_beats, rejected_rates) = {
            let a = self.actuator.borrow();
            (a.current_bpm, a.beats_executed, a.dropped_beats, a.rejected_rates)
        };
        let session_error = self.session_error.borrow().clone();
        NodeStatus {
            device_id: self.device_id.clone(),
            uptime: self.started.elapsed(),
            signal_ms: self.clock.now_ms(),
            running: self.supervisor.as_ref().is_some_and(|h| !h.is_finished()),
            session_error,
            samples_emitted: s.samples_emitted,
            samples_processed: processed,
            source_exhausted: s.source_exhausted,
            bvp_batches: s.bvp_batches,
            last_estimate,
            hr_published,
            dropped_samples,
            stream_errors,
            current_bpm,
            beats_executed,
            dropped_beats,
            rejected_rates,
        }
    }

    /// Heart rates published so far (most recent 4096).
    pub fn hr_history(&self) -> Vec<PublishedHr> {
        self.estimator.borrow().history.clone()
    }

    pub fn rate_history(&self) -> Vec<RateUpdate> {
        self.actuator.borrow().rates.clone()
    }

    pub fn beat_history(&self) -> Vec<ExecutedBeat> {
        self.actuator.borrow().beats.clone()
    }

    /// Stops sampler, estimator and actuator in that order, marks the node
    /// offline and disconnects.
    pub async fn shutdown(mut self) -> Result<(), NodeError> {
        let _ = self.shutdown.send(true);
        self.join().await
    }

    /// Waits until the node stops on its own, which only happens when the
    /// broker session is lost.
    pub async fn wait(&mut self) -> Result<(), NodeError> {
        self.join().await
    }

    async fn join(&mut self) -> Result<(), NodeError> {
        match self.supervisor.take() {
            Some(h) => h.await.unwrap_or_else(|e| Err(NodeError::Session(format!("supervisor panicked: {e}")))),
            None => Ok(()),
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
    }
}

type SampleIter = Box<dyn Iterator<Item = BvpSample> + Send>;

fn open_source(config: &DeviceConfig) -> Result<SampleIter, NodeError> {
    let check_rate = |source_rate: f64| {
        if (source_rate - config.estimator.sample_rate_hz).abs() > 1e-9 {
            Err(NodeError::RateMismatch {
                estimator: config.estimator.sample_rate_hz,
                source_rate,
            })
        } else {
            Ok(())
        }
    };
    Ok(match &config.bvp_source {
        BvpSource::Synth(c) => {
            check_rate(c.sample_rate_hz)?;
            let mut generator = BvpGenerator::new(c.clone())?;
            Box::new(std::iter::from_fn(move || Some(generator.next_sample())))
        }
        BvpSource::Replay(path) => Box::new(bvp::replay(path)?.into_iter()),
        BvpSource::Samples(samples) => Box::new(samples.clone().into_iter()),
    })
}

/// Connects to the node's broker and starts the three node tasks.
pub async fn run_node(config: DeviceConfig) -> Result<NodeHandle, NodeError> {
    if config.device_id.is_empty() || config.device_id.contains(['/', '+', '#']) {
        return Err(NodeError::DeviceId(config.device_id));
    }
    let source = open_source(&config)?;
    let id = config.device_id.clone();
    let status_topic = payload::topic(&id, payload::STATUS);

    let options = ClientOptions {
        keep_alive_s: config.keep_alive_s,
        will: Some(LastWill {
            topic: status_topic.clone(),
            message: Bytes::from(serde_json::to_vec(&StatusMessage::Offline).expect("status serializes")),
            qos: 0,
            retain: true,
        }),
        ..ClientOptions::default()
    };
    let client = MqttClient::connect_with(config.broker.as_str(), &format!("piheart-node-{id}"), options)
        .await
        .map_err(NodeError::Connect)?;

    let (rate_tx, rate_rx) = mpsc::unbounded_channel();
    let rate_topic = payload::topic(&id, payload::BEAT_RATE);
    {
        let status_topic = status_topic.clone();
        let publisher = client.clone();
        client
            .subscribe(&rate_topic, move |m| match BeatRateCommand::parse(&m.payload) {
                Ok(cmd) => {
                    let _ = rate_tx.send(cmd);
                }
                Err(e) => {
                    log::warn!("{e}");
                    let msg = StatusMessage::StreamError {
                        t_ms: 0,
                        error: e.to_string(),
                        dropped_samples: 0,
                    };
                    let _ = publisher.publish(&status_topic, serde_json::to_vec(&msg).unwrap_or_default(), false);
                }
            })
            .await
            .map_err(NodeError::Connect)?;
    }
    client
        .publish(&status_topic, serde_json::to_vec(&StatusMessage::Online).expect("status serializes"), true)
        .map_err(NodeError::Connect)?;

    let started = Instant::now();
    let clock = SimClock::with_epoch(config.epoch.unwrap_or(started), config.clock);
    let (sampler_stats, sampler_rx) = watch::channel(SamplerStats::default());
    let (estimator_stats, estimator_rx) = watch::channel(EstimatorStats::default());
    let (actuator_stats, actuator_rx) = watch::channel(ActuatorStats::default());
    let (error_tx, error_rx) = watch::channel(None);
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let (stop_sampler, stop_sampler_rx) = watch::channel(false);
    let (stop_actuator, stop_actuator_rx) = watch::channel(false);
    let (sample_tx, sample_rx) = mpsc::channel::<Vec<BvpSample>>(64);

    let sampler = tokio::spawn(
        Sampler {
            clock,
            client: client.clone(),
            topic: payload::topic(&id, payload::BVP),
            batch_len: config.estimator.sample_rate_hz.round().max(1.0) as usize,
            stats: sampler_stats,
        }
        .run(source, sample_tx, stop_sampler_rx),
    );
    let estimator = tokio::spawn(
        Estimator {
            client: client.clone(),
            hr_topic: payload::topic(&id, payload::HR),
            status_topic,
            mode: config.mode,
            window: SlidingWindow::new(config.estimator),
            stats: estimator_stats,
        }
        .run(sample_rx),
    );
    let actuator = tokio::spawn(
        Actuator {
            clock,
            client: client.clone(),
            topic: payload::topic(&id, payload::BEAT_EVENT),
            scheduler: BeatScheduler::new(config.servo),
            stats: actuator_stats,
        }
        .run(rate_rx, stop_actuator_rx),
    );

    let supervisor = tokio::spawn(supervise(
        client,
        [sampler, estimator, actuator],
        stop_sampler,
        stop_actuator,
        shutdown_rx,
        error_tx,
        id.clone(),
    ));

    Ok(NodeHandle {
        device_id: id,
        clock,
        started,
        sampler: sampler_rx,
        estimator: estimator_rx,
        actuator: actuator_rx,
        session_error: error_rx,
        shutdown: shutdown_tx,
        supervisor: Some(supervisor),
    })
}

async fn supervise(
    client: MqttClient,
    [sampler, estimator, actuator]: [JoinHandle<()>; 3],
    stop_sampler: watch::Sender<bool>,
    stop_actuator: watch::Sender<bool>,
    mut shutdown: watch::Receiver<bool>,
    error_tx: watch::Sender<Option<String>>,
    id: String,
) -> Result<(), NodeError> {
    let lost = tokio::select! {
        reason = client.closed() => Some(reason.unwrap_or_else(|| "disconnected".into())),
        _ = shutdown.wait_for(|stop| *stop) => None,
    };
    if let Some(reason) = &lost {
        log::error!("node {id}: {reason}");
        let _ = error_tx.send(Some(reason.clone()));
    }
    // the estimator ends once the sampler drops its sender
    let _ = stop_sampler.send(true);
    let _ = sampler.await;
    let _ = estimator.await;
    let _ = stop_actuator.send(true);
    let _ = actuator.await;
    match lost {
        Some(reason) => Err(NodeError::Session(reason)),
        None => {
            let offline = serde_json::to_vec(&StatusMessage::Offline).expect("status serializes");
            let status_topic = payload::topic(&id, payload::STATUS);
            let _ = client.publish(&status_topic, offline, true);
            let _ = client.disconnect().await;
            Ok(())
        }
    }
}

struct Sampler {
    clock: SimClock,
    client: MqttClient,
    topic: String,
    batch_len: usize,
    stats: watch::Sender<SamplerStats>,
}

impl Sampler {
    async fn run(self, mut source: SampleIter, tx: mpsc::Sender<Vec<BvpSample>>, mut stop: watch::Receiver<bool>) {
        let mut pending = source.next();
        // replayed files may not start at zero
        let base = pending.map_or(0, |s| s.t_ms);
        let mut batch: Vec<BvpSample> = Vec::with_capacity(self.batch_len);
        loop {
            let now = self.clock.now_ms();
            let mut chunk = Vec::new();
            while let Some(s) = pending {
                if (s.t_ms - base.min(s.t_ms)) as f64 > now {
                    break;
                }
                chunk.push(s);
                pending = source.next();
            }
            if !chunk.is_empty() {
                for s in &chunk {
                    batch.push(*s);
                    if batch.len() == self.batch_len {
                        self.publish_batch(&mut batch);
                    }
                }
                let n = chunk.len() as u64;
                self.stats.send_modify(|st| st.samples_emitted += n);
                if tx.send(chunk).await.is_err() {
                    break;
                }
            }
            let Some(next) = pending else {
                self.publish_batch(&mut batch);
                self.stats.send_modify(|st| st.source_exhausted = true);
                break;
            };
            let due = self.clock.instant_at((next.t_ms - base.min(next.t_ms)) as f64);
            let wake = due.max(Instant::now() + SAMPLER_STEP);
            tokio::select! {
                _ = tokio::time::sleep_until(wake.into()) => {}
                _ = stop.wait_for(|s| *s) => break,
            }
        }
    }

    fn publish_batch(&self, batch: &mut Vec<BvpSample>) {
        if batch.is_empty() {
            return;
        }
        let msg = BvpBatch {
            t_ms: batch[0].t_ms,
            samples: batch.iter().map(|s| s.value).collect(),
        };
        batch.clear();
        match serde_json::to_vec(&msg) {
            Ok(json) => {
                if self.client.publish(&self.topic, json, false).is_ok() {
                    self.stats.send_modify(|st| st.bvp_batches += 1);
                }
            }
            Err(e) => log::warn!("bvp batch not serializable: {e}"),
        }
    }
}

struct Estimator {
    client: MqttClient,
    hr_topic: String,
    status_topic: String,
    mode: SpectrumMode,
    window: SlidingWindow,
    stats: watch::Sender<EstimatorStats>,
}

impl Estimator {
    async fn run(mut self, mut rx: mpsc::Receiver<Vec<BvpSample>>) {
        while let Some(chunk) = rx.recv().await {
            for sample in chunk {
                self.push(sample);
            }
        }
    }

    fn push(&mut self, sample: BvpSample) {
        let result = self.window.push_sample(sample, self.mode);
        self.stats.send_modify(|st| st.samples_processed += 1);
        match result {
            Ok(Some(estimate)) => self.publish_hr(estimate),
            Ok(None) => {}
            Err(err) => {
                let dropped = match err {
                    StreamError::Gap { missing, .. } => missing,
                    StreamError::OutOfOrder { .. } => 1,
                    StreamError::Estimate(_) => 0,
                };
                self.stats.send_modify(|st| {
                    st.dropped_samples += dropped;
                    st.stream_errors += 1;
                });
                log::warn!("{}: {err}", self.status_topic);
                let msg = StatusMessage::StreamError {
                    t_ms: sample.t_ms,
                    error: err.to_string(),
                    dropped_samples: dropped,
                };
                let _ = self
                    .client
                    .publish(&self.status_topic, serde_json::to_vec(&msg).unwrap_or_default(), false);
                if matches!(err, StreamError::Gap { .. }) {
                    // continuity is broken: start a new warm-up at this sample
                    self.window.reset();
                    let _ = self.window.push_sample(sample, self.mode);
                }
            }
        }
    }

    fn publish_hr(&mut self, estimate: HrEstimate) {
        let msg = HrMessage {
            t_ms: estimate.window_end_t_ms,
            bpm: estimate.bpm,
        };
        let json = serde_json::to_vec(&msg).expect("hr serializes");
        let published = self.client.publish(&self.hr_topic, json, true).is_ok();
        let wall = Instant::now();
        self.stats.send_modify(|st| {
            st.last_estimate = Some(estimate);
            if published {
                st.hr_published += 1;
                push_capped(
                    &mut st.history,
                    PublishedHr {
                        t_ms: msg.t_ms,
                        bpm: msg.bpm,
                        wall,
                    },
                );
            }
        });
    }
}

struct Actuator {
    clock: SimClock,
    client: MqttClient,
    topic: String,
    scheduler: BeatScheduler,
    stats: watch::Sender<ActuatorStats>,
}

impl Actuator {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<BeatRateCommand>, mut stop: watch::Receiver<bool>) {
        loop {
            let wake = self.scheduler.next_beat_ms().map(|ms| self.clock.instant_at(ms));
            tokio::select! {
                biased;
                _ = stop.wait_for(|s| *s) => break,
                cmd = rx.recv() => match cmd {
                    Some(cmd) => self.apply(cmd),
                    None => break,
                },
                _ = async {
                    match wake {
                        Some(at) => tokio::time::sleep_until(at.into()).await,
                        None => std::future::pending().await,
                    }
                } => self.tick(),
            }
        }
    }

    fn apply(&mut self, cmd: BeatRateCommand) {
        let now = self.clock.now_ms();
        let wall = Instant::now();
        let update = match cmd {
            BeatRateCommand::Rate { bpm, source, t_ms } => {
                let accepted = self.scheduler.set_rate(bpm).is_ok();
                if accepted && self.scheduler.next_beat_ms().is_none() {
                    // anchors the first beat one interval from now
                    self.scheduler.tick(now as u64);
                }
                RateUpdate {
                    bpm: Some(bpm),
                    source,
                    hr_t_ms: t_ms,
                    applied_ms: now,
                    accepted,
                    wall,
                }
            }
            BeatRateCommand::Stop => {
                self.scheduler.stop();
                RateUpdate {
                    bpm: None,
                    source: None,
                    hr_t_ms: None,
                    applied_ms: now,
                    accepted: true,
                    wall,
                }
            }
        };
        let current = self.scheduler.current_bpm();
        self.stats.send_modify(|st| {
            st.current_bpm = current;
            if !update.accepted {
                st.rejected_rates += 1;
            }
            push_capped(&mut st.rates, update);
        });
    }

    fn tick(&mut self) {
        let Some(cmd) = self.scheduler.tick(self.clock.now_ms() as u64) else {
            return;
        };
        // the simulated servo follows the schedule, not task wake-up jitter
        match self.scheduler.execute_beat(cmd.scheduled_ms) {
            Ok(_profile) => {
                let msg = BeatEventMessage {
                    t_ms: cmd.scheduled_ms,
                    bpm: cmd.bpm,
                };
                let _ = self
                    .client
                    .publish(&self.topic, serde_json::to_vec(&msg).expect("beat serializes"), false);
                self.stats.send_modify(|st| {
                    st.beats_executed += 1;
                    push_capped(
                        &mut st.beats,
                        ExecutedBeat {
                            t_ms: msg.t_ms,
                            bpm: msg.bpm,
                        },
                    );
                });
            }
            Err(BeatError::Saturated { .. }) => self.stats.send_modify(|st| st.dropped_beats += 1),
            Err(e) => log::debug!("beat not executed: {e}"),
        }
    }
}
