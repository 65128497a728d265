//! Software reconstruction of a pair of tangible heart displays.
//!
//! Simulated BVP sensors ([`bvp`]) feed a streaming STFT heart-rate estimator
//! ([`estimator`]). Each simulated device ([`node`]) publishes its heart rate
//! through its own minimal MQTT broker ([`mqtt`]) and drives a servo beat
//! model ([`beat`]). The [`orchestrator`] connects to both brokers, routes
//! heart rates between participants according to the active modality, and
//! records a timestamped JSONL session log.

pub mod beat;
pub mod bvp;
pub mod clock;
pub mod estimator;
pub mod mqtt;
pub mod node;
pub mod orchestrator;

pub use beat::{BeatCommand, BeatScheduler, MotionProfile};
pub use bvp::{BvpConfig, BvpSample, HrProfile, PulseShape};
pub use clock::SimClock;
pub use estimator::{EstimatorConfig, HrEstimate, SlidingWindow, SpectrumMode};
pub use orchestrator::{Modality, SessionPlan, SessionRecord};

