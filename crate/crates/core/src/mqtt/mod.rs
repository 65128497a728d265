//! A minimal MQTT 3.1.1 implementation: QoS 0 only, no persistent sessions, no
//! authentication. Retained messages and last-will are supported.

pub mod broker;
pub mod client;
pub mod codec;
pub mod topic;

pub use broker::{broker_serve, BrokerConfig, BrokerError, BrokerHandle};
pub use client::{ClientError, ClientOptions, ClientSession, Message, MqttClient};
pub use codec::{decode_packet, encode_packet, Codec, CodecError, LastWill, Packet};
