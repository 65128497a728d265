//! MQTT 3.1.1 control packets (QoS 0 subset) and their wire encoding.

use bytes::{BufMut, Bytes, BytesMut};

use super::topic;

pub const DEFAULT_MAX_PAYLOAD: usize = 256 * 1024;
/// Largest value representable in four remaining-length bytes.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

const PROTOCOL_NAME: &str = "MQTT";
const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LastWill {
    pub topic: String,
    pub message: Bytes,
    pub qos: u8,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    pub will: Option<LastWill>,
    pub username: Option<String>,
    pub password: Option<Bytes>,
}

impl Connect {
    pub fn new(client_id: impl Into<String>, keep_alive_s: u16) -> Self {
        Self {
            client_id: client_id.into(),
            keep_alive_s,
            clean_session: true,
            will: None,
            username: None,
            password: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted,
    UnacceptableProtocolVersion,
    IdentifierRejected,
    ServerUnavailable,
    BadUsernameOrPassword,
    NotAuthorized,
}

impl ConnectReturnCode {
    pub fn code(self) -> u8 {
        match self {
            ConnectReturnCode::Accepted => 0,
            ConnectReturnCode::UnacceptableProtocolVersion => 1,
            ConnectReturnCode::IdentifierRejected => 2,
            ConnectReturnCode::ServerUnavailable => 3,
            ConnectReturnCode::BadUsernameOrPassword => 4,
            ConnectReturnCode::NotAuthorized => 5,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ConnectReturnCode::Accepted,
            1 => ConnectReturnCode::UnacceptableProtocolVersion,
            2 => ConnectReturnCode::IdentifierRejected,
            3 => ConnectReturnCode::ServerUnavailable,
            4 => ConnectReturnCode::BadUsernameOrPassword,
            5 => ConnectReturnCode::NotAuthorized,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    pub return_code: ConnectReturnCode,
}

/// Application message. Only QoS 0 is carried, so there is no packet id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Bytes,
    pub retain: bool,
    pub dup: bool,
}

impl Publish {
    pub fn new(topic: impl Into<String>, payload: impl Into<Bytes>, retain: bool) -> Self {
        Self {
            topic: topic.into(),
            payload: payload.into(),
            retain,
            dup: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    /// `(topic filter, requested QoS)`
    pub filters: Vec<(String, u8)>,
}

pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    pub return_codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    Subscribe(Subscribe),
    SubAck(SubAck),
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn type_code(&self) -> u8 {
        match self {
            Packet::Connect(_) => 1,
            Packet::ConnAck(_) => 2,
            Packet::Publish(_) => 3,
            Packet::Subscribe(_) => 8,
            Packet::SubAck(_) => 9,
            Packet::PingReq => 12,
            Packet::PingResp => 13,
            Packet::Disconnect => 14,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::ConnAck(_) => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::Subscribe(_) => "SUBSCRIBE",
            Packet::SubAck(_) => "SUBACK",
            Packet::PingReq => "PINGREQ",
            Packet::PingResp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("remaining length uses more than 4 bytes")]
    RemainingLengthOverflow,
    #[error("remaining length not minimally encoded")]
    NonCanonicalLength,
    #[error("unknown packet type {0}")]
    UnknownPacketType(u8),
    #[error("packet type {0} not supported (QoS 0 subset)")]
    UnsupportedPacketType(u8),
    #[error("invalid fixed-header flags {flags:#06b} for packet type {packet_type}")]
    InvalidFlags { packet_type: u8, flags: u8 },
    #[error("QoS {0} not supported")]
    UnsupportedQos(u8),
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("unsupported protocol {name:?} level {level}")]
    UnsupportedProtocol { name: String, level: u8 },
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("packet of {size} bytes exceeds limit {max}")]
    TooLarge { size: usize, max: usize },
}

/// Encoder/decoder with a payload size limit.
#[derive(Debug, Clone, Copy)]
pub struct Codec {
    pub max_payload: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

// Allowance for fixed and variable headers on top of the payload limit.
const HEADER_ALLOWANCE: usize = 64 * 1024;

pub fn encode_remaining_length(mut len: usize, out: &mut impl BufMut) -> Result<(), CodecError> {
    if len > MAX_REMAINING_LENGTH {
        return Err(CodecError::TooLarge {
            size: len,
            max: MAX_REMAINING_LENGTH,
        });
    }
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.put_u8(byte);
        if len == 0 {
            return Ok(());
        }
    }
}

/// `Ok(None)` when more bytes are needed; otherwise `(value, bytes used)`.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<Option<(usize, usize)>, CodecError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for (i, &byte) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(CodecError::RemainingLengthOverflow);
        }
        value += (byte & 0x7f) as usize * multiplier;
        if byte & 0x80 == 0 {
            if i > 0 && byte == 0 {
                return Err(CodecError::NonCanonicalLength);
            }
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        return Err(CodecError::RemainingLengthOverflow);
    }
    Ok(None)
}

fn put_str(out: &mut BytesMut, s: &str) -> Result<(), CodecError> {
    put_binary(out, s.as_bytes())
}

fn put_binary(out: &mut BytesMut, b: &[u8]) -> Result<(), CodecError> {
    let len = u16::try_from(b.len()).map_err(|_| CodecError::Malformed("field longer than 65535 bytes"))?;
    out.put_u16(len);
    out.put_slice(b);
    Ok(())
}

fn check_string(s: &str) -> Result<(), CodecError> {
    if s.contains('\0') {
        return Err(CodecError::Malformed("string contains NUL"));
    }
    Ok(())
}

impl Codec {
    fn max_packet(&self) -> usize {
        self.max_payload.saturating_add(HEADER_ALLOWANCE).min(MAX_REMAINING_LENGTH)
    }

    pub fn encode(&self, packet: &Packet, out: &mut BytesMut) -> Result<(), CodecError> {
        let mut body = BytesMut::new();
        let flags = match packet {
            Packet::Connect(c) => {
                check_string(&c.client_id)?;
                put_str(&mut body, PROTOCOL_NAME)?;
                body.put_u8(PROTOCOL_LEVEL);
                let mut connect_flags = 0u8;
                if c.clean_session {
                    connect_flags |= 0x02;
                }
                if let Some(w) = &c.will {
                    topic::validate_topic_name(&w.topic).map_err(|_| CodecError::InvalidTopic(w.topic.clone()))?;
                    if w.qos > 2 {
                        return Err(CodecError::UnsupportedQos(w.qos));
                    }
                    connect_flags |= 0x04 | (w.qos << 3);
                    if w.retain {
                        connect_flags |= 0x20;
                    }
                }
                if c.password.is_some() {
                    if c.username.is_none() {
                        return Err(CodecError::Malformed("password without username"));
                    }
                    connect_flags |= 0x40;
                }
                if c.username.is_some() {
                    connect_flags |= 0x80;
                }
                body.put_u8(connect_flags);
                body.put_u16(c.keep_alive_s);
                put_str(&mut body, &c.client_id)?;
                if let Some(w) = &c.will {
                    put_str(&mut body, &w.topic)?;
                    put_binary(&mut body, &w.message)?;
                }
                if let Some(u) = &c.username {
                    check_string(u)?;
                    put_str(&mut body, u)?;
                }
                if let Some(p) = &c.password {
                    put_binary(&mut body, p)?;
                }
                0
            }
            Packet::ConnAck(a) => {
                body.put_u8(u8::from(a.session_present));
                body.put_u8(a.return_code.code());
                0
            }
            Packet::Publish(p) => {
                topic::validate_topic_name(&p.topic).map_err(|_| CodecError::InvalidTopic(p.topic.clone()))?;
                if p.payload.len() > self.max_payload {
                    return Err(CodecError::TooLarge {
                        size: p.payload.len(),
                        max: self.max_payload,
                    });
                }
                put_str(&mut body, &p.topic)?;
                body.put_slice(&p.payload);
                (u8::from(p.dup) << 3) | u8::from(p.retain)
            }
            Packet::Subscribe(s) => {
                if s.filters.is_empty() {
                    return Err(CodecError::Malformed("SUBSCRIBE without filters"));
                }
                if s.packet_id == 0 {
                    return Err(CodecError::Malformed("packet id 0"));
                }
                body.put_u16(s.packet_id);
                for (filter, qos) in &s.filters {
                    if filter.is_empty() {
                        return Err(CodecError::InvalidTopic(filter.clone()));
                    }
                    check_string(filter)?;
                    if *qos > 2 {
                        return Err(CodecError::UnsupportedQos(*qos));
                    }
                    put_str(&mut body, filter)?;
                    body.put_u8(*qos);
                }
                0b0010
            }
            Packet::SubAck(s) => {
                body.put_u16(s.packet_id);
                for &code in &s.return_codes {
                    if code > 2 && code != SUBACK_FAILURE {
                        return Err(CodecError::Malformed("invalid SUBACK return code"));
                    }
                    body.put_u8(code);
                }
                0
            }
            Packet::PingReq | Packet::PingResp | Packet::Disconnect => 0,
        };
        out.reserve(body.len() + 5);
        out.put_u8((packet.type_code() << 4) | flags);
        encode_remaining_length(body.len(), out)?;
        out.extend_from_slice(&body);
        Ok(())
    }

    /// Decodes one packet from the front of `bytes`.
    ///
    /// `Ok(None)` means the packet is incomplete and nothing was consumed.
    pub fn decode(&self, bytes: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
        let Some(&first) = bytes.first() else {
            return Ok(None);
        };
        let packet_type = first >> 4;
        let flags = first & 0x0f;
        match packet_type {
            1 | 2 | 3 | 8 | 9 | 12 | 13 | 14 => {}
            4..=7 | 10 | 11 => return Err(CodecError::UnsupportedPacketType(packet_type)),
            other => return Err(CodecError::UnknownPacketType(other)),
        }
        let expected_flags = match packet_type {
            3 => None,
            8 => Some(0b0010),
            _ => Some(0),
        };
        if let Some(expected) = expected_flags {
            if flags != expected {
                return Err(CodecError::InvalidFlags { packet_type, flags });
            }
        }
        let Some((remaining, len_bytes)) = decode_remaining_length(&bytes[1..])? else {
            return Ok(None);
        };
        if remaining > self.max_packet() {
            return Err(CodecError::TooLarge {
                size: remaining,
                max: self.max_packet(),
            });
        }
        let header = 1 + len_bytes;
        let total = header + remaining;
        if bytes.len() < total {
            return Ok(None);
        }
        let mut r = Reader::new(&bytes[header..total]);
        let packet = match packet_type {
            1 => decode_connect(&mut r)?,
            2 => {
                let ack_flags = r.u8()?;
                if ack_flags & 0xfe != 0 {
                    return Err(CodecError::Malformed("reserved CONNACK flags set"));
                }
                let code = r.u8()?;
                Packet::ConnAck(ConnAck {
                    session_present: ack_flags & 1 == 1,
                    return_code: ConnectReturnCode::from_code(code)
                        .ok_or(CodecError::Malformed("unknown CONNACK return code"))?,
                })
            }
            3 => {
                let qos = (flags >> 1) & 0b11;
                if qos != 0 {
                    return Err(CodecError::UnsupportedQos(qos));
                }
                let topic = r.string()?;
                topic::validate_topic_name(&topic).map_err(|_| CodecError::InvalidTopic(topic.clone()))?;
                let payload = r.rest();
                if payload.len() > self.max_payload {
                    return Err(CodecError::TooLarge {
                        size: payload.len(),
                        max: self.max_payload,
                    });
                }
                Packet::Publish(Publish {
                    topic,
                    payload: Bytes::copy_from_slice(payload),
                    retain: flags & 1 == 1,
                    dup: flags & 0b1000 != 0,
                })
            }
            8 => {
                let packet_id = r.u16()?;
                if packet_id == 0 {
                    return Err(CodecError::Malformed("packet id 0"));
                }
                let mut filters = Vec::new();
                while !r.is_empty() {
                    let filter = r.string()?;
                    if filter.is_empty() {
                        return Err(CodecError::InvalidTopic(filter));
                    }
                    let qos = r.u8()?;
                    if qos > 2 {
                        return Err(CodecError::Malformed("reserved bits in requested QoS"));
                    }
                    filters.push((filter, qos));
                }
                if filters.is_empty() {
                    return Err(CodecError::Malformed("SUBSCRIBE without filters"));
                }
                Packet::Subscribe(Subscribe { packet_id, filters })
            }
            9 => {
                let packet_id = r.u16()?;
                let return_codes = r.rest().to_vec();
                if return_codes.iter().any(|&c| c > 2 && c != SUBACK_FAILURE) {
                    return Err(CodecError::Malformed("invalid SUBACK return code"));
                }
                Packet::SubAck(SubAck {
                    packet_id,
                    return_codes,
                })
            }
            12 => Packet::PingReq,
            13 => Packet::PingResp,
            14 => Packet::Disconnect,
            _ => unreachable!("filtered above"),
        };
        if !r.is_empty() {
            return Err(CodecError::Malformed("trailing bytes"));
        }
        Ok(Some((packet, total)))
    }
}

fn decode_connect(r: &mut Reader<'_>) -> Result<Packet, CodecError> {
    let name = r.string()?;
    let level = r.u8()?;
    if name != PROTOCOL_NAME || level != PROTOCOL_LEVEL {
        return Err(CodecError::UnsupportedProtocol { name, level });
    }
    let flags = r.u8()?;
    if flags & 0x01 != 0 {
        return Err(CodecError::Malformed("reserved CONNECT flag set"));
    }
    let keep_alive_s = r.u16()?;
    let client_id = r.string()?;
    let will_flag = flags & 0x04 != 0;
    let will_qos = (flags >> 3) & 0b11;
    let will_retain = flags & 0x20 != 0;
    if !will_flag && (will_qos != 0 || will_retain) {
        return Err(CodecError::Malformed("will QoS/retain without will flag"));
    }
    if will_qos > 2 {
        return Err(CodecError::UnsupportedQos(will_qos));
    }
    let will = if will_flag {
        let topic = r.string()?;
        topic::validate_topic_name(&topic).map_err(|_| CodecError::InvalidTopic(topic.clone()))?;
        let message = Bytes::copy_from_slice(r.binary()?);
        Some(LastWill {
            topic,
            message,
            qos: will_qos,
            retain: will_retain,
        })
    } else {
        None
    };
    let has_username = flags & 0x80 != 0;
    let has_password = flags & 0x40 != 0;
    if has_password && !has_username {
        return Err(CodecError::Malformed("password without username"));
    }
    let username = if has_username { Some(r.string()?) } else { None };
    let password = if has_password {
        Some(Bytes::copy_from_slice(r.binary()?))
    } else {
        None
    };
    Ok(Packet::Connect(Connect {
        client_id,
        keep_alive_s,
        clean_session: flags & 0x02 != 0,
        will,
        username,
        password,
    }))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Malformed("field runs past end of packet"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn binary(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(raw).map_err(|_| CodecError::InvalidUtf8)?;
        if s.contains('\0') {
            return Err(CodecError::Malformed("string contains NUL"));
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }
}

/// Encodes with the default payload limit.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, CodecError> {
    let mut out = BytesMut::new();
    Codec::default().encode(packet, &mut out)?;
    Ok(out.to_vec())
}

/// Decodes with the default size limit. See [`Codec::decode`].
pub fn decode_packet(bytes: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
    Codec::default().decode(bytes)
}
