//! Length-prefixed binary framing for broker and peer-to-peer messages.
//!
//! ```text
//! frame   := length:u32 version:u8 msg_type:u8 body
//! length  := size of version + msg_type + body
//! string  := len:u16 utf8-bytes
//! bound   := 0:u8 | 1:u8 micros:u64
//! header  := topic:string stream:string seq:u64 event_ts:u64 publish_ts:u64 mode:u8 (locator | inline)
//! locator := host:string port:u16 segment:u64 offset:u64 length:u32          (mode 0)
//! inline  := len:u32 bytes                                                  (mode 1)
//! ```
//!
//! All integers are little-endian and fixed width. See `docs/wire-protocol.md`
//! for the full message table.

use std::io::{self, Read, Write};

use crate::time::{Bound, Duration, Timestamp};
use crate::types::{
    Body, ContractError, Header, JoinMode, NodeAddr, Payload, PayloadLocator, StreamId, TimeBasis,
    TopicConfig, TopicId, DEFAULT_MAX_PAYLOAD,
};

pub const VERSION: u8 = 1;

/// Bytes of the length prefix.
pub const LENGTH_PREFIX: usize = 4;

/// Largest frame accepted by [`read_frame`]: one maximal payload plus headroom for metadata.
pub const MAX_FRAME: usize = DEFAULT_MAX_PAYLOAD + 64 * 1024;

pub mod msg_type {
    pub const PUBLISH_HEADER: u8 = 0;
    pub const SUBSCRIBE: u8 = 1;
    pub const DELIVER: u8 = 2;
    pub const FETCH_REQUEST: u8 = 3;
    pub const FETCH_RESPONSE: u8 = 4;
    pub const ACK: u8 = 5;
    pub const CREATE_TOPIC: u8 = 6;
    pub const GAP: u8 = 7;
    pub const ERROR: u8 = 8;
}

/// Result code of a payload fetch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FetchStatus {
    Ok = 0,
    NotFound = 1,
    Evicted = 2,
    StaleRejected = 3,
}

impl FetchStatus {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => FetchStatus::Ok,
            1 => FetchStatus::NotFound,
            2 => FetchStatus::Evicted,
            3 => FetchStatus::StaleRejected,
            _ => return None,
        })
    }
}

/// Error codes carried by [`WireMessage::Error`].
pub mod error_code {
    pub const UNKNOWN_TOPIC: u8 = 1;
    pub const DUPLICATE_TOPIC: u8 = 2;
    pub const UNKNOWN_STREAM: u8 = 3;
    pub const DUPLICATE_CONSUMER: u8 = 4;
    pub const INVALID_CONFIG: u8 = 5;
    pub const FRAME_TOO_LARGE: u8 = 6;
    pub const PROTOCOL: u8 = 254;
    pub const OTHER: u8 = 255;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireMessage {
    PublishHeader(Header),
    Subscribe {
        topic: TopicId,
        consumer: String,
        shared: bool,
    },
    /// A header delivered to a subscriber, tagged with its broker sequence number.
    Deliver { seq: u64, header: Header },
    FetchRequest {
        locator: PayloadLocator,
        /// Maximum record age the serving node should accept, judged by its own clock.
        max_age: Bound,
    },
    FetchResponse { status: FetchStatus, payload: Payload },
    Ack { sequence: u64 },
    CreateTopic(TopicConfig),
    /// Headers `first_missing..resume_at` fell out of retention before delivery.
    Gap { first_missing: u64, resume_at: u64 },
    Error { code: u8, message: String },
}

impl WireMessage {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            WireMessage::PublishHeader(_) => PUBLISH_HEADER,
            WireMessage::Subscribe { .. } => SUBSCRIBE,
            WireMessage::Deliver { .. } => DELIVER,
            WireMessage::FetchRequest { .. } => FETCH_REQUEST,
            WireMessage::FetchResponse { .. } => FETCH_RESPONSE,
            WireMessage::Ack { .. } => ACK,
            WireMessage::CreateTopic(_) => CREATE_TOPIC,
            WireMessage::Gap { .. } => GAP,
            WireMessage::Error { .. } => ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("string of {0} bytes exceeds the u16 length limit")]
    StringTooLong(usize),
    #[error("payload of {len} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { len: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("string field is not valid UTF-8")]
    InvalidUtf8,
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("frame of {0} bytes exceeds the maximum frame size")]
    FrameTooLarge(usize),
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("invalid field: {0}")]
    Invalid(#[from] ContractError),
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

struct Writer {
    buf: Vec<u8>,
    max_payload: usize,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<(), EncodeError> {
        let len = u16::try_from(s.len()).map_err(|_| EncodeError::StringTooLong(s.len()))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn payload(&mut self, p: &[u8]) -> Result<(), EncodeError> {
        if p.len() > self.max_payload {
            return Err(EncodeError::PayloadTooLarge {
                len: p.len(),
                max: self.max_payload,
            });
        }
        self.u32(p.len() as u32);
        self.buf.extend_from_slice(p);
        Ok(())
    }

    fn duration(&mut self, d: Duration) {
        self.u64(d.as_micros().max(0) as u64);
    }

    fn bound(&mut self, b: Bound) {
        match b {
            Bound::Unlimited => self.u8(0),
            Bound::Limited(d) => {
                self.u8(1);
                self.duration(d);
            }
        }
    }

    fn locator(&mut self, loc: &PayloadLocator) -> Result<(), EncodeError> {
        self.str(&loc.node.host)?;
        self.u16(loc.node.port);
        self.u64(loc.segment);
        self.u64(loc.offset);
        self.u32(loc.length);
        Ok(())
    }

    fn header(&mut self, h: &Header) -> Result<(), EncodeError> {
        self.str(h.topic.as_str())?;
        self.str(h.stream.as_str())?;
        self.u64(h.seq);
        self.u64(h.event_ts.as_micros());
        self.u64(h.publish_ts.as_micros());
        match &h.body {
            Body::Lazy(loc) => {
                self.u8(0);
                self.locator(loc)
            }
            Body::Inline(p) => {
                self.u8(1);
                self.payload(p)
            }
        }
    }

    fn topic_config(&mut self, c: &TopicConfig) -> Result<(), EncodeError> {
        self.str(c.topic.as_str())?;
        let n = u16::try_from(c.streams.len()).map_err(|_| EncodeError::StringTooLong(c.streams.len()))?;
        self.u16(n);
        for s in &c.streams {
            self.str(s.as_str())?;
        }
        match c.join {
            JoinMode::TimeTriggered { window } => {
                self.u8(0);
                self.duration(window);
            }
            JoinMode::DataTriggered => self.u8(1),
            JoinMode::Hybrid { min_interval } => {
                self.u8(2);
                self.duration(min_interval);
            }
        }
        self.bound(c.max_skew);
        self.bound(c.freshness_threshold);
        self.bound(c.target_prediction_frequency);
        self.u8(match c.time_basis {
            TimeBasis::EventTime => 0,
            TimeBasis::ProcessingTime => 1,
        });
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Malformed(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &'static str) -> Result<&'a str, DecodeError> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        std::str::from_utf8(bytes).map_err(|_| DecodeError::InvalidUtf8)
    }

    fn payload(&mut self) -> Result<Payload, DecodeError> {
        let len = self.u32("payload length")? as usize;
        Ok(Payload::copy_from_slice(self.take(len, "payload")?))
    }

    fn duration(&mut self, what: &'static str) -> Result<Duration, DecodeError> {
        let v = self.u64(what)?;
        i64::try_from(v)
            .map(Duration::from_micros)
            .map_err(|_| DecodeError::Malformed(what))
    }

    fn bound(&mut self, what: &'static str) -> Result<Bound, DecodeError> {
        match self.u8(what)? {
            0 => Ok(Bound::Unlimited),
            1 => Ok(Bound::Limited(self.duration(what)?)),
            _ => Err(DecodeError::Malformed(what)),
        }
    }

    fn locator(&mut self) -> Result<PayloadLocator, DecodeError> {
        let host = self.str("locator host")?.to_string();
        let port = self.u16("locator port")?;
        Ok(PayloadLocator {
            node: NodeAddr::new(host, port),
            segment: self.u64("locator segment")?,
            offset: self.u64("locator offset")?,
            length: self.u32("locator length")?,
        })
    }

    fn header(&mut self) -> Result<Header, DecodeError> {
        let topic = TopicId::new(self.str("header topic")?)?;
        let stream = StreamId::new(self.str("header stream")?)?;
        let seq = self.u64("header seq")?;
        let event_ts = Timestamp::from_micros(self.u64("header event_ts")?);
        let publish_ts = Timestamp::from_micros(self.u64("header publish_ts")?);
        let body = match self.u8("header body mode")? {
            0 => Body::Lazy(self.locator()?),
            1 => Body::Inline(self.payload()?),
            _ => return Err(DecodeError::Malformed("header body mode")),
        };
        Ok(Header {
            topic,
            stream,
            seq,
            event_ts,
            publish_ts,
            body,
        })
    }

    fn topic_config(&mut self) -> Result<TopicConfig, DecodeError> {
        let topic = TopicId::new(self.str("topic name")?)?;
        let n = self.u16("stream count")?;
        let mut streams = Vec::with_capacity(n as usize);
        for _ in 0..n {
            streams.push(StreamId::new(self.str("stream name")?)?);
        }
        let join = match self.u8("join mode")? {
            0 => JoinMode::TimeTriggered {
                window: self.duration("window")?,
            },
            1 => JoinMode::DataTriggered,
            2 => JoinMode::Hybrid {
                min_interval: self.duration("min_interval")?,
            },
            _ => return Err(DecodeError::Malformed("join mode")),
        };
        let max_skew = self.bound("max_skew")?;
        let freshness_threshold = self.bound("freshness_threshold")?;
        let target_prediction_frequency = self.bound("target_prediction_frequency")?;
        let time_basis = match self.u8("time basis")? {
            0 => TimeBasis::EventTime,
            1 => TimeBasis::ProcessingTime,
            _ => return Err(DecodeError::Malformed("time basis")),
        };
        Ok(TopicConfig {
            topic,
            streams,
            join,
            max_skew,
            freshness_threshold,
            target_prediction_frequency,
            time_basis,
        })
    }
}

/// Encode `message` as one complete frame.
pub fn encode(message: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    encode_with_limit(message, DEFAULT_MAX_PAYLOAD)
}

pub fn encode_with_limit(message: &WireMessage, max_payload: usize) -> Result<Vec<u8>, EncodeError> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
        max_payload,
    };
    w.u32(0);
    w.u8(VERSION);
    w.u8(message.msg_type());
    match message {
        WireMessage::PublishHeader(h) => w.header(h)?,
        WireMessage::Subscribe {
            topic,
            consumer,
            shared,
        } => {
            w.str(topic.as_str())?;
            w.str(consumer)?;
            w.u8(u8::from(*shared));
        }
        WireMessage::Deliver { seq, header } => {
            w.u64(*seq);
            w.header(header)?;
        }
        WireMessage::FetchRequest { locator, max_age } => {
            w.locator(locator)?;
            w.bound(*max_age);
        }
        WireMessage::FetchResponse { status, payload } => {
            w.u8(*status as u8);
            w.payload(payload)?;
        }
        WireMessage::Ack { sequence } => w.u64(*sequence),
        WireMessage::CreateTopic(cfg) => w.topic_config(cfg)?,
        WireMessage::Gap {
            first_missing,
            resume_at,
        } => {
            w.u64(*first_missing);
            w.u64(*resume_at);
        }
        WireMessage::Error { code, message } => {
            w.u8(*code);
            w.str(message)?;
        }
    }
    let len = (w.buf.len() - LENGTH_PREFIX) as u32;
    w.buf[..LENGTH_PREFIX].copy_from_slice(&len.to_le_bytes());
    Ok(w.buf)
}

/// Decode exactly one frame. Bytes beyond the frame are an error.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    if bytes.len() < LENGTH_PREFIX {
        return Err(DecodeError::Truncated {
            needed: LENGTH_PREFIX,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[..LENGTH_PREFIX].try_into().unwrap()) as usize;
    let available = bytes.len() - LENGTH_PREFIX;
    if available < len {
        return Err(DecodeError::Truncated {
            needed: LENGTH_PREFIX + len,
            available: bytes.len(),
        });
    }
    if available > len {
        return Err(DecodeError::TrailingBytes(available - len));
    }
    decode_body(&bytes[LENGTH_PREFIX..])
}

/// Decode the part of a frame following the length prefix.
fn decode_body(frame: &[u8]) -> Result<WireMessage, DecodeError> {
    if frame.len() < 2 {
        return Err(DecodeError::Malformed("frame shorter than version and type"));
    }
    if frame[0] != VERSION {
        return Err(DecodeError::UnsupportedVersion(frame[0]));
    }
    let ty = frame[1];
    let mut r = Reader { buf: frame, pos: 2 };
    let msg = match ty {
        msg_type::PUBLISH_HEADER => WireMessage::PublishHeader(r.header()?),
        msg_type::SUBSCRIBE => WireMessage::Subscribe {
            topic: TopicId::new(r.str("subscribe topic")?)?,
            consumer: r.str("subscribe consumer")?.to_string(),
            shared: match r.u8("subscribe shared flag")? {
                0 => false,
                1 => true,
                _ => return Err(DecodeError::Malformed("subscribe shared flag")),
            },
        },
        msg_type::DELIVER => WireMessage::Deliver {
            seq: r.u64("deliver seq")?,
            header: r.header()?,
        },
        msg_type::FETCH_REQUEST => WireMessage::FetchRequest {
            locator: r.locator()?,
            max_age: r.bound("max_age")?,
        },
        msg_type::FETCH_RESPONSE => {
            let status = FetchStatus::from_u8(r.u8("fetch status")?)
                .ok_or(DecodeError::Malformed("fetch status"))?;
            WireMessage::FetchResponse {
                status,
                payload: r.payload()?,
            }
        }
        msg_type::ACK => WireMessage::Ack {
            sequence: r.u64("ack sequence")?,
        },
        msg_type::CREATE_TOPIC => WireMessage::CreateTopic(r.topic_config()?),
        msg_type::GAP => WireMessage::Gap {
            first_missing: r.u64("gap start")?,
            resume_at: r.u64("gap end")?,
        },
        msg_type::ERROR => WireMessage::Error {
            code: r.u8("error code")?,
            message: r.str("error message")?.to_string(),
        },
        other => return Err(DecodeError::UnknownMessageType(other)),
    };
    if r.pos != frame.len() {
        return Err(DecodeError::TrailingBytes(frame.len() - r.pos));
    }
    Ok(msg)
}

/// Size in bytes of the frame `PublishHeader(h)` would encode to.
///
/// `Deliver` frames are 8 bytes longer.
pub fn header_frame_len(h: &Header) -> usize {
    let body = match &h.body {
        Body::Lazy(loc) => 2 + loc.node.host.len() + 2 + 8 + 8 + 4,
        Body::Inline(p) => 4 + p.len(),
    };
    LENGTH_PREFIX + 2 + 2 + h.topic.as_str().len() + 2 + h.stream.as_str().len() + 8 * 3 + 1 + body
}

/// Write one framed message.
pub fn write_frame<W: Write>(w: &mut W, message: &WireMessage) -> Result<(), WireError> {
    let bytes = encode(message)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read one framed message. Returns `Ok(None)` on a clean end of stream
/// before any byte of a new frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<WireMessage>, WireError> {
    let mut len_buf = [0u8; LENGTH_PREFIX];
    let mut got = 0;
    while got < LENGTH_PREFIX {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(DecodeError::Truncated {
                    needed: LENGTH_PREFIX,
                    available: got,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(DecodeError::FrameTooLarge(len).into());
    }
    let mut frame = vec![0u8; len];
    r.read_exact(&mut frame).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Decode(DecodeError::Truncated {
                needed: LENGTH_PREFIX + len,
                available: LENGTH_PREFIX,
            })
        } else {
            WireError::Io(e)
        }
    })?;
    Ok(Some(decode_body(&frame)?))
}
