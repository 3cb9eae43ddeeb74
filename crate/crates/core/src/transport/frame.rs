//! Binary frame codec.
//!
//! Every frame starts with an 8-byte header, all integers little-endian:
//!
//! ```text
//! magic 0xDA7A (2B) | kind (1B) | flags (1B) | payload length (4B) | payload
//! ```
//!
//! A BATCH payload is a topic count (2B) followed, per topic, by the topic
//! length (2B), the UTF-8 topic, a reading count (4B) and the readings as
//! `(u64 timestamp, i64 value)` pairs.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::reading::Reading;
use crate::topic::Topic;
use crate::transport::pattern::SubscriptionPattern;

pub const MAGIC: u16 = 0xDA7A;
pub const HEADER_LEN: usize = 8;
pub const MAX_FRAME: usize = 1 << 20;
const READING_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("unexpected end")]
    UnexpectedEnd,
    #[error("frame of {0} bytes exceeds the 1 MiB limit")]
    Oversized(usize),
    #[error("length mismatch: header says {declared}, payload used {used}")]
    LengthMismatch { declared: usize, used: usize },
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Hello = 1,
    Publish = 2,
    Subscribe = 3,
    Batch = 4,
    Ping = 5,
    Bye = 6,
    Ack = 7,
    Query = 8,
    End = 9,
    Knob = 10,
}

impl FrameKind {
    fn from_u8(b: u8) -> Result<Self, ProtocolError> {
        Ok(match b {
            1 => FrameKind::Hello,
            2 => FrameKind::Publish,
            3 => FrameKind::Subscribe,
            4 => FrameKind::Batch,
            5 => FrameKind::Ping,
            6 => FrameKind::Bye,
            7 => FrameKind::Ack,
            8 => FrameKind::Query,
            9 => FrameKind::End,
            10 => FrameKind::Knob,
            other => return Err(ProtocolError::UnknownKind(other)),
        })
    }
}

/// Where a QUERY is answered from. Carried in the header flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// Cache first, falling back to the store.
    Any = 0,
    Cache = 1,
    Store = 2,
}

/// One topic's run of readings inside a BATCH.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicRun {
    pub topic: Topic,
    pub readings: Vec<(u64, i64)>,
}

impl TopicRun {
    pub fn encoded_len(&self) -> usize {
        2 + self.topic.as_str().len() + 4 + READING_LEN * self.readings.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello {
        node: String,
    },
    Publish(Reading),
    Subscribe(SubscriptionPattern),
    Batch(Vec<TopicRun>),
    Ping,
    Bye,
    Ack {
        count: u32,
    },
    Query {
        pattern: SubscriptionPattern,
        from: u64,
        to: u64,
        source: QuerySource,
    },
    /// Terminates a query response or reports a request failure.
    End {
        ok: bool,
        message: String,
    },
    /// Knob write: set the register named by `topic` to `value`.
    Knob {
        topic: Topic,
        value: i64,
    },
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Hello { .. } => FrameKind::Hello,
            Frame::Publish(_) => FrameKind::Publish,
            Frame::Subscribe(_) => FrameKind::Subscribe,
            Frame::Batch(_) => FrameKind::Batch,
            Frame::Ping => FrameKind::Ping,
            Frame::Bye => FrameKind::Bye,
            Frame::Ack { .. } => FrameKind::Ack,
            Frame::Query { .. } => FrameKind::Query,
            Frame::End { .. } => FrameKind::End,
            Frame::Knob { .. } => FrameKind::Knob,
        }
    }

    /// Flattens a BATCH into readings; other frames yield nothing except
    /// PUBLISH, which yields its single reading.
    pub fn readings(&self) -> Vec<Reading> {
        match self {
            Frame::Publish(r) => vec![r.clone()],
            Frame::Batch(runs) => runs
                .iter()
                .flat_map(|run| {
                    run.readings
                        .iter()
                        .map(|&(t, v)| Reading::new(run.topic.clone(), t, v))
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), ProtocolError> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| ProtocolError::Invalid("string longer than 65535 bytes".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    let mut payload = Vec::new();
    let mut flags = 0u8;
    match frame {
        Frame::Hello { node } => put_str16(&mut payload, node)?,
        Frame::Publish(r) => {
            put_str16(&mut payload, r.topic.as_str())?;
            payload.extend_from_slice(&r.timestamp.to_le_bytes());
            payload.extend_from_slice(&r.value.to_le_bytes());
        }
        Frame::Subscribe(p) => put_str16(&mut payload, &p.to_string())?,
        Frame::Batch(runs) => {
            let n: u16 = runs
                .len()
                .try_into()
                .map_err(|_| ProtocolError::Invalid("too many topics in batch".into()))?;
            payload.extend_from_slice(&n.to_le_bytes());
            for run in runs {
                if run.readings.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(ProtocolError::Invalid(format!(
                        "readings for {} not ascending",
                        run.topic
                    )));
                }
                put_str16(&mut payload, run.topic.as_str())?;
                payload.extend_from_slice(&(run.readings.len() as u32).to_le_bytes());
                for &(t, v) in &run.readings {
                    payload.extend_from_slice(&t.to_le_bytes());
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Frame::Ping | Frame::Bye => {}
        Frame::Ack { count } => payload.extend_from_slice(&count.to_le_bytes()),
        Frame::Query {
            pattern,
            from,
            to,
            source,
        } => {
            flags = *source as u8;
            put_str16(&mut payload, &pattern.to_string())?;
            payload.extend_from_slice(&from.to_le_bytes());
            payload.extend_from_slice(&to.to_le_bytes());
        }
        Frame::End { ok, message } => {
            flags = u8::from(!*ok);
            put_str16(&mut payload, message)?;
        }
        Frame::Knob { topic, value } => {
            put_str16(&mut payload, topic.as_str())?;
            payload.extend_from_slice(&value.to_le_bytes());
        }
    }
    let total = HEADER_LEN + payload.len();
    if total > MAX_FRAME {
        return Err(ProtocolError::Oversized(total));
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(frame.kind() as u8);
    out.push(flags);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::UnexpectedEnd);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, ProtocolError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str16(&mut self) -> Result<&'a str, ProtocolError> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| ProtocolError::Invalid("string is not UTF-8".into()))
    }
    fn topic(&mut self) -> Result<Topic, ProtocolError> {
        let s = self.str16()?;
        Topic::parse(s).map_err(|e| ProtocolError::Invalid(format!("topic {s:?}: {e}")))
    }
    fn pattern(&mut self) -> Result<SubscriptionPattern, ProtocolError> {
        let s = self.str16()?;
        SubscriptionPattern::parse(s)
            .map_err(|e| ProtocolError::Invalid(format!("pattern {s:?}: {e}")))
    }
}

struct Header {
    kind: FrameKind,
    flags: u8,
    len: usize,
}

fn decode_header(h: &[u8]) -> Result<Header, ProtocolError> {
    if h.len() < HEADER_LEN {
        return Err(ProtocolError::UnexpectedEnd);
    }
    let magic = u16::from_le_bytes([h[0], h[1]]);
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let kind = FrameKind::from_u8(h[2])?;
    let len = u32::from_le_bytes(h[4..8].try_into().unwrap()) as usize;
    if HEADER_LEN + len > MAX_FRAME {
        return Err(ProtocolError::Oversized(HEADER_LEN + len));
    }
    Ok(Header {
        kind,
        flags: h[3],
        len,
    })
}

fn decode_payload(header: &Header, payload: &[u8]) -> Result<Frame, ProtocolError> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    let frame = match header.kind {
        FrameKind::Hello => Frame::Hello {
            node: c.str16()?.to_string(),
        },
        FrameKind::Publish => {
            let topic = c.topic()?;
            let timestamp = c.u64()?;
            let value = c.i64()?;
            Frame::Publish(Reading {
                topic,
                timestamp,
                value,
            })
        }
        FrameKind::Subscribe => Frame::Subscribe(c.pattern()?),
        FrameKind::Batch => {
            let n = c.u16()? as usize;
            let mut runs = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let topic = c.topic()?;
                let count = c.u32()? as usize;
                if count.saturating_mul(READING_LEN) > payload.len() - c.pos {
                    return Err(ProtocolError::UnexpectedEnd);
                }
                let mut readings = Vec::with_capacity(count);
                for _ in 0..count {
                    let t = c.u64()?;
                    let v = c.i64()?;
                    if readings.last().is_some_and(|&(p, _)| t < p) {
                        return Err(ProtocolError::Invalid(format!(
                            "readings for {topic} not ascending"
                        )));
                    }
                    readings.push((t, v));
                }
                runs.push(TopicRun { topic, readings });
            }
            Frame::Batch(runs)
        }
        FrameKind::Ping => Frame::Ping,
        FrameKind::Bye => Frame::Bye,
        FrameKind::Ack => Frame::Ack { count: c.u32()? },
        FrameKind::Query => {
            let source = match header.flags {
                0 => QuerySource::Any,
                1 => QuerySource::Cache,
                2 => QuerySource::Store,
                f => return Err(ProtocolError::Invalid(format!("query source flag {f}"))),
            };
            let pattern = c.pattern()?;
            let from = c.u64()?;
            let to = c.u64()?;
            Frame::Query {
                pattern,
                from,
                to,
                source,
            }
        }
        FrameKind::End => Frame::End {
            ok: header.flags == 0,
            message: c.str16()?.to_string(),
        },
        FrameKind::Knob => {
            let topic = c.topic()?;
            let value = c.i64()?;
            Frame::Knob { topic, value }
        }
    };
    if c.pos != payload.len() {
        return Err(ProtocolError::LengthMismatch {
            declared: payload.len(),
            used: c.pos,
        });
    }
    Ok(frame)
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), ProtocolError> {
    let header = decode_header(bytes)?;
    let end = HEADER_LEN + header.len;
    if bytes.len() < end {
        return Err(ProtocolError::UnexpectedEnd);
    }
    let frame = decode_payload(&header, &bytes[HEADER_LEN..end])?;
    Ok((frame, end))
}

/// Reads exactly one frame from a stream. A clean EOF before the header
/// yields `Ok(None)`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::UnexpectedEnd),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let header = decode_header(&h)?;
    let mut payload = vec![0u8; header.len];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ProtocolError::UnexpectedEnd
        } else {
            ProtocolError::Io(e)
        }
    })?;
    decode_payload(&header, &payload).map(Some)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), ProtocolError> {
    let bytes = encode_frame(frame)?;
    w.write_all(&bytes)?;
    Ok(())
}

/// Groups readings by topic (first-seen order) and splits them into BATCH
/// frames that each fit in [`MAX_FRAME`]. Readings within a topic are
/// sorted by timestamp.
pub fn batch_frames(readings: &[Reading]) -> Vec<Frame> {
    let mut order: Vec<Topic> = Vec::new();
    let mut groups: std::collections::HashMap<Topic, Vec<(u64, i64)>> =
        std::collections::HashMap::new();
    for r in readings {
        groups
            .entry(r.topic.clone())
            .or_insert_with(|| {
                order.push(r.topic.clone());
                Vec::new()
            })
            .push((r.timestamp, r.value));
    }
    let budget = MAX_FRAME - HEADER_LEN - 2;
    let mut frames = Vec::new();
    let mut current: Vec<TopicRun> = Vec::new();
    let mut used = 0usize;
    for topic in order {
        let mut rs = groups.remove(&topic).unwrap_or_default();
        rs.sort_by_key(|r| r.0);
        let fixed = 2 + topic.as_str().len() + 4;
        let mut rest = &rs[..];
        while !rest.is_empty() {
            if current.len() == u16::MAX as usize || used + fixed + READING_LEN > budget {
                frames.push(Frame::Batch(std::mem::take(&mut current)));
                used = 0;
            }
            let room = (budget - used - fixed) / READING_LEN;
            let take = room.min(rest.len());
            current.push(TopicRun {
                topic: topic.clone(),
                readings: rest[..take].to_vec(),
            });
            used += fixed + take * READING_LEN;
            rest = &rest[take..];
        }
    }
    if !current.is_empty() {
        frames.push(Frame::Batch(current));
    }
    frames
}
