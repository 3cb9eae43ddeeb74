//! Publishing side of the wire protocol.
//!
//! A [`Publisher`] buffers readings under a byte budget and ships them to a
//! collect agent over a [`Link`]. While the agent is unreachable it retries
//! with exponential backoff; when the buffer overflows the oldest readings
//! are dropped and counted.

use std::collections::{HashSet, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::clock::SharedClock;
use crate::reading::{Reading, NS_PER_MS};
use crate::transport::frame::{
    read_frame, write_frame, Frame, ProtocolError, QuerySource, TopicRun, HEADER_LEN, MAX_FRAME,
};
use crate::transport::pattern::SubscriptionPattern;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("not connected: {0}")]
    Down(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("unexpected reply {0:?}")]
    Unexpected(String),
    #[error("remote error: {0}")]
    Remote(String),
}

/// A request/acknowledge channel to a collect agent.
pub trait Link {
    /// Sends one BATCH frame and waits for its acknowledgement.
    fn send(&mut self, frame: &Frame) -> Result<u32, LinkError>;
}

/// TCP link that connects lazily and reconnects after any failure.
pub struct TcpLink {
    addr: String,
    node: String,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    timeout: Duration,
}

impl TcpLink {
    pub fn new(addr: impl Into<String>, node: impl Into<String>) -> Self {
        TcpLink {
            addr: addr.into(),
            node: node.into(),
            conn: None,
            timeout: Duration::from_secs(5),
        }
    }

    fn connect(&mut self) -> Result<(), LinkError> {
        if self.conn.is_some() {
            return Ok(());
        }
        let stream = connect(&self.addr, self.timeout)?;
        let mut w = BufWriter::new(
            stream
                .try_clone()
                .map_err(|e| LinkError::Down(e.to_string()))?,
        );
        let mut r = BufReader::new(stream);
        write_frame(
            &mut w,
            &Frame::Hello {
                node: self.node.clone(),
            },
        )?;
        w.flush().map_err(ProtocolError::from)?;
        expect_ack(&mut r)?;
        self.conn = Some((r, w));
        Ok(())
    }
}

pub(crate) fn connect(addr: &str, timeout: Duration) -> Result<TcpStream, LinkError> {
    let sock = addr
        .to_socket_addrs()
        .map_err(|e| LinkError::Down(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| LinkError::Down(format!("{addr}: no address")))?;
    let s = TcpStream::connect_timeout(&sock, timeout)
        .map_err(|e| LinkError::Down(format!("{addr}: {e}")))?;
    s.set_nodelay(true).ok();
    s.set_read_timeout(Some(timeout)).ok();
    Ok(s)
}

fn expect_ack<R: std::io::Read>(r: &mut R) -> Result<u32, LinkError> {
    match read_frame(r)? {
        Some(Frame::Ack { count }) => Ok(count),
        Some(Frame::End { ok: false, message }) => Err(LinkError::Remote(message)),
        Some(other) => Err(LinkError::Unexpected(format!("{:?}", other.kind()))),
        None => Err(LinkError::Down("connection closed".into())),
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &Frame) -> Result<u32, LinkError> {
        self.connect()?;
        let (r, w) = self.conn.as_mut().expect("connected");
        let res = (|| {
            write_frame(w, frame)?;
            w.flush().map_err(ProtocolError::from)?;
            expect_ack(r)
        })();
        if res.is_err() {
            self.conn = None;
        }
        res
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        if let Some((_, w)) = self.conn.as_mut() {
            let _ = write_frame(w, &Frame::Bye);
            let _ = w.flush();
        }
    }
}

/// Runs a range query against an agent, collecting every BATCH until the
/// terminating END frame.
pub fn query_agent(
    addr: &str,
    pattern: &SubscriptionPattern,
    from: u64,
    to: u64,
    source: QuerySource,
) -> Result<Vec<Reading>, LinkError> {
    let stream = connect(addr, Duration::from_secs(5))?;
    let mut w = BufWriter::new(
        stream
            .try_clone()
            .map_err(|e| LinkError::Down(e.to_string()))?,
    );
    let mut r = BufReader::new(stream);
    write_frame(
        &mut w,
        &Frame::Query {
            pattern: pattern.clone(),
            from,
            to,
            source,
        },
    )?;
    w.flush().map_err(ProtocolError::from)?;
    let mut out = Vec::new();
    loop {
        match read_frame(&mut r)? {
            Some(f @ Frame::Batch(_)) => out.extend(f.readings()),
            Some(Frame::End { ok: true, .. }) => break,
            Some(Frame::End { ok: false, message }) => return Err(LinkError::Remote(message)),
            Some(other) => return Err(LinkError::Unexpected(format!("{:?}", other.kind()))),
            None => return Err(LinkError::Down("connection closed mid-query".into())),
        }
    }
    let _ = write_frame(&mut w, &Frame::Bye);
    let _ = w.flush();
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub initial_ms: u64,
    pub max_ms: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial_ms: 100,
            max_ms: 10_000,
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PublisherStats {
    pub acked: u64,
    pub dropped: u64,
    pub failures: u64,
    pub buffered: usize,
}

pub struct Publisher<L: Link> {
    link: L,
    clock: SharedClock,
    buffer: VecDeque<Reading>,
    buffer_bytes: usize,
    budget_bytes: usize,
    backoff: Backoff,
    current_backoff_ms: u64,
    next_attempt: u64,
    stats: PublisherStats,
}

fn cost(r: &Reading) -> usize {
    16 + r.topic.as_str().len()
}

impl<L: Link> Publisher<L> {
    pub fn new(link: L, clock: SharedClock, budget_bytes: usize) -> Self {
        Publisher {
            link,
            clock,
            buffer: VecDeque::new(),
            buffer_bytes: 0,
            budget_bytes,
            backoff: Backoff::default(),
            current_backoff_ms: 0,
            next_attempt: 0,
            stats: PublisherStats::default(),
        }
    }

    pub fn with_backoff(mut self, b: Backoff) -> Self {
        self.backoff = b;
        self
    }

    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }

    /// Buffers `readings` and, unless backing off, tries to ship the whole
    /// buffer. Returns the number of readings acknowledged by this call.
    pub fn publish(&mut self, readings: &[Reading]) -> usize {
        for r in readings {
            self.buffer_bytes += cost(r);
            self.buffer.push_back(r.clone());
        }
        while self.buffer_bytes > self.budget_bytes {
            match self.buffer.pop_front() {
                Some(old) => {
                    self.buffer_bytes -= cost(&old);
                    self.stats.dropped += 1;
                }
                None => break,
            }
        }
        self.try_flush()
    }

    /// Attempts delivery of buffered readings, respecting backoff.
    pub fn try_flush(&mut self) -> usize {
        let now = self.clock.now_ns();
        if now < self.next_attempt {
            return 0;
        }
        let mut acked = 0;
        while !self.buffer.is_empty() {
            let (frame, n) = self.next_frame();
            match self.link.send(&frame) {
                Ok(_) => {
                    for r in self.buffer.drain(..n) {
                        self.buffer_bytes -= cost(&r);
                    }
                    acked += n;
                    self.current_backoff_ms = 0;
                }
                Err(e) => {
                    log::debug!("publish failed: {e}");
                    self.stats.failures += 1;
                    self.current_backoff_ms = if self.current_backoff_ms == 0 {
                        self.backoff.initial_ms
                    } else {
                        (self.current_backoff_ms * 2).min(self.backoff.max_ms)
                    };
                    self.next_attempt = now + self.current_backoff_ms * NS_PER_MS;
                    break;
                }
            }
        }
        self.stats.acked += acked as u64;
        acked
    }

    /// Builds a BATCH from the longest buffer prefix that fits in a frame.
    fn next_frame(&self) -> (Frame, usize) {
        let budget = MAX_FRAME - HEADER_LEN - 2;
        let mut used = 0;
        let mut seen: HashSet<&str> = HashSet::new();
        let mut n = 0;
        for r in &self.buffer {
            let mut add = 16;
            if !seen.contains(r.topic.as_str()) {
                add += 6 + r.topic.as_str().len();
            }
            if used + add > budget || seen.len() == u16::MAX as usize {
                break;
            }
            seen.insert(r.topic.as_str());
            used += add;
            n += 1;
        }
        let mut runs: Vec<TopicRun> = Vec::new();
        for r in self.buffer.iter().take(n) {
            match runs.iter_mut().find(|run| run.topic == r.topic) {
                Some(run) => run.readings.push((r.timestamp, r.value)),
                None => runs.push(TopicRun {
                    topic: r.topic.clone(),
                    readings: vec![(r.timestamp, r.value)],
                }),
            }
        }
        for run in &mut runs {
            run.readings.sort_by_key(|x| x.0);
        }
        (Frame::Batch(runs), n)
    }

    pub fn stats(&self) -> PublisherStats {
        PublisherStats {
            buffered: self.buffer.len(),
            ..self.stats
        }
    }

    pub fn buffered(&self) -> impl Iterator<Item = &Reading> {
        self.buffer.iter()
    }
}
