//! Time-series store with per-sensor TTL.
//!
//! Readings live in an in-memory per-topic index that is rebuilt from the
//! segment files on open. Inserts become durable at the next [`Store::flush`],
//! which writes the pending readings as a fresh segment. Expired data is
//! hidden from queries immediately and purged from memory by
//! [`Store::expire`]; [`Store::compact`] rewrites the surviving index into
//! new segments and deletes the old ones.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::reading::{Reading, NS_PER_S};
use crate::storage::segment::{self, Run};
use crate::storage::sink::{SinkDescriptor, SinkRecord, SinkWriter};
use crate::topic::Topic;
use crate::transport::pattern::SubscriptionPattern;

pub const MIN_SEGMENT_SIZE: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error: {0}")]
    Io(#[from] io::Error),
    #[error("ingest halted after an earlier write failure")]
    Halted,
    #[error("invalid store config: {0}")]
    Config(String),
    #[error("query range is inverted ({from} > {to})")]
    BadRange { from: u64, to: u64 },
    #[error("no sink named {0:?}")]
    UnknownSink(String),
    #[error("topic {topic} does not match sink {sink:?}")]
    Routing { sink: String, topic: Topic },
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub data_dir: PathBuf,
    /// Default retention in seconds; zero keeps data forever.
    pub default_ttl_s: u64,
    pub flush_interval_ms: u64,
    /// Upper bound on one segment file, at least 1 MiB.
    pub segment_size: usize,
}

impl StoreConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        StoreConfig {
            data_dir: data_dir.into(),
            default_ttl_s: 30 * 24 * 3600,
            flush_interval_ms: 1000,
            segment_size: 8 * MIN_SEGMENT_SIZE,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.segment_size < MIN_SEGMENT_SIZE {
            return Err(StoreError::Config(format!(
                "segment size {} below 1 MiB",
                self.segment_size
            )));
        }
        if self.flush_interval_ms == 0 {
            return Err(StoreError::Config("flush interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRange {
    pub pattern: SubscriptionPattern,
    pub from: u64,
    pub to: u64,
}

impl QueryRange {
    pub fn new(pattern: SubscriptionPattern, from: u64, to: u64) -> Self {
        QueryRange { pattern, from, to }
    }
}

/// Sorted, deduplicated series for one topic.
#[derive(Debug, Default, Clone)]
struct Series(Vec<(u64, i64)>);

impl Series {
    fn upsert(&mut self, t: u64, v: i64) {
        match self.0.last() {
            Some(&(last, _)) if t > last => self.0.push((t, v)),
            None => self.0.push((t, v)),
            _ => match self.0.binary_search_by_key(&t, |r| r.0) {
                Ok(i) => self.0[i].1 = v,
                Err(i) => self.0.insert(i, (t, v)),
            },
        }
    }

    fn range(&self, from: u64, to: u64) -> &[(u64, i64)] {
        let a = self.0.partition_point(|r| r.0 < from);
        let b = self.0.partition_point(|r| r.0 <= to);
        &self.0[a..b.max(a)]
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpenReport {
    pub segments: usize,
    pub readings: usize,
    pub corrupt_blocks: usize,
    pub bad_segments: usize,
}

pub struct Store {
    cfg: StoreConfig,
    clock: SharedClock,
    index: RwLock<HashMap<Topic, Series>>,
    pending: Mutex<Vec<Reading>>,
    ttl: RwLock<Vec<(SubscriptionPattern, u64)>>,
    sinks: Mutex<Vec<SinkWriter>>,
    next_id: AtomicU64,
    halted: AtomicBool,
    last_flush: AtomicU64,
    report: OpenReport,
    // serialises flush/compact so segment ids and deletions stay ordered
    io_lock: Mutex<()>,
}

impl Store {
    /// Opens (or creates) a store, replaying every readable segment.
    pub fn open(cfg: StoreConfig, clock: SharedClock) -> Result<Store, StoreError> {
        Store::open_mode(cfg, clock, false)
    }

    /// Opens an existing store for queries only, safe while another
    /// process writes to it. Inserts fail with [`StoreError::Halted`].
    pub fn open_read_only(cfg: StoreConfig, clock: SharedClock) -> Result<Store, StoreError> {
        Store::open_mode(cfg, clock, true)
    }

    fn open_mode(
        cfg: StoreConfig,
        clock: SharedClock,
        read_only: bool,
    ) -> Result<Store, StoreError> {
        cfg.validate()?;
        let ids = if read_only {
            segment::peek_segments(&cfg.data_dir)?
        } else {
            fs::create_dir_all(&cfg.data_dir)?;
            segment::list_segments(&cfg.data_dir)?
        };
        let mut index: HashMap<Topic, Series> = HashMap::new();
        let mut report = OpenReport::default();
        for &id in &ids {
            let buf = match fs::read(segment::segment_path(&cfg.data_dir, id)) {
                Ok(b) => b,
                // compacted away by the writer since the listing
                Err(e) if read_only && e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            let d = segment::decode_segment(&buf);
            if d.bad_header {
                log::warn!("segment {id} has an unreadable header; skipped");
                report.bad_segments += 1;
                continue;
            }
            report.segments += 1;
            report.corrupt_blocks += d.corrupt_blocks;
            for (topic, rs) in d.runs {
                report.readings += rs.len();
                let s = index.entry(topic).or_default();
                for (t, v) in rs {
                    s.upsert(t, v);
                }
            }
        }
        let now = clock.now_ns();
        Ok(Store {
            next_id: AtomicU64::new(ids.last().map_or(1, |i| i + 1)),
            cfg,
            clock,
            index: RwLock::new(index),
            pending: Mutex::new(Vec::new()),
            ttl: RwLock::new(Vec::new()),
            sinks: Mutex::new(Vec::new()),
            halted: AtomicBool::new(read_only),
            last_flush: AtomicU64::new(now),
            report,
            io_lock: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn open_report(&self) -> OpenReport {
        self.report
    }

    pub fn data_dir(&self) -> &Path {
        &self.cfg.data_dir
    }

    /// Overrides the TTL for topics matching `pattern`. Later registrations
    /// take precedence.
    pub fn set_ttl(&self, pattern: SubscriptionPattern, ttl_s: u64) {
        self.ttl.write().push((pattern, ttl_s));
    }

    pub fn ttl_for(&self, topic: &Topic) -> u64 {
        self.ttl
            .read()
            .iter()
            .rev()
            .find(|(p, _)| p.matches(topic))
            .map_or(self.cfg.default_ttl_s, |(_, t)| *t)
    }

    fn cutoff(&self, topic: &Topic, now: u64) -> u64 {
        match self.ttl_for(topic) {
            0 => 0,
            ttl => now.saturating_sub(ttl.saturating_mul(NS_PER_S)),
        }
    }

    /// Adds readings to the index and the pending (unflushed) set. Returns
    /// the number accepted; duplicates of `(topic, timestamp)` count and
    /// overwrite the earlier value.
    pub fn insert_batch(&self, readings: &[Reading]) -> Result<usize, StoreError> {
        if self.halted.load(Ordering::Acquire) {
            return Err(StoreError::Halted);
        }
        {
            let mut idx = self.index.write();
            for r in readings {
                match idx.get_mut(&r.topic) {
                    Some(s) => s.upsert(r.timestamp, r.value),
                    None => {
                        let mut s = Series::default();
                        s.upsert(r.timestamp, r.value);
                        idx.insert(r.topic.clone(), s);
                    }
                }
            }
        }
        self.pending.lock().extend_from_slice(readings);
        Ok(readings.len())
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().len()
    }

    /// Writes pending readings as new segments and flushes sinks. A write
    /// failure halts ingest; the failed readings stay pending.
    pub fn flush(&self) -> Result<usize, StoreError> {
        let _io = self.io_lock.lock();
        self.last_flush
            .store(self.clock.now_ns(), Ordering::Release);
        let pending = std::mem::take(&mut *self.pending.lock());
        let n = pending.len();
        if n > 0 {
            let mut grouped: HashMap<Topic, Vec<(u64, i64)>> = HashMap::new();
            for r in &pending {
                grouped
                    .entry(r.topic.clone())
                    .or_default()
                    .push((r.timestamp, r.value));
            }
            // a stable sort keeps the later duplicate last, so replay keeps
            // last-write-wins semantics
            let mut runs: Vec<Run> = grouped
                .into_iter()
                .map(|(t, mut rs)| {
                    rs.sort_by_key(|r| r.0);
                    (t, rs)
                })
                .collect();
            runs.sort_by(|a, b| a.0.cmp(&b.0));
            if let Err(e) = self.write_runs(runs) {
                self.halted.store(true, Ordering::Release);
                let mut p = self.pending.lock();
                let newer = std::mem::take(&mut *p);
                *p = pending;
                p.extend(newer);
                return Err(e.into());
            }
        }
        for s in self.sinks.lock().iter_mut() {
            s.flush()?;
        }
        Ok(n)
    }

    /// Flushes if the flush interval has elapsed on the store's clock.
    pub fn maybe_flush(&self) -> Result<usize, StoreError> {
        let now = self.clock.now_ns();
        let last = self.last_flush.load(Ordering::Acquire);
        if now.saturating_sub(last) >= self.cfg.flush_interval_ms * 1_000_000 {
            self.flush()
        } else {
            Ok(0)
        }
    }

    fn write_runs(&self, runs: Vec<Run>) -> io::Result<Vec<u64>> {
        let mut ids = Vec::new();
        let mut chunk: Vec<Run> = Vec::new();
        let mut bytes = 0usize;
        // rough per-reading estimate; the hard bound is the segment size
        let limit = self.cfg.segment_size;
        for (topic, rs) in runs {
            let per = 10;
            let mut rest = &rs[..];
            while !rest.is_empty() {
                let room = limit.saturating_sub(bytes + 64 + topic.as_str().len()) / per;
                if room == 0 {
                    ids.push(self.write_one(&chunk)?);
                    chunk.clear();
                    bytes = 0;
                    continue;
                }
                let take = room.min(rest.len());
                chunk.push((topic.clone(), rest[..take].to_vec()));
                bytes += 64 + topic.as_str().len() + take * per;
                rest = &rest[take..];
            }
        }
        if !chunk.is_empty() {
            ids.push(self.write_one(&chunk)?);
        }
        Ok(ids)
    }

    fn write_one(&self, runs: &[Run]) -> io::Result<u64> {
        let id = self.next_id.fetch_add(1, Ordering::AcqRel);
        segment::write_segment(&self.cfg.data_dir, id, runs)?;
        Ok(id)
    }

    /// Ascending readings within the range, grouped per topic in topic
    /// order. Expired readings are never returned.
    pub fn query(&self, range: &QueryRange) -> Result<Vec<Reading>, StoreError> {
        if range.from > range.to {
            return Err(StoreError::BadRange {
                from: range.from,
                to: range.to,
            });
        }
        let now = self.clock.now_ns();
        let idx = self.index.read();
        let mut topics: Vec<&Topic> = idx.keys().filter(|t| range.pattern.matches(t)).collect();
        topics.sort();
        let mut out = Vec::new();
        for topic in topics {
            let from = range.from.max(self.cutoff(topic, now));
            if from > range.to {
                continue;
            }
            out.extend(
                idx[topic]
                    .range(from, range.to)
                    .iter()
                    .map(|&(t, v)| Reading::new(topic.clone(), t, v)),
            );
        }
        Ok(out)
    }

    /// Values of a single topic, ascending.
    pub fn query_topic(&self, topic: &Topic, from: u64, to: u64) -> Vec<(u64, i64)> {
        if from > to {
            return Vec::new();
        }
        let from = from.max(self.cutoff(topic, self.clock.now_ns()));
        let idx = self.index.read();
        idx.get(topic)
            .map(|s| s.range(from, to).to_vec())
            .unwrap_or_default()
    }

    pub fn topics(&self) -> Vec<Topic> {
        let mut v: Vec<Topic> = self.index.read().keys().cloned().collect();
        v.sort();
        v
    }

    /// Drops readings older than `now - ttl` for every topic with a TTL.
    /// Returns how many were purged.
    pub fn expire(&self, now_ts: u64) -> usize {
        let mut purged = 0;
        let mut idx = self.index.write();
        for (topic, series) in idx.iter_mut() {
            let cut = self.cutoff(topic, now_ts);
            if cut == 0 {
                continue;
            }
            let k = series.0.partition_point(|r| r.0 < cut);
            purged += k;
            series.0.drain(..k);
        }
        idx.retain(|_, s| !s.0.is_empty());
        purged
    }

    /// Rewrites the whole index into fresh segments and removes the old
    /// files. Pending readings are flushed first.
    pub fn compact(&self) -> Result<(), StoreError> {
        if self.halted.load(Ordering::Acquire) {
            return Err(StoreError::Halted);
        }
        self.flush()?;
        let _io = self.io_lock.lock();
        let old = segment::list_segments(&self.cfg.data_dir)?;
        let runs: Vec<Run> = {
            let idx = self.index.read();
            let mut v: Vec<Run> = idx.iter().map(|(t, s)| (t.clone(), s.0.clone())).collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            v
        };
        self.write_runs(runs)?;
        for id in old {
            fs::remove_file(segment::segment_path(&self.cfg.data_dir, id))?;
        }
        Ok(())
    }

    pub fn register_sink(&self, desc: SinkDescriptor) -> Result<(), StoreError> {
        let w = SinkWriter::open(desc)?;
        self.sinks.lock().push(w);
        Ok(())
    }

    pub fn sink_names(&self) -> Vec<String> {
        self.sinks
            .lock()
            .iter()
            .map(|s| s.desc.name.clone())
            .collect()
    }

    /// Name of the first sink whose pattern accepts `topic`.
    pub fn sink_for(&self, topic: &Topic) -> Option<String> {
        self.sinks
            .lock()
            .iter()
            .find(|s| s.desc.pattern.matches(topic))
            .map(|s| s.desc.name.clone())
    }

    pub fn write_sink(&self, sink: &str, record: &SinkRecord) -> Result<(), StoreError> {
        let mut sinks = self.sinks.lock();
        let w = sinks
            .iter_mut()
            .find(|s| s.desc.name == sink)
            .ok_or_else(|| StoreError::UnknownSink(sink.to_string()))?;
        if !w.desc.pattern.matches(&record.topic) {
            return Err(StoreError::Routing {
                sink: sink.to_string(),
                topic: record.topic.clone(),
            });
        }
        w.append(record)?;
        Ok(())
    }

    pub fn is_halted(&self) -> bool {
        self.halted.load(Ordering::Acquire)
    }
}
