//! Collect-agent routing: every published reading goes into the agent's
//! cache, onto the storage ingest queue and out to matching subscribers.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::RwLock;
use thiserror::Error;

use crate::cache::SensorCache;
use crate::reading::Reading;
use crate::storage::store::{QueryRange, Store, StoreError};
use crate::transport::frame::QuerySource;
use crate::transport::pattern::SubscriptionPattern;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("storage ingest queue closed")]
    QueueClosed,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Where routed readings go for persistence.
enum Ingest {
    None,
    /// Inserted synchronously, for deterministic tests and simulations.
    Direct(Arc<Store>),
    /// Bounded queue drained by a [`StorageWriter`]; a full queue blocks
    /// the sender.
    Queue(Sender<Vec<Reading>>),
}

struct Subscriber {
    id: u64,
    pattern: SubscriptionPattern,
    tx: Sender<Reading>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RouteReport {
    pub cached: usize,
    pub stale: usize,
    pub enqueued: usize,
    pub delivered: usize,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AgentStats {
    pub routed: u64,
    pub enqueued: u64,
    pub delivered: u64,
}

pub struct Agent {
    cache: Arc<SensorCache>,
    store: Option<Arc<Store>>,
    ingest: Ingest,
    subscribers: RwLock<Vec<Subscriber>>,
    next_sub: AtomicU64,
    routed: AtomicU64,
    enqueued: AtomicU64,
    delivered: AtomicU64,
}

impl Agent {
    /// Agent with a cache only (no persistence).
    pub fn new(cache: Arc<SensorCache>) -> Self {
        Agent::build(cache, None, Ingest::None)
    }

    pub fn with_direct_store(cache: Arc<SensorCache>, store: Arc<Store>) -> Self {
        Agent::build(cache, Some(store.clone()), Ingest::Direct(store))
    }

    /// Agent with a bounded ingest queue of `queue_batches` batches and a
    /// background writer thread.
    pub fn with_store_queue(
        cache: Arc<SensorCache>,
        store: Arc<Store>,
        queue_batches: usize,
    ) -> (Self, StorageWriter) {
        let (tx, rx) = bounded(queue_batches.max(1));
        let writer = StorageWriter::spawn(store.clone(), rx);
        (Agent::build(cache, Some(store), Ingest::Queue(tx)), writer)
    }

    fn build(cache: Arc<SensorCache>, store: Option<Arc<Store>>, ingest: Ingest) -> Self {
        Agent {
            cache,
            store,
            ingest,
            subscribers: RwLock::new(Vec::new()),
            next_sub: AtomicU64::new(1),
            routed: AtomicU64::new(0),
            enqueued: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
        }
    }

    pub fn cache(&self) -> &Arc<SensorCache> {
        &self.cache
    }

    pub fn store(&self) -> Option<&Arc<Store>> {
        self.store.as_ref()
    }

    pub fn subscribe(&self, pattern: SubscriptionPattern) -> (u64, Receiver<Reading>) {
        let (tx, rx) = unbounded();
        let id = self.next_sub.fetch_add(1, Ordering::Relaxed);
        self.subscribers
            .write()
            .push(Subscriber { id, pattern, tx });
        (id, rx)
    }

    pub fn unsubscribe(&self, id: u64) {
        self.subscribers.write().retain(|s| s.id != id);
    }

    /// Routes readings: cache, storage queue (blocking when full) and
    /// subscribers, in that order. Returns once the readings are enqueued.
    pub fn route(&self, readings: &[Reading]) -> Result<RouteReport, BrokerError> {
        let mut rep = RouteReport::default();
        for r in readings {
            if self.cache.insert(r) {
                rep.cached += 1;
            } else {
                rep.stale += 1;
            }
        }
        match &self.ingest {
            Ingest::None => {}
            Ingest::Direct(store) => {
                rep.enqueued = store.insert_batch(readings)?;
                store.maybe_flush()?;
            }
            Ingest::Queue(tx) => {
                if !readings.is_empty() {
                    tx.send(readings.to_vec())
                        .map_err(|_| BrokerError::QueueClosed)?;
                    rep.enqueued = readings.len();
                }
            }
        }
        {
            let mut dead = Vec::new();
            let subs = self.subscribers.read();
            for s in subs.iter() {
                for r in readings.iter().filter(|r| s.pattern.matches(&r.topic)) {
                    if s.tx.send(r.clone()).is_err() {
                        dead.push(s.id);
                        break;
                    }
                    rep.delivered += 1;
                }
            }
            drop(subs);
            for id in dead {
                self.unsubscribe(id);
            }
        }
        self.routed
            .fetch_add(readings.len() as u64, Ordering::Relaxed);
        self.enqueued
            .fetch_add(rep.enqueued as u64, Ordering::Relaxed);
        self.delivered
            .fetch_add(rep.delivered as u64, Ordering::Relaxed);
        Ok(rep)
    }

    /// Answers a range query: cache first, with the store filling in
    /// whatever the cache no longer holds.
    pub fn query(
        &self,
        pattern: &SubscriptionPattern,
        from: u64,
        to: u64,
        source: QuerySource,
    ) -> Result<Vec<Reading>, BrokerError> {
        if source == QuerySource::Store {
            return match &self.store {
                Some(s) => Ok(s.query(&QueryRange::new(pattern.clone(), from, to))?),
                None => Ok(Vec::new()),
            };
        }
        let mut topics: BTreeSet<_> = self
            .cache
            .topics()
            .into_iter()
            .filter(|t| pattern.matches(t))
            .collect();
        let use_store = source == QuerySource::Any && self.store.is_some();
        if use_store {
            if let Some(s) = &self.store {
                topics.extend(s.topics().into_iter().filter(|t| pattern.matches(t)));
            }
        }
        let mut out = Vec::new();
        for topic in topics {
            let cached = self.cache.window(&topic, from, to);
            if use_store {
                let store = self.store.as_ref().expect("checked");
                let seam = self.cache.oldest(&topic).unwrap_or(u64::MAX);
                if from < seam {
                    let upto = to.min(seam.saturating_sub(1));
                    out.extend(
                        store
                            .query_topic(&topic, from, upto)
                            .into_iter()
                            .map(|(t, v)| Reading::new(topic.clone(), t, v)),
                    );
                }
            }
            out.extend(cached);
        }
        Ok(out)
    }

    pub fn stats(&self) -> AgentStats {
        AgentStats {
            routed: self.routed.load(Ordering::Relaxed),
            enqueued: self.enqueued.load(Ordering::Relaxed),
            delivered: self.delivered.load(Ordering::Relaxed),
        }
    }
}

/// Drains the ingest queue into a [`Store`] and flushes it on the store's
/// flush interval. Stops when every sender is dropped.
pub struct StorageWriter {
    handle: Option<JoinHandle<Result<(), StoreError>>>,
}

impl StorageWriter {
    fn spawn(store: Arc<Store>, rx: Receiver<Vec<Reading>>) -> Self {
        let tick = Duration::from_millis(store.config().flush_interval_ms.max(1));
        let handle = std::thread::Builder::new()
            .name("storage-writer".into())
            .spawn(move || loop {
                match rx.recv_timeout(tick) {
                    Ok(batch) => {
                        store.insert_batch(&batch)?;
                        store.maybe_flush()?;
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        store.maybe_flush()?;
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        store.flush()?;
                        return Ok(());
                    }
                }
            })
            .expect("spawn storage writer");
        StorageWriter {
            handle: Some(handle),
        }
    }

    /// Waits for the writer to drain and exit. The agent owning the queue
    /// must be dropped first.
    pub fn join(mut self) -> Result<(), StoreError> {
        match self.handle.take() {
            Some(h) => h.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}
