//! Per-node sampling daemon: sampler plugins feed a local cache, in-band
//! operator units run against that cache, and every sensor not marked
//! local-only is published to a collect agent.

pub mod config;
pub mod file;
pub mod plant;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use crate::cache::SensorCache;
use crate::clock::SharedClock;
use crate::operator::{DataView, HealthEvent, HealthLog, ReadingSink, Scheduler};
use crate::reading::{Reading, NS_PER_MS};
use crate::topic::Topic;
use crate::transport::client::{Link, LinkError, Publisher, PublisherStats};
use crate::transport::frame::Frame;
use crate::transport::Agent;

pub use config::{build_pusher, PusherConfig};
pub use file::{read_file_source, FileSource, ParserKind};
pub use plant::PlantSource;

/// Consecutive failures of one plugin that raise a health event.
pub const DEFAULT_FAILURE_ALERT: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorDecl {
    pub topic: Topic,
    pub local_only: bool,
}

impl SensorDecl {
    pub fn new(topic: Topic) -> Self {
        SensorDecl {
            topic,
            local_only: false,
        }
    }

    pub fn local(topic: Topic) -> Self {
        SensorDecl {
            topic,
            local_only: true,
        }
    }
}

pub trait SamplerPlugin: Send {
    fn name(&self) -> &str;
    /// Every sensor the plugin may produce. Fixed before sampling starts.
    fn sensors(&self) -> Vec<SensorDecl>;
    fn interval_ms(&self) -> u64;
    /// At most one reading per declared sensor. `Err` fails the whole tick.
    fn sample(&mut self, ts: u64) -> Result<Vec<Reading>, String>;
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PluginStats {
    pub ticks: u64,
    pub readings: u64,
    pub failures: u64,
    pub consecutive_failures: u32,
    /// Deadlines passed without sampling.
    pub missed: u64,
    /// Readings for undeclared topics, dropped.
    pub undeclared: u64,
}

struct Slot {
    plugin: Box<dyn SamplerPlugin>,
    declared: HashSet<Topic>,
    next_due: Option<u64>,
    stats: PluginStats,
}

/// Local cache plus the outgoing queue. In-band units write here too.
pub struct PusherSink {
    cache: Arc<SensorCache>,
    queue: Mutex<Vec<Reading>>,
    local_only: RwLock<HashSet<Topic>>,
}

impl PusherSink {
    pub fn new(cache: Arc<SensorCache>) -> Self {
        PusherSink {
            cache,
            queue: Mutex::new(Vec::new()),
            local_only: RwLock::new(HashSet::new()),
        }
    }

    pub fn mark_local(&self, topics: impl IntoIterator<Item = Topic>) {
        self.local_only.write().extend(topics);
    }

    pub fn is_local(&self, t: &Topic) -> bool {
        self.local_only.read().contains(t)
    }

    fn take_queue(&self) -> Vec<Reading> {
        std::mem::take(&mut *self.queue.lock())
    }
}

impl ReadingSink for PusherSink {
    fn emit(&self, readings: &[Reading]) {
        for r in readings {
            self.cache.insert(r);
        }
        let local = self.local_only.read();
        let mut q = self.queue.lock();
        q.extend(
            readings
                .iter()
                .filter(|r| !local.contains(&r.topic))
                .cloned(),
        );
    }
}

/// Delivers frames straight into an in-process agent.
pub struct LocalLink(pub Arc<Agent>);

impl Link for LocalLink {
    fn send(&mut self, frame: &Frame) -> Result<u32, LinkError> {
        let rs = frame.readings();
        self.0
            .route(&rs)
            .map_err(|e| LinkError::Remote(e.to_string()))?;
        Ok(rs.len() as u32)
    }
}

pub struct Pusher<L: Link> {
    pub prefix: Topic,
    slots: Vec<Slot>,
    sink: Arc<PusherSink>,
    scheduler: Scheduler,
    publisher: Publisher<L>,
    health: HealthLog,
    failure_alert: u32,
    published: u64,
}

impl<L: Link> Pusher<L> {
    pub fn new(
        prefix: Topic,
        cache: Arc<SensorCache>,
        publisher: Publisher<L>,
        health: HealthLog,
    ) -> Self {
        let sink = Arc::new(PusherSink::new(cache.clone()));
        let scheduler = Scheduler::new(DataView::new(cache, None), sink.clone(), health.clone());
        Pusher {
            prefix,
            slots: Vec::new(),
            sink,
            scheduler,
            publisher,
            health,
            failure_alert: DEFAULT_FAILURE_ALERT,
            published: 0,
        }
    }

    pub fn with_failure_alert(mut self, n: u32) -> Self {
        self.failure_alert = n.max(1);
        self
    }

    /// Registers a plugin. Its sensors must live under the node prefix.
    pub fn add_plugin(&mut self, plugin: Box<dyn SamplerPlugin>) -> Result<(), String> {
        let decls = plugin.sensors();
        for d in &decls {
            if !d.topic.starts_with_path(self.prefix.as_str()) {
                return Err(format!(
                    "sensor {} is outside node prefix {}",
                    d.topic, self.prefix
                ));
            }
        }
        self.sink.mark_local(
            decls
                .iter()
                .filter(|d| d.local_only)
                .map(|d| d.topic.clone()),
        );
        self.slots.push(Slot {
            declared: decls.into_iter().map(|d| d.topic).collect(),
            plugin,
            next_due: None,
            stats: PluginStats::default(),
        });
        Ok(())
    }

    /// Output topics of in-band units that must never leave the node.
    pub fn mark_local(&self, topics: impl IntoIterator<Item = Topic>) {
        self.sink.mark_local(topics);
    }

    pub fn scheduler_mut(&mut self) -> &mut Scheduler {
        &mut self.scheduler
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn cache(&self) -> &Arc<SensorCache> {
        self.sink_cache()
    }

    fn sink_cache(&self) -> &Arc<SensorCache> {
        &self.sink.cache
    }

    pub fn health(&self) -> &HealthLog {
        &self.health
    }

    pub fn plugin_stats(&self) -> Vec<(String, PluginStats)> {
        self.slots
            .iter()
            .map(|s| (s.plugin.name().to_string(), s.stats))
            .collect()
    }

    pub fn publisher_stats(&self) -> PublisherStats {
        self.publisher.stats()
    }

    pub fn published(&self) -> u64 {
        self.published
    }

    /// Every declared sensor plus in-band outputs.
    pub fn inventory(&self) -> Vec<Topic> {
        let mut v: Vec<Topic> = self
            .slots
            .iter()
            .flat_map(|s| s.declared.iter().cloned())
            .collect();
        v.sort();
        v
    }

    /// First deadline of every plugin and unit one interval after `start`.
    pub fn arm(&mut self, start: u64) {
        for s in &mut self.slots {
            s.next_due = Some(start + s.plugin.interval_ms().max(1) * NS_PER_MS);
        }
        self.scheduler.arm(start);
    }

    /// Earliest pending plugin deadline.
    pub fn next_due(&self) -> Option<u64> {
        self.slots.iter().filter_map(|s| s.next_due).min()
    }

    /// Samples every due plugin, runs due in-band units and publishes.
    pub fn tick(&mut self, now: u64) {
        for slot in &mut self.slots {
            let interval = slot.plugin.interval_ms().max(1) * NS_PER_MS;
            let due = *slot.next_due.get_or_insert(now);
            if now < due {
                continue;
            }
            // no catch-up: one sample, missed deadlines are only counted
            let missed = (now - due) / interval;
            slot.stats.missed += missed;
            slot.next_due = Some(due + (missed + 1) * interval);
            slot.stats.ticks += 1;
            match slot.plugin.sample(now) {
                Ok(rs) => {
                    slot.stats.consecutive_failures = 0;
                    let (ok, bad): (Vec<Reading>, Vec<Reading>) = rs
                        .into_iter()
                        .partition(|r| slot.declared.contains(&r.topic));
                    slot.stats.undeclared += bad.len() as u64;
                    slot.stats.readings += ok.len() as u64;
                    self.sink.emit(&ok);
                }
                Err(e) => {
                    slot.stats.failures += 1;
                    slot.stats.consecutive_failures += 1;
                    log::warn!("{}: plugin {} failed: {e}", self.prefix, slot.plugin.name());
                    if slot.stats.consecutive_failures == self.failure_alert {
                        self.health.emit(HealthEvent {
                            timestamp: now,
                            source: slot.plugin.name().to_string(),
                            topic: Some(self.prefix.clone()),
                            message: format!(
                                "{} consecutive sampling failures: {e}",
                                self.failure_alert
                            ),
                        });
                    }
                }
            }
        }
        self.scheduler.run_due(now);
        self.flush();
    }

    /// Queues pending readings on the publisher and tries to deliver.
    pub fn flush(&mut self) {
        let q = self.sink.take_queue();
        self.published += q.len() as u64;
        if q.is_empty() {
            self.publisher.try_flush();
        } else {
            self.publisher.publish(&q);
        }
    }

    /// Wall-clock loop until `stop` is set.
    pub fn run(&mut self, clock: SharedClock, stop: Arc<AtomicBool>) {
        self.arm(clock.now_ns());
        while !stop.load(Ordering::Acquire) {
            let now = clock.now_ns();
            self.tick(now);
            let wake = self.next_due().unwrap_or(now + 100 * NS_PER_MS);
            let wait = wake.saturating_sub(clock.now_ns()) / 1_000;
            std::thread::sleep(Duration::from_micros(wait.clamp(1_000, 100_000)));
        }
        self.flush();
    }
}
