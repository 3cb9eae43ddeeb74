//! Periodic analytics units hosted by pushers (in-band) and collect agents
//! (out-of-band).
//!
//! An [`OperatorUnit`] wraps an [`Operator`] body together with its
//! resolved input and output topics and an interval. A [`Scheduler`] owns
//! a set of units and invokes the due ones, either from a driver loop in
//! virtual time ([`Scheduler::run_due`]) or from one thread per unit in
//! wall-clock mode ([`Scheduler::spawn`]).
//!
//! Ticks never stack: a unit that falls behind runs once and counts the
//! ticks it skipped.

pub mod control;
pub mod expr;
pub mod loader;

use std::collections::{BTreeSet, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::cache::SensorCache;
use crate::clock::SharedClock;
use crate::reading::{Reading, NS_PER_MS};
use crate::storage::Store;
use crate::topic::Topic;
use crate::transport::Agent;

pub use control::ControlServer;
pub use expr::{ExprError, Selector, SensorExpression};
pub use loader::{load_units, BuildCtx, PluginRegistry};

/// Consecutive body failures that raise a health event.
pub const FAILURE_ALERT: u32 = 3;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("{0}")]
    Failed(String),
    #[error("missing input data: {0}")]
    NoData(String),
    #[error("{0} is not supported by this unit")]
    Unsupported(&'static str),
    #[error("output {0} is not declared by the unit")]
    UndeclaredOutput(Topic),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    InBand,
    OutOfBand,
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in-band" | "inband" => Ok(Placement::InBand),
            "out-of-band" | "outofband" => Ok(Placement::OutOfBand),
            other => Err(format!(
                "unknown placement {other:?} (expected in-band or out-of-band)"
            )),
        }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Placement::InBand => "in-band",
            Placement::OutOfBand => "out-of-band",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthEvent {
    pub timestamp: u64,
    pub source: String,
    pub topic: Option<Topic>,
    pub message: String,
}

/// Append-only, shareable event log.
#[derive(Debug, Clone, Default)]
pub struct HealthLog {
    events: Arc<Mutex<Vec<HealthEvent>>>,
}

impl HealthLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(&self, ev: HealthEvent) {
        log::warn!(
            "health [{}] {}{}",
            ev.source,
            ev.topic
                .as_ref()
                .map(|t| format!("{t}: "))
                .unwrap_or_default(),
            ev.message
        );
        self.events.lock().push(ev);
    }

    pub fn events(&self) -> Vec<HealthEvent> {
        self.events.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read access to recent data. Out-of-band views fall back to the store
/// for whatever the cache no longer holds.
#[derive(Clone)]
pub struct DataView {
    cache: Arc<SensorCache>,
    store: Option<Arc<Store>>,
}

impl DataView {
    pub fn new(cache: Arc<SensorCache>, store: Option<Arc<Store>>) -> Self {
        DataView { cache, store }
    }

    pub fn cache(&self) -> &Arc<SensorCache> {
        &self.cache
    }

    fn cache_only(&self) -> DataView {
        DataView {
            cache: self.cache.clone(),
            store: None,
        }
    }

    /// Readings of `topic` with `from <= t <= to`, ascending.
    pub fn window(&self, topic: &Topic, from: u64, to: u64) -> Vec<(u64, i64)> {
        let cached = self.cache.window_values(topic, from, to);
        let Some(store) = &self.store else {
            return cached;
        };
        let seam = self.cache.oldest(topic).unwrap_or(u64::MAX);
        if from >= seam {
            return cached;
        }
        let mut out = store.query_topic(topic, from, to.min(seam.saturating_sub(1)));
        out.extend(cached);
        out
    }

    pub fn latest(&self, topic: &Topic) -> Option<(u64, i64)> {
        self.cache.latest(topic).or_else(|| {
            self.store
                .as_ref()
                .and_then(|s| s.query_topic(topic, 0, u64::MAX).last().copied())
        })
    }

    /// The latest reading no newer than `at`.
    pub fn latest_at(&self, topic: &Topic, at: u64) -> Option<(u64, i64)> {
        match self.cache.latest(topic) {
            Some(l) if l.0 <= at => Some(l),
            _ => self.window(topic, 0, at).last().copied(),
        }
    }

    /// Up to `n` most recent readings no newer than `at`, ascending.
    pub fn last_n(&self, topic: &Topic, n: usize, at: u64) -> Vec<(u64, i64)> {
        let cached: Vec<_> = self
            .cache
            .last_n(topic, n + 8)
            .into_iter()
            .filter(|r| r.0 <= at)
            .collect();
        let mut v = if cached.len() >= n || self.store.is_none() {
            cached
        } else {
            self.window(topic, 0, at)
        };
        if v.len() > n {
            v.drain(..v.len() - n);
        }
        v
    }

    pub fn topics(&self) -> Vec<Topic> {
        let mut set: BTreeSet<Topic> = self.cache.topics().into_iter().collect();
        if let Some(s) = &self.store {
            set.extend(s.topics());
        }
        set.into_iter().collect()
    }
}

/// Where unit outputs go.
pub trait ReadingSink: Send + Sync {
    fn emit(&self, readings: &[Reading]);
}

impl ReadingSink for SensorCache {
    fn emit(&self, readings: &[Reading]) {
        for r in readings {
            self.insert(r);
        }
    }
}

impl ReadingSink for Agent {
    fn emit(&self, readings: &[Reading]) {
        if let Err(e) = self.route(readings) {
            log::error!("routing operator output failed: {e}");
        }
    }
}

pub struct OpContext<'a> {
    pub now: u64,
    pub unit: &'a str,
    pub inputs: &'a [Topic],
    pub outputs: &'a [Topic],
    pub view: &'a DataView,
    pub health: &'a HealthLog,
}

impl OpContext<'_> {
    pub fn event(&self, topic: Option<Topic>, message: impl Into<String>) {
        self.health.emit(HealthEvent {
            timestamp: self.now,
            source: self.unit.to_string(),
            topic,
            message: message.into(),
        });
    }
}

pub trait Operator: Send {
    /// One periodic invocation. Returned readings must use declared
    /// output topics.
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError>;

    /// Retrains from recent data; returns a short summary.
    fn train(&mut self, _ctx: &OpContext<'_>) -> Result<String, OpError> {
        Err(OpError::Unsupported("retrain"))
    }
}

#[derive(Debug, Clone)]
pub struct UnitSpec {
    pub name: String,
    pub inputs: Vec<Topic>,
    pub outputs: Vec<Topic>,
    pub interval_ms: u64,
    pub placement: Placement,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnitStatus {
    pub runs: u64,
    pub last_run: u64,
    pub consecutive_failures: u32,
    pub failures: u64,
    pub skipped: u64,
    pub paused: bool,
}

pub struct OperatorUnit {
    pub spec: UnitSpec,
    op: Mutex<Box<dyn Operator>>,
    status: Mutex<UnitStatus>,
    next_due: Mutex<Option<u64>>,
    outputs: HashSet<Topic>,
}

impl OperatorUnit {
    pub fn new(spec: UnitSpec, op: Box<dyn Operator>) -> Self {
        let outputs = spec.outputs.iter().cloned().collect();
        OperatorUnit {
            spec,
            op: Mutex::new(op),
            status: Mutex::new(UnitStatus::default()),
            next_due: Mutex::new(None),
            outputs,
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn status(&self) -> UnitStatus {
        self.status.lock().clone()
    }

    pub fn set_paused(&self, paused: bool) {
        self.status.lock().paused = paused;
    }

    fn interval_ns(&self) -> u64 {
        self.spec.interval_ms.max(1) * NS_PER_MS
    }

    /// Runs the body once now, regardless of schedule.
    fn invoke(&self, now: u64, view: &DataView, sink: &dyn ReadingSink, health: &HealthLog) {
        let res = {
            let mut op = self.op.lock();
            let ctx = OpContext {
                now,
                unit: &self.spec.name,
                inputs: &self.spec.inputs,
                outputs: &self.spec.outputs,
                view,
                health,
            };
            op.compute(&ctx).and_then(|rs| {
                match rs.iter().find(|r| !self.outputs.contains(&r.topic)) {
                    Some(bad) => Err(OpError::UndeclaredOutput(bad.topic.clone())),
                    None => Ok(rs),
                }
            })
        };
        let mut st = self.status.lock();
        st.runs += 1;
        st.last_run = now;
        match res {
            Ok(rs) => {
                st.consecutive_failures = 0;
                drop(st);
                if !rs.is_empty() {
                    sink.emit(&rs);
                }
            }
            Err(e) => {
                st.failures += 1;
                st.consecutive_failures += 1;
                let n = st.consecutive_failures;
                drop(st);
                log::warn!("unit {} failed: {e}", self.spec.name);
                if n == FAILURE_ALERT {
                    health.emit(HealthEvent {
                        timestamp: now,
                        source: self.spec.name.clone(),
                        topic: None,
                        message: format!("{n} consecutive failures, last: {e}"),
                    });
                }
            }
        }
    }

    /// Runs the unit if due at `now`. Returns whether the body ran.
    fn run_if_due(
        &self,
        now: u64,
        view: &DataView,
        sink: &dyn ReadingSink,
        health: &HealthLog,
    ) -> bool {
        let interval = self.interval_ns();
        {
            let mut nd = self.next_due.lock();
            let due = *nd.get_or_insert(now + interval);
            if now < due {
                return false;
            }
            let missed = (now - due) / interval;
            *nd = Some(due + (missed + 1) * interval);
            if missed > 0 {
                self.status.lock().skipped += missed;
            }
        }
        if self.status.lock().paused {
            return false;
        }
        // a busy body means the previous tick is still running
        if self.op.is_locked() {
            self.status.lock().skipped += 1;
            return false;
        }
        self.invoke(now, view, sink, health);
        true
    }

    /// Sets the first deadline to one interval after `start`.
    pub fn arm(&self, start: u64) {
        *self.next_due.lock() = Some(start + self.interval_ns());
    }
}

pub struct Scheduler {
    units: Vec<Arc<OperatorUnit>>,
    view: DataView,
    sink: Arc<dyn ReadingSink>,
    health: HealthLog,
}

impl Scheduler {
    pub fn new(view: DataView, sink: Arc<dyn ReadingSink>, health: HealthLog) -> Self {
        Scheduler {
            units: Vec::new(),
            view,
            sink,
            health,
        }
    }

    pub fn add(&mut self, unit: OperatorUnit) -> Arc<OperatorUnit> {
        let u = Arc::new(unit);
        self.units.push(u.clone());
        u
    }

    pub fn extend(&mut self, units: Vec<OperatorUnit>) {
        for u in units {
            self.add(u);
        }
    }

    pub fn units(&self) -> &[Arc<OperatorUnit>] {
        &self.units
    }

    pub fn unit(&self, name: &str) -> Option<&Arc<OperatorUnit>> {
        self.units.iter().find(|u| u.spec.name == name)
    }

    pub fn health(&self) -> &HealthLog {
        &self.health
    }

    fn view_for(&self, p: Placement) -> DataView {
        match p {
            Placement::InBand => self.view.cache_only(),
            Placement::OutOfBand => self.view.clone(),
        }
    }

    /// Arms every unit so its first run happens one interval after `start`.
    pub fn arm(&self, start: u64) {
        for u in &self.units {
            u.arm(start);
        }
    }

    /// Runs every unit whose deadline has passed, in registration order.
    pub fn run_due(&self, now: u64) -> usize {
        let mut ran = 0;
        for u in &self.units {
            let view = self.view_for(u.spec.placement);
            if u.run_if_due(now, &view, &*self.sink, &self.health) {
                ran += 1;
            }
        }
        ran
    }

    /// Invokes a unit's train hook.
    pub fn retrain(&self, name: &str, now: u64) -> Result<String, String> {
        let u = self
            .unit(name)
            .ok_or_else(|| format!("unknown unit {name:?}"))?;
        let view = self.view_for(u.spec.placement);
        let mut op = u.op.lock();
        let ctx = OpContext {
            now,
            unit: &u.spec.name,
            inputs: &u.spec.inputs,
            outputs: &u.spec.outputs,
            view: &view,
            health: &self.health,
        };
        op.train(&ctx).map_err(|e| e.to_string())
    }

    /// Wall-clock mode: one thread per unit until the handle is stopped.
    pub fn spawn(self: &Arc<Self>, clock: SharedClock) -> SchedulerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let start = clock.now_ns();
        self.arm(start);
        let threads = (0..self.units.len())
            .map(|i| {
                let me = self.clone();
                let stop = stop.clone();
                let clock = clock.clone();
                std::thread::spawn(move || {
                    let u = &me.units[i];
                    let view = me.view_for(u.spec.placement);
                    while !stop.load(Ordering::Acquire) {
                        let now = clock.now_ns();
                        u.run_if_due(now, &view, &*me.sink, &me.health);
                        let due = u.next_due.lock().unwrap_or(now);
                        let wait = due.saturating_sub(clock.now_ns()) / 1_000;
                        std::thread::sleep(Duration::from_micros(wait.clamp(1_000, 100_000)));
                    }
                })
            })
            .collect();
        SchedulerHandle { stop, threads }
    }
}

pub struct SchedulerHandle {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl SchedulerHandle {
    pub fn stop(self) {
        self.stop.store(true, Ordering::Release);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::reading::NS_PER_S;
    use crate::storage::StoreConfig;

    struct Counter {
        out: Topic,
        calls: Arc<Mutex<Vec<u64>>>,
        fail: bool,
    }

    impl Operator for Counter {
        fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
            self.calls.lock().push(ctx.now);
            if self.fail {
                return Err(OpError::Failed("boom".into()));
            }
            Ok(vec![Reading::new(self.out.clone(), ctx.now, 1)])
        }
    }

    fn spec(name: &str, interval_ms: u64, out: &Topic) -> UnitSpec {
        UnitSpec {
            name: name.into(),
            inputs: vec![Topic::parse("/a/in").unwrap()],
            outputs: vec![out.clone()],
            interval_ms,
            placement: Placement::OutOfBand,
        }
    }

    fn sched(cache: &Arc<SensorCache>) -> Scheduler {
        Scheduler::new(
            DataView::new(cache.clone(), None),
            cache.clone(),
            HealthLog::new(),
        )
    }

    #[test]
    fn sixty_second_unit_runs_ten_times_in_ten_minutes() {
        let cache = Arc::new(SensorCache::new());
        let out = Topic::parse("/a/out").unwrap();
        let calls = Arc::new(Mutex::new(Vec::new()));
        let mut s = sched(&cache);
        s.add(OperatorUnit::new(
            spec("u", 60_000, &out),
            Box::new(Counter {
                out: out.clone(),
                calls: calls.clone(),
                fail: false,
            }),
        ));
        let t0 = NS_PER_S;
        s.arm(t0);
        for sec in 0..=600 {
            s.run_due(t0 + sec * NS_PER_S);
        }
        assert_eq!(calls.lock().len(), 10);
        assert_eq!(cache.window(&out, 0, u64::MAX).len(), 10);
    }

    #[test]
    fn late_driver_skips_instead_of_catching_up() {
        let cache = Arc::new(SensorCache::new());
        let out = Topic::parse("/a/out").unwrap();
        let calls = Arc::new(Mutex::new(Vec::new()));
        let mut s = sched(&cache);
        let u = s.add(OperatorUnit::new(
            spec("u", 10_000, &out),
            Box::new(Counter {
                out,
                calls: calls.clone(),
                fail: false,
            }),
        ));
        s.arm(0);
        s.run_due(45 * NS_PER_S);
        assert_eq!(calls.lock().len(), 1);
        assert_eq!(u.status().skipped, 3);
        s.run_due(49 * NS_PER_S);
        assert_eq!(calls.lock().len(), 1);
        s.run_due(50 * NS_PER_S);
        assert_eq!(calls.lock().len(), 2);
    }

    #[test]
    fn three_failures_raise_one_health_event() {
        let cache = Arc::new(SensorCache::new());
        let out = Topic::parse("/a/out").unwrap();
        let mut s = sched(&cache);
        let u = s.add(OperatorUnit::new(
            spec("bad", 1_000, &out),
            Box::new(Counter {
                out,
                calls: Default::default(),
                fail: true,
            }),
        ));
        s.arm(0);
        for sec in 1..=2 {
            s.run_due(sec * NS_PER_S);
        }
        assert!(s.health().is_empty());
        s.run_due(3 * NS_PER_S);
        assert_eq!(s.health().len(), 1);
        s.run_due(4 * NS_PER_S);
        assert_eq!(s.health().len(), 1);
        assert_eq!(u.status().failures, 4);
    }

    #[test]
    fn pause_and_resume() {
        let cache = Arc::new(SensorCache::new());
        let out = Topic::parse("/a/out").unwrap();
        let calls = Arc::new(Mutex::new(Vec::new()));
        let mut s = sched(&cache);
        let u = s.add(OperatorUnit::new(
            spec("u", 1_000, &out),
            Box::new(Counter {
                out,
                calls: calls.clone(),
                fail: false,
            }),
        ));
        s.arm(0);
        u.set_paused(true);
        for sec in 1..=5 {
            s.run_due(sec * NS_PER_S);
        }
        assert!(calls.lock().is_empty());
        u.set_paused(false);
        s.run_due(6 * NS_PER_S);
        assert_eq!(calls.lock().len(), 1);
    }

    #[test]
    fn undeclared_output_is_a_failure() {
        let cache = Arc::new(SensorCache::new());
        let out = Topic::parse("/a/out").unwrap();
        let mut s = sched(&cache);
        let mut sp = spec("u", 1_000, &out);
        sp.outputs = vec![Topic::parse("/a/other").unwrap()];
        let u = s.add(OperatorUnit::new(
            sp,
            Box::new(Counter {
                out: out.clone(),
                calls: Default::default(),
                fail: false,
            }),
        ));
        s.arm(0);
        s.run_due(NS_PER_S);
        assert_eq!(u.status().failures, 1);
        assert!(cache.latest(&out).is_none());
    }

    #[test]
    fn out_of_band_view_reads_through_to_store() {
        let dir = tempfile::tempdir().unwrap();
        let clock = VirtualClock::new(NS_PER_S);
        let store = Arc::new(Store::open(StoreConfig::new(dir.path()), Arc::new(clock)).unwrap());
        let cache = Arc::new(SensorCache::new());
        let t = Topic::parse("/a/in").unwrap();
        let all: Vec<Reading> = (1..=200u64)
            .map(|i| Reading::new(t.clone(), i, i as i64))
            .collect();
        store.insert_batch(&all).unwrap();
        for r in &all {
            cache.insert(r);
        }
        // the ring only retains the newest 64
        assert_eq!(cache.oldest(&t), Some(137));
        let oob = DataView::new(cache.clone(), Some(store));
        let w = oob.window(&t, 1, 200);
        assert_eq!(w.len(), 200);
        assert!(w.windows(2).all(|p| p[0].0 < p[1].0));
        assert_eq!(oob.last_n(&t, 100, 200).len(), 100);
        let inband = oob.cache_only();
        assert_eq!(inband.window(&t, 1, 200).len(), 64);
    }
}
