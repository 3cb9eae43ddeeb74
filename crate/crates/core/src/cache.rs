//! Recent-readings cache shared by pushers, collect agents and operators.
//!
//! Each topic owns a ring of the newest readings plus a watermark (the
//! newest accepted timestamp). Inserts at or below the watermark are
//! dropped and counted. Distinct topics lock independently, so writers to
//! different topics never contend beyond the brief map lookup.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::reading::Reading;
use crate::topic::Topic;

pub const MIN_CAPACITY: usize = 64;

#[derive(Debug)]
struct Ring {
    buf: VecDeque<(u64, i64)>,
    cap: usize,
    watermark: u64,
}

impl Ring {
    fn new(cap: usize) -> Self {
        Ring {
            buf: VecDeque::with_capacity(cap.min(1024)),
            cap,
            watermark: 0,
        }
    }

    fn push(&mut self, ts: u64, v: i64) -> bool {
        if ts <= self.watermark {
            return false;
        }
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back((ts, v));
        self.watermark = ts;
        true
    }

    fn window(&self, from: u64, to: u64) -> impl Iterator<Item = &(u64, i64)> {
        let start = self.buf.partition_point(|&(t, _)| t < from);
        self.buf.range(start..).take_while(move |&&(t, _)| t <= to)
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub accepted: u64,
    pub dropped: u64,
}

#[derive(Debug, Default)]
pub struct SensorCache {
    rings: RwLock<HashMap<Topic, Arc<RwLock<Ring>>>>,
    capacity: RwLock<HashMap<Topic, usize>>,
    accepted: AtomicU64,
    dropped: AtomicU64,
}

impl SensorCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares that an operator needs `samples` readings of `topic`; the
    /// ring is sized to at least twice that (and never below 64).
    pub fn register_window(&self, topic: &Topic, samples: usize) {
        let cap = MIN_CAPACITY.max(2 * samples);
        let mut caps = self.capacity.write();
        let entry = caps.entry(topic.clone()).or_insert(MIN_CAPACITY);
        if cap > *entry {
            *entry = cap;
            if let Some(ring) = self.rings.read().get(topic) {
                ring.write().cap = cap;
            }
        }
    }

    pub fn capacity_of(&self, topic: &Topic) -> usize {
        self.capacity
            .read()
            .get(topic)
            .copied()
            .unwrap_or(MIN_CAPACITY)
    }

    fn ring(&self, topic: &Topic) -> Arc<RwLock<Ring>> {
        if let Some(r) = self.rings.read().get(topic) {
            return r.clone();
        }
        let cap = self.capacity_of(topic);
        self.rings
            .write()
            .entry(topic.clone())
            .or_insert_with(|| Arc::new(RwLock::new(Ring::new(cap))))
            .clone()
    }

    /// Inserts a reading. Returns `false` when it is stale (timestamp at or
    /// below the topic's watermark); stale readings are counted and dropped.
    pub fn insert(&self, reading: &Reading) -> bool {
        self.insert_raw(&reading.topic, reading.timestamp, reading.value)
    }

    pub fn insert_raw(&self, topic: &Topic, ts: u64, value: i64) -> bool {
        let ring = self.ring(topic);
        let ok = ring.write().push(ts, value);
        if ok {
            self.accepted.fetch_add(1, Ordering::Relaxed);
        } else {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        ok
    }

    /// All cached readings with `from <= t <= to`, ascending. Unknown
    /// topics give an empty list.
    pub fn window(&self, topic: &Topic, from: u64, to: u64) -> Vec<Reading> {
        self.window_values(topic, from, to)
            .into_iter()
            .map(|(t, v)| Reading::new(topic.clone(), t, v))
            .collect()
    }

    pub fn window_values(&self, topic: &Topic, from: u64, to: u64) -> Vec<(u64, i64)> {
        if from > to {
            return Vec::new();
        }
        let Some(ring) = self.rings.read().get(topic).cloned() else {
            return Vec::new();
        };
        let guard = ring.read();
        guard.window(from, to).copied().collect()
    }

    /// The newest `n` readings, ascending.
    pub fn last_n(&self, topic: &Topic, n: usize) -> Vec<(u64, i64)> {
        let Some(ring) = self.rings.read().get(topic).cloned() else {
            return Vec::new();
        };
        let guard = ring.read();
        let skip = guard.buf.len().saturating_sub(n);
        guard.buf.iter().skip(skip).copied().collect()
    }

    pub fn latest(&self, topic: &Topic) -> Option<(u64, i64)> {
        let ring = self.rings.read().get(topic).cloned()?;
        let guard = ring.read();
        guard.buf.back().copied()
    }

    /// Oldest retained timestamp for a topic.
    pub fn oldest(&self, topic: &Topic) -> Option<u64> {
        let ring = self.rings.read().get(topic).cloned()?;
        let guard = ring.read();
        guard.buf.front().map(|r| r.0)
    }

    pub fn watermark(&self, topic: &Topic) -> u64 {
        self.rings
            .read()
            .get(topic)
            .map(|r| r.read().watermark)
            .unwrap_or(0)
    }

    /// Sorted list of every topic that has ever received a reading.
    pub fn topics(&self) -> Vec<Topic> {
        let mut v: Vec<Topic> = self.rings.read().keys().cloned().collect();
        v.sort();
        v
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            accepted: self.accepted.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Topic {
        Topic::parse(s).unwrap()
    }

    #[test]
    fn monotone_inserts() {
        let c = SensorCache::new();
        let a = t("/x/a");
        assert!(c.insert_raw(&a, 100, 1));
        assert!(c.insert_raw(&a, 200, 2));
        assert!(!c.insert_raw(&a, 150, 3));
        assert!(!c.insert_raw(&a, 200, 4));
        assert_eq!(
            c.stats(),
            CacheStats {
                accepted: 2,
                dropped: 2
            }
        );
        assert_eq!(c.latest(&a), Some((200, 2)));
    }

    #[test]
    fn zero_timestamp_is_rejected() {
        let c = SensorCache::new();
        assert!(!c.insert_raw(&t("/x/a"), 0, 1));
    }

    #[test]
    fn ring_evicts_oldest() {
        let c = SensorCache::new();
        let a = t("/x/a");
        for i in 1..=65u64 {
            c.insert_raw(&a, i, i as i64);
        }
        let all = c.window_values(&a, 0, u64::MAX);
        let expected: Vec<(u64, i64)> = (2..=65u64).map(|i| (i, i as i64)).collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn window_bounds_inclusive() {
        let c = SensorCache::new();
        let a = t("/x/a");
        for ts in [3, 5, 7] {
            c.insert_raw(&a, ts, ts as i64 * 10);
        }
        assert_eq!(c.window(&a, 0, 100).len(), 3);
        assert_eq!(c.window_values(&a, 5, 5), vec![(5, 50)]);
        assert!(c.window(&t("/x/none"), 0, 10).is_empty());
        assert!(c.window(&a, 10, 5).is_empty());
    }

    #[test]
    fn registered_window_grows_ring() {
        let c = SensorCache::new();
        let a = t("/x/a");
        c.insert_raw(&a, 1, 0);
        c.register_window(&a, 100);
        assert_eq!(c.capacity_of(&a), 200);
        for i in 2..=300u64 {
            c.insert_raw(&a, i, 0);
        }
        assert_eq!(c.window(&a, 0, u64::MAX).len(), 200);
        assert_eq!(c.oldest(&a), Some(101));
    }

    #[test]
    fn concurrent_writers_distinct_topics() {
        let c = Arc::new(SensorCache::new());
        let handles: Vec<_> = (0..4)
            .map(|k| {
                let c = c.clone();
                std::thread::spawn(move || {
                    let topic = t(&format!("/x/t{k}"));
                    for i in 1..=1000u64 {
                        c.insert_raw(&topic, i, k);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.topics().len(), 4);
        assert_eq!(c.stats().accepted, 4000);
    }

    proptest! {
        // The cache must equal the harness's full history filtered to the
        // monotone-accepted subsequence and truncated to capacity.
        #[test]
        fn window_matches_history(ts in prop::collection::vec(1u64..500, 0..300), from in 0u64..500, len in 0u64..500) {
            let c = SensorCache::new();
            let a = t("/x/a");
            let mut history = Vec::new();
            let mut wm = 0;
            for (i, &x) in ts.iter().enumerate() {
                let accepted = c.insert_raw(&a, x, i as i64);
                prop_assert_eq!(accepted, x > wm);
                if x > wm {
                    wm = x;
                    history.push((x, i as i64));
                }
            }
            let keep = history.len().saturating_sub(MIN_CAPACITY);
            let to = from.saturating_add(len);
            let expected: Vec<_> = history[keep..].iter().copied().filter(|r| r.0 >= from && r.0 <= to).collect();
            prop_assert_eq!(c.window_values(&a, from, to), expected);
        }
    }
}
