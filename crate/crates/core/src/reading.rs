use serde::{Deserialize, Serialize};

use crate::topic::Topic;

/// Nanoseconds per second.
pub const NS_PER_S: u64 = 1_000_000_000;
/// Nanoseconds per millisecond.
pub const NS_PER_MS: u64 = 1_000_000;

/// One timestamped integer sample.
///
/// Values use a fixed per-sensor scale; temperatures are milli-degrees
/// Celsius, so `73000` is 73 °C.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reading {
    pub topic: Topic,
    pub timestamp: u64,
    pub value: i64,
}

impl Reading {
    pub fn new(topic: Topic, timestamp: u64, value: i64) -> Self {
        Reading {
            topic,
            timestamp,
            value,
        }
    }
}

/// Static description of a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMeta {
    pub topic: Topic,
    /// Sampling period in milliseconds.
    pub interval_ms: u64,
    /// Retention in seconds; zero keeps data forever.
    pub ttl_s: u64,
    /// Local-only sensors stay in the node's cache and never go on the wire.
    pub local_only: bool,
    pub unit: String,
}

impl SensorMeta {
    pub fn new(topic: Topic, interval_ms: u64) -> Self {
        SensorMeta {
            topic,
            interval_ms: interval_ms.max(1),
            ttl_s: 0,
            local_only: false,
            unit: String::new(),
        }
    }

    pub fn local_only(mut self, yes: bool) -> Self {
        self.local_only = yes;
        self
    }

    pub fn ttl(mut self, ttl_s: u64) -> Self {
        self.ttl_s = ttl_s;
        self
    }

    pub fn unit(mut self, unit: &str) -> Self {
        self.unit = unit.to_string();
        self
    }
}

/// Converts a physical quantity to its milli-unit integer encoding.
pub fn to_milli(x: f64) -> i64 {
    (x * 1000.0).round() as i64
}

pub fn from_milli(v: i64) -> f64 {
    v as f64 / 1000.0
}
