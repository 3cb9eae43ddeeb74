//! Operational data analytics pipeline: push-based telemetry, a
//! time-series store, an operator framework for in-band and out-of-band
//! analytics, per-job aggregation, and a predictive cooling controller
//! driving a simulated rack cooling unit.

pub mod agentd;
pub mod cache;
pub mod clock;
pub mod config;
pub mod jobsource;
pub mod odac;
pub mod odav;
pub mod operator;
pub mod plant;
pub mod pusher;
pub mod reading;
pub mod storage;
pub mod topic;
pub mod transport;

pub use cache::SensorCache;
pub use clock::{Clock, SharedClock, VirtualClock, WallClock};
pub use reading::{Reading, SensorMeta};
pub use topic::Topic;
