//! Time-series persistence and long-term sinks.

pub mod segment;
pub mod sink;
pub mod store;

pub use sink::{SinkDescriptor, SinkFormat, SinkRecord};
pub use store::{QueryRange, Store, StoreConfig, StoreError};
