//! Visualization-side analytics: derived metrics, job aggregation and
//! smoothing.

pub mod derive;
pub mod jobs;
pub mod smooth;
pub mod stats;

pub use derive::{derive_metric, DerivedMetricSpec, MetricExpr};
pub use jobs::{aggregate_job, assign_job_owner, JobAggregate, JobRecord};
pub use smooth::smooth_series;
pub use stats::{deciles, severity, Direction, SeveritySpec};
