//! Operational data analytics for control: signature extraction, a
//! temperature regressor, the cooling controller and health checks.

pub mod control;
pub mod cs;
pub mod forest;
pub mod health;
pub mod nrmse;
pub mod ops;

pub use control::{
    apply_knob, hot_fraction, update_set_temperature, ControlError, ControlPolicy, CoolingControl,
    Knob, KnobLog, KnobWrite, Prediction,
};
pub use cs::{cs_train, CsError, CsModel, CsSignature};
pub use forest::{forest_train, ForestError, ForestModel, ForestParams};
pub use health::{Action, Condition, HealthChecker, HealthRule};
pub use nrmse::{nrmse, nrmse_by_band, BandError};
pub use ops::{bind_roles, RegressorOp, SignatureOp, SIG_SCALE};
