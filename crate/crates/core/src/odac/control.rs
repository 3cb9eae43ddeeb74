//! Predictive set-temperature control for a rack cooling unit.
//!
//! Each tick the controller counts the components whose predicted
//! temperature exceeds their hot threshold and moves the set temperature by
//! `(T_max - T_min) * (P_th - P_hot)`, clamped to `[T_min, T_max]`. Any
//! prediction at or above a component's critical threshold drops the set
//! temperature straight to `T_min`.

use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::config::{ConfigError, Node};
use crate::operator::loader::{BuildCtx, Built, Common, COMMON_KEYS};
use crate::operator::{OpContext, OpError, Operator, Placement};
use crate::reading::{from_milli, to_milli, Reading};
use crate::topic::Topic;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPolicy {
    pub p_th: f64,
    /// Degrees Celsius.
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("no predictions available")]
    NoPredictions,
    #[error("{0}")]
    Policy(String),
    #[error("set temperature {value} outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("knob endpoint: {0}")]
    Endpoint(String),
}

impl ControlPolicy {
    pub fn new(p_th: f64, t_min: f64, t_max: f64) -> Result<Self, ControlError> {
        if !(p_th > 0.0 && p_th < 1.0) {
            return Err(ControlError::Policy(format!(
                "P_th {p_th} must lie in (0, 1)"
            )));
        }
        if !(t_min > 0.0 && t_min < t_max) {
            return Err(ControlError::Policy(format!(
                "need 0 < T_min < T_max, got {t_min} and {t_max}"
            )));
        }
        Ok(ControlPolicy { p_th, t_min, t_max })
    }
}

/// One component's predicted temperature and thresholds, all milli-°C.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub value: i64,
    pub hot: i64,
    pub crit: i64,
}

/// Fraction of predictions strictly above their hot threshold.
pub fn hot_fraction(preds: &[Prediction]) -> f64 {
    preds.iter().filter(|p| p.value > p.hot).count() as f64 / preds.len() as f64
}

/// The control law. `t_rcu` is the last commanded set temperature (°C).
pub fn update_set_temperature(
    policy: &ControlPolicy,
    t_rcu: f64,
    preds: &[Prediction],
) -> Result<f64, ControlError> {
    if preds.is_empty() {
        return Err(ControlError::NoPredictions);
    }
    if preds.iter().any(|p| p.value >= p.crit) {
        return Ok(policy.t_min);
    }
    let p_hot = hot_fraction(preds);
    let next = t_rcu + (policy.t_max - policy.t_min) * (policy.p_th - p_hot);
    Ok(next.clamp(policy.t_min, policy.t_max))
}

/// Writes a set temperature (milli-°C) to a cooling unit.
pub trait Knob: Send {
    fn set(&mut self, rcu: &Topic, milli: i64) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnobWrite {
    pub timestamp: u64,
    pub old: f64,
    pub new: f64,
    pub ok: bool,
}

pub type KnobLog = Arc<Mutex<Vec<KnobWrite>>>;

/// Range-checks, then writes.
pub fn apply_knob(
    knob: &mut dyn Knob,
    policy: &ControlPolicy,
    rcu: &Topic,
    t: f64,
) -> Result<(), ControlError> {
    if !(policy.t_min..=policy.t_max).contains(&t) {
        return Err(ControlError::OutOfRange {
            value: t,
            min: policy.t_min,
            max: policy.t_max,
        });
    }
    knob.set(rcu, to_milli(t)).map_err(ControlError::Endpoint)
}

#[derive(Debug, Clone)]
pub struct ComponentInput {
    pub predicted: Topic,
    /// Measured temperature of the same component, if configured.
    pub actual: Option<Topic>,
    pub hot: i64,
    pub crit: i64,
}

pub struct CoolingControl {
    pub policy: ControlPolicy,
    components: Vec<ComponentInput>,
    rcu: Topic,
    knob: Box<dyn Knob>,
    current: Option<f64>,
    staleness_ns: u64,
    knob_failures: u32,
    last_tick: Option<u64>,
    log: KnobLog,
    cmd_topic: Topic,
    hot_topic: Topic,
}

/// Knob failures in a row that raise a health event.
pub const KNOB_ALERT: u32 = 3;

impl CoolingControl {
    pub fn new(
        policy: ControlPolicy,
        components: Vec<ComponentInput>,
        rcu: Topic,
        knob: Box<dyn Knob>,
        staleness_ns: u64,
        log: KnobLog,
    ) -> Result<Self, ControlError> {
        let cmd_topic = rcu
            .child("set-temp-cmd")
            .map_err(|e| ControlError::Policy(e.to_string()))?;
        let hot_topic = rcu
            .child("hot-fraction")
            .map_err(|e| ControlError::Policy(e.to_string()))?;
        Ok(CoolingControl {
            policy,
            components,
            rcu,
            knob,
            current: None,
            staleness_ns,
            knob_failures: 0,
            last_tick: None,
            log,
            cmd_topic,
            hot_topic,
        })
    }

    pub fn outputs(&self) -> Vec<Topic> {
        vec![self.cmd_topic.clone(), self.hot_topic.clone()]
    }

    pub fn inputs(&self) -> Vec<Topic> {
        let mut v: Vec<Topic> = self
            .components
            .iter()
            .flat_map(|c| std::iter::once(c.predicted.clone()).chain(c.actual.clone()))
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Starts from a known set temperature instead of reading the plant.
    pub fn set_current(&mut self, t: f64) {
        self.current = Some(t.clamp(self.policy.t_min, self.policy.t_max));
    }
}

impl Operator for CoolingControl {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        let now = ctx.now;
        let fresh = |ts: u64| ts + self.staleness_ns >= now;
        let current = *self.current.get_or_insert_with(|| {
            let reported = self
                .rcu
                .child("set-temp")
                .ok()
                .and_then(|t| ctx.view.latest(&t))
                .map(|r| from_milli(r.1));
            reported
                .unwrap_or(self.policy.t_max)
                .clamp(self.policy.t_min, self.policy.t_max)
        });
        // measured temperatures are checked over everything since the last tick
        let since = self
            .last_tick
            .map_or(now.saturating_sub(self.staleness_ns), |t| t + 1);
        self.last_tick = Some(now);
        let mut preds = Vec::with_capacity(self.components.len());
        let mut measured_crit = None;
        for c in &self.components {
            if let Some((ts, v)) = ctx.view.latest_at(&c.predicted, now) {
                if fresh(ts) {
                    preds.push(Prediction {
                        value: v,
                        hot: c.hot,
                        crit: c.crit,
                    });
                }
            }
            if let Some(a) = &c.actual {
                let peak = ctx
                    .view
                    .window(a, since, now)
                    .into_iter()
                    .map(|r| r.1)
                    .max();
                if let Some(v) = peak.filter(|&v| v >= c.crit) {
                    measured_crit.get_or_insert((a.clone(), v));
                }
            }
        }
        let next = match update_set_temperature(&self.policy, current, &preds) {
            Ok(t) => t,
            Err(ControlError::NoPredictions) if measured_crit.is_none() => {
                ctx.event(
                    Some(self.rcu.clone()),
                    "no fresh predictions; set temperature unchanged",
                );
                return Ok(Vec::new());
            }
            Err(ControlError::NoPredictions) => self.policy.t_min,
            Err(e) => return Err(OpError::Failed(e.to_string())),
        };
        // a measured critical temperature overrides whatever was predicted
        let next = if measured_crit.is_some() {
            self.policy.t_min
        } else {
            next
        };
        let ok = match apply_knob(&mut *self.knob, &self.policy, &self.rcu, next) {
            Ok(()) => {
                self.knob_failures = 0;
                self.current = Some(next);
                true
            }
            Err(e) => {
                self.knob_failures += 1;
                log::warn!("{}: knob write failed: {e}", ctx.unit);
                if self.knob_failures == KNOB_ALERT {
                    ctx.event(
                        Some(self.rcu.clone()),
                        format!("{KNOB_ALERT} knob writes failed: {e}"),
                    );
                }
                false
            }
        };
        self.log.lock().push(KnobWrite {
            timestamp: now,
            old: current,
            new: next,
            ok,
        });
        let p_hot = if preds.is_empty() {
            0.0
        } else {
            hot_fraction(&preds)
        };
        Ok(vec![
            Reading::new(self.cmd_topic.clone(), now, to_milli(next)),
            Reading::new(self.hot_topic.clone(), now, to_milli(p_hot)),
        ])
    }
}

/// Builds a controller from a block such as
///
/// ```text
/// controller c1 {
///   default def1
///   input {
///     sensor "<topdown 3, filter cm/s../socket>temp-p" {
///       hotThreshold  73000
///       critThreshold 93000
///     }
///   }
/// }
/// ```
///
/// with `pTh`, `tMin`, `tMax`, `rcu` and optionally `actual` (the measured
/// sibling of each predicted sensor) usually supplied by the template.
pub fn build(
    node: &Node,
    ctx: &BuildCtx,
    knob: &dyn Fn(&Topic) -> Box<dyn Knob>,
    log: &KnobLog,
) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.extend(["input", "pTh", "tMin", "tMax", "rcu", "actual", "staleness"]);
    node.check_keys(&keys)?;
    let c = Common::from_node(node, 60_000, Placement::OutOfBand)?;
    let policy = ControlPolicy::new(
        node.float("pTh")?.unwrap_or(0.2),
        node.float("tMin")?.unwrap_or(35.0),
        node.float("tMax")?.unwrap_or(45.0),
    )
    .map_err(|e| ConfigError::at(node, e.to_string()))?;
    let rcu = Topic::parse(&node.req_text("rcu")?)
        .map_err(|e| ConfigError::at(node, format!("rcu: {e}")))?;
    let actual = node.text("actual")?;
    let input = node
        .get("input")
        .ok_or_else(|| ConfigError::at(node, "controller block needs input"))?;
    input.check_keys(&["sensor"])?;
    let mut comps = Vec::new();
    for (topic, s) in ctx.resolve_sensors(input)? {
        s.check_keys(&["hotThreshold", "critThreshold"])?;
        let hot = s.req_int("hotThreshold")?;
        let crit = s.req_int("critThreshold")?;
        if hot >= crit || hot <= 0 {
            return Err(ConfigError::at(s, "need 0 < hotThreshold < critThreshold"));
        }
        let actual = match &actual {
            Some(name) => Some(
                topic
                    .parent()
                    .and_then(|p| p.child(name).ok())
                    .ok_or_else(|| ConfigError::at(node, format!("actual sensor {name:?}")))?,
            ),
            None => None,
        };
        comps.push(ComponentInput {
            predicted: topic,
            actual,
            hot,
            crit,
        });
    }
    let staleness_ms = node
        .int("staleness")?
        .map_or(2 * c.interval_ms, |v| v.max(1) as u64);
    let op = CoolingControl::new(
        policy,
        comps,
        rcu.clone(),
        knob(&rcu),
        staleness_ms * 1_000_000,
        log.clone(),
    )
    .map_err(|e| ConfigError::at(node, e.to_string()))?;
    Ok(vec![Built {
        spec: c.spec(op.inputs(), op.outputs()),
        op: Box::new(op),
        allow_empty: c.allow_empty,
    }])
}
