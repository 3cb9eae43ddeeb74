//! Coarse smoothing aggregates (`<sensor>.avg5m`, `.min5m`, `.max5m`, ...).
//! Outputs are kept forever: their store TTL is pinned to 0.

use std::sync::Arc;

use crate::config::{ConfigError, Node};
use crate::odav::stats::mean_round;
use crate::operator::loader::{BuildCtx, Built, Common, COMMON_KEYS};
use crate::operator::{DataView, OpContext, OpError, Operator, Placement};
use crate::reading::{Reading, NS_PER_S};
use crate::storage::Store;
use crate::topic::Topic;
use crate::transport::SubscriptionPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Smoothed {
    pub avg: i64,
    pub min: i64,
    pub max: i64,
}

/// Aggregates readings in `(end - window, end]`. `None` when empty.
pub fn smooth_series(view: &DataView, topic: &Topic, end: u64, window_ns: u64) -> Option<Smoothed> {
    let from = end.saturating_sub(window_ns).saturating_add(1);
    let vals: Vec<i64> = view
        .window(topic, from, end)
        .into_iter()
        .map(|r| r.1)
        .collect();
    Some(Smoothed {
        avg: mean_round(&vals)?,
        min: *vals.iter().min()?,
        max: *vals.iter().max()?,
    })
}

/// `5m`, `60m`, `1h`, `30s` → seconds.
pub fn parse_span(s: &str) -> Option<u64> {
    let (num, unit) = s.split_at(s.find(|c: char| !c.is_ascii_digit())?);
    let n: u64 = num.parse().ok()?;
    let mul = match unit {
        "s" => 1,
        "m" => 60,
        "h" => 3600,
        _ => return None,
    };
    (n > 0).then_some(n * mul)
}

pub fn output_topics(topic: &Topic, label: &str) -> Option<[Topic; 3]> {
    let parent = topic.parent()?;
    let name = topic.name();
    let mk = |kind: &str| parent.child(&format!("{name}.{kind}{label}")).ok();
    Some([mk("avg")?, mk("min")?, mk("max")?])
}

pub struct Smoother {
    inputs: Vec<Topic>,
    label: String,
    window_ns: u64,
}

impl Smoother {
    pub fn new(inputs: Vec<Topic>, label: &str, store: Option<&Arc<Store>>) -> Option<Self> {
        let window_ns = parse_span(label)? * NS_PER_S;
        if let Some(store) = store {
            for t in &inputs {
                for o in output_topics(t, label).into_iter().flatten() {
                    store.set_ttl(SubscriptionPattern::exact(&o), 0);
                }
            }
        }
        Some(Smoother {
            inputs,
            label: label.to_string(),
            window_ns,
        })
    }

    pub fn outputs(&self) -> Vec<Topic> {
        self.inputs
            .iter()
            .filter_map(|t| output_topics(t, &self.label))
            .flatten()
            .collect()
    }
}

impl Operator for Smoother {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        let mut out = Vec::new();
        for t in &self.inputs {
            let (Some(s), Some([a, lo, hi])) = (
                smooth_series(ctx.view, t, ctx.now, self.window_ns),
                output_topics(t, &self.label),
            ) else {
                continue;
            };
            out.push(Reading::new(a, ctx.now, s.avg));
            out.push(Reading::new(lo, ctx.now, s.min));
            out.push(Reading::new(hi, ctx.now, s.max));
        }
        Ok(out)
    }
}

/// `smoothing s5 { window 5m  input { sensor "<...>" } }`; one unit per
/// block, interval defaulting to the window.
pub fn build(
    node: &Node,
    ctx: &BuildCtx,
    store: Option<&Arc<Store>>,
) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.extend(["window", "input"]);
    node.check_keys(&keys)?;
    let label = node.req_text("window")?;
    let secs = parse_span(&label)
        .ok_or_else(|| ConfigError::at(node, format!("bad window {label:?} (e.g. 5m, 60m)")))?;
    let c = Common::from_node(node, secs * 1000, Placement::OutOfBand)?;
    let inputs: Vec<Topic> = match node.get("input") {
        Some(b) => ctx
            .resolve_sensors(b)?
            .into_iter()
            .map(|(t, _)| t)
            .collect(),
        None => return Err(ConfigError::at(node, "smoothing block needs input")),
    };
    let op = Smoother::new(inputs.clone(), &label, store).expect("window validated");
    Ok(vec![Built {
        spec: c.spec(inputs, op.outputs()),
        op: Box::new(op),
        allow_empty: c.allow_empty,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::SensorCache;
    use crate::clock::VirtualClock;
    use crate::storage::StoreConfig;

    #[test]
    fn constant_and_ramp() {
        let cache = Arc::new(SensorCache::new());
        let c = Topic::parse("/a/b/const").unwrap();
        let r = Topic::parse("/a/b/ramp").unwrap();
        for i in 0..60u64 {
            let ts = (i + 1) * 5 * NS_PER_S;
            cache.insert_raw(&c, ts, 42);
            cache.insert_raw(&r, ts, i as i64);
        }
        let view = DataView::new(cache, None);
        let end = 300 * NS_PER_S;
        let s = smooth_series(&view, &c, end, 300 * NS_PER_S).unwrap();
        assert_eq!(
            s,
            Smoothed {
                avg: 42,
                min: 42,
                max: 42
            }
        );
        let s = smooth_series(&view, &r, end, 300 * NS_PER_S).unwrap();
        assert_eq!(
            s,
            Smoothed {
                avg: 30,
                min: 0,
                max: 59
            }
        );
        assert_eq!(
            smooth_series(&view, &r, 10_000 * NS_PER_S, 300 * NS_PER_S),
            None
        );
    }

    #[test]
    fn outputs_bypass_ttl() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(
            Store::open(StoreConfig::new(dir.path()), Arc::new(VirtualClock::new(1))).unwrap(),
        );
        let t = Topic::parse("/a/b/temp").unwrap();
        let s = Smoother::new(vec![t.clone()], "5m", Some(&store)).unwrap();
        let outs = s.outputs();
        assert_eq!(outs[0].as_str(), "/a/b/temp.avg5m");
        assert_eq!(store.ttl_for(&outs[0]), 0);
        assert_ne!(store.ttl_for(&t), 0);
        assert_eq!(parse_span("60m"), Some(3600));
        assert_eq!(parse_span("5x"), None);
    }
}
