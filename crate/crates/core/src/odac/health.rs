//! Threshold health checks. A rule raises one event when its condition
//! becomes true and stays quiet until the condition has cleared again.
//! With `repeat` it raises one event per check while the condition holds.

use std::collections::HashMap;
use std::process::Command;
use std::str::FromStr;

use crate::config::{ConfigError, Node};
use crate::operator::loader::{BuildCtx, Built, Common, COMMON_KEYS};
use crate::operator::{OpContext, OpError, Operator, Placement};
use crate::reading::Reading;
use crate::topic::Topic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Above,
    AtLeast,
    Below,
    AtMost,
}

impl Condition {
    pub fn holds(self, v: i64, threshold: i64) -> bool {
        match self {
            Condition::Above => v > threshold,
            Condition::AtLeast => v >= threshold,
            Condition::Below => v < threshold,
            Condition::AtMost => v <= threshold,
        }
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            ">" => Condition::Above,
            ">=" => Condition::AtLeast,
            "<" => Condition::Below,
            "<=" => Condition::AtMost,
            _ => return Err(format!("unknown condition {s:?} (expected >, >=, < or <=)")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Log,
    /// argv; `{topic}`, `{value}` and `{threshold}` are substituted. Run
    /// without a shell.
    Command(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct HealthRule {
    pub name: String,
    pub topics: Vec<Topic>,
    pub condition: Condition,
    pub threshold: i64,
    pub action: Action,
    pub repeat: bool,
}

pub struct HealthChecker {
    rules: Vec<HealthRule>,
    /// (rule index, topic) → currently violating.
    active: HashMap<(usize, Topic), bool>,
    last_check: Option<u64>,
}

impl HealthChecker {
    pub fn new(rules: Vec<HealthRule>) -> Self {
        HealthChecker {
            rules,
            active: HashMap::new(),
            last_check: None,
        }
    }

    pub fn inputs(&self) -> Vec<Topic> {
        let mut v: Vec<Topic> = self
            .rules
            .iter()
            .flat_map(|r| r.topics.iter().cloned())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn active(&self) -> usize {
        self.active.values().filter(|a| **a).count()
    }
}

fn substitute(argv: &[String], topic: &Topic, value: i64, threshold: i64) -> Vec<String> {
    argv.iter()
        .map(|a| {
            a.replace("{topic}", topic.as_str())
                .replace("{value}", &value.to_string())
                .replace("{threshold}", &threshold.to_string())
        })
        .collect()
}

impl Operator for HealthChecker {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        // the first run sees everything already cached
        let from = self.last_check.map_or(0, |t| t + 1);
        self.last_check = Some(ctx.now);
        for (ri, rule) in self.rules.iter().enumerate() {
            for topic in &rule.topics {
                let readings = ctx.view.window(topic, from, ctx.now);
                if readings.is_empty() {
                    continue;
                }
                let state = self.active.entry((ri, topic.clone())).or_insert(false);
                let mut fired = false;
                for (_, v) in readings {
                    let now_bad = rule.condition.holds(v, rule.threshold);
                    if now_bad && (!*state || (rule.repeat && !fired)) {
                        fired = true;
                        ctx.event(
                            Some(topic.clone()),
                            format!(
                                "rule {}: value {v} violates threshold {}",
                                rule.name, rule.threshold
                            ),
                        );
                        if let Action::Command(argv) = &rule.action {
                            let argv = substitute(argv, topic, v, rule.threshold);
                            match Command::new(&argv[0]).args(&argv[1..]).spawn() {
                                Ok(mut child) => {
                                    std::thread::spawn(move || child.wait());
                                }
                                Err(e) => {
                                    log::warn!("rule {}: cannot run {:?}: {e}", rule.name, argv[0])
                                }
                            }
                        }
                    }
                    *state = now_bad;
                }
            }
        }
        Ok(Vec::new())
    }
}

/// ```text
/// healthchecker hc1 {
///   rule hot-cpu {
///     sensor    "<topdown 3, filter cm/s../socket>temp"
///     condition ">="
///     threshold 93000
///     action    log
///   }
/// }
/// ```
/// `command "..."` replaces `action` with a whitespace-split argv.
pub fn build(node: &Node, ctx: &BuildCtx) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.push("rule");
    node.check_keys(&keys)?;
    let c = Common::from_node(node, 60_000, Placement::OutOfBand)?;
    let mut rules = Vec::new();
    for r in node.all("rule") {
        r.check_keys(&[
            "sensor",
            "condition",
            "threshold",
            "action",
            "command",
            "repeat",
        ])?;
        let name = r.name().unwrap_or_else(|| format!("rule{}", rules.len()));
        let mut topics = Vec::new();
        for s in r.all("sensor") {
            topics.extend(ctx.resolve(s)?);
        }
        let condition = r
            .req_text("condition")?
            .parse()
            .map_err(|e: String| ConfigError::at(r, e))?;
        let threshold = r.req_int("threshold")?;
        let action = match (r.text("action")?, r.text("command")?) {
            (_, Some(cmd)) => {
                let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
                if argv.is_empty() {
                    return Err(ConfigError::at(r, "empty command"));
                }
                Action::Command(argv)
            }
            (None, None) => Action::Log,
            (Some(a), None) if a == "log" => Action::Log,
            (Some(a), None) => return Err(ConfigError::at(r, format!("unknown action {a:?}"))),
        };
        let repeat = r.boolean("repeat")?.unwrap_or(false);
        rules.push(HealthRule {
            name,
            topics,
            condition,
            threshold,
            action,
            repeat,
        });
    }
    if rules.is_empty() {
        return Err(ConfigError::at(
            node,
            "healthchecker needs at least one rule",
        ));
    }
    let op = HealthChecker::new(rules);
    Ok(vec![Built {
        spec: c.spec(op.inputs(), Vec::new()),
        op: Box::new(op),
        allow_empty: c.allow_empty,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::SensorCache;
    use crate::operator::{DataView, HealthLog};
    use std::sync::Arc;

    fn run(hc: &mut HealthChecker, view: &DataView, health: &HealthLog, now: u64) {
        let ctx = OpContext {
            now,
            unit: "hc",
            inputs: &[],
            outputs: &[],
            view,
            health,
        };
        hc.compute(&ctx).unwrap();
    }

    #[test]
    fn one_event_per_episode() {
        let cache = Arc::new(SensorCache::new());
        let t = Topic::parse("/a/s01/temp").unwrap();
        let rule = HealthRule {
            name: "hot".into(),
            topics: vec![t.clone()],
            condition: Condition::AtLeast,
            threshold: 90,
            action: Action::Log,
            repeat: false,
        };
        let mut hc = HealthChecker::new(vec![rule]);
        let view = DataView::new(cache.clone(), None);
        let health = HealthLog::new();
        for (ts, v) in [(1, 80), (2, 95), (3, 99), (4, 70), (5, 90)] {
            cache.insert_raw(&t, ts, v);
        }
        run(&mut hc, &view, &health, 3);
        assert_eq!(health.len(), 1);
        run(&mut hc, &view, &health, 10);
        assert_eq!(health.len(), 2);
        // no new data: no change
        run(&mut hc, &view, &health, 20);
        assert_eq!(health.len(), 2);
        assert_eq!(hc.active(), 1);
    }

    #[test]
    fn repeat_fires_every_violating_check() {
        let cache = Arc::new(SensorCache::new());
        let t = Topic::parse("/a/s01/temp").unwrap();
        let rule = HealthRule {
            name: "hot".into(),
            topics: vec![t.clone()],
            condition: Condition::AtLeast,
            threshold: 90,
            action: Action::Log,
            repeat: true,
        };
        let mut hc = HealthChecker::new(vec![rule]);
        let view = DataView::new(cache.clone(), None);
        let health = HealthLog::new();
        for (ts, v) in [(1, 95), (2, 96), (11, 97), (21, 50)] {
            cache.insert_raw(&t, ts, v);
        }
        run(&mut hc, &view, &health, 10);
        run(&mut hc, &view, &health, 20);
        run(&mut hc, &view, &health, 30);
        assert_eq!(
            health
                .events()
                .iter()
                .map(|e| e.timestamp)
                .collect::<Vec<_>>(),
            vec![10, 20]
        );
    }

    #[test]
    fn conditions() {
        assert!("<=".parse::<Condition>().unwrap().holds(5, 5));
        assert!(!"<".parse::<Condition>().unwrap().holds(5, 5));
        assert!(">".parse::<Condition>().unwrap().holds(6, 5));
        assert!("==".parse::<Condition>().is_err());
        let argv = substitute(
            &["x".into(), "{topic}={value}/{threshold}".into()],
            &Topic::parse("/a/b").unwrap(),
            3,
            4,
        );
        assert_eq!(argv[1], "/a/b=3/4");
    }
}
