//! Config-driven unit instantiation.
//!
//! Each top-level block whose kind has a registered factory becomes one or
//! more units. Loading is all-or-nothing: the first error aborts and no unit
//! is returned.

use std::collections::{BTreeMap, HashSet};

use crate::config::{ConfigError, ConfigFile, Node};
use crate::operator::expr::SensorExpression;
use crate::operator::{Operator, OperatorUnit, Placement, UnitSpec};
use crate::topic::Topic;

/// Keys every operator block accepts.
pub const COMMON_KEYS: &[&str] = &["interval", "placement", "allowEmpty"];

pub struct BuildCtx {
    /// Root of the topic tree that sensor expressions navigate.
    pub root: Vec<String>,
    /// The sensor inventory expressions resolve against.
    pub inventory: Vec<Topic>,
}

impl BuildCtx {
    pub fn new(root: &str, inventory: Vec<Topic>) -> Result<Self, ConfigError> {
        let root = crate::topic::parse_prefix(root).map_err(|e| ConfigError {
            line: 0,
            col: 0,
            msg: format!("tree root: {e}"),
        })?;
        Ok(BuildCtx { root, inventory })
    }

    /// Resolves a `sensor` value: either a sensor expression or a literal
    /// topic. Literal topics need not be in the inventory yet.
    pub fn resolve(&self, node: &Node) -> Result<Vec<Topic>, ConfigError> {
        let text = node
            .value
            .as_ref()
            .map(|v| v.as_text())
            .ok_or_else(|| ConfigError::at(node, "sensor needs an expression or topic"))?;
        if text.trim_start().starts_with('<') {
            let expr = SensorExpression::parse(&text)
                .map_err(|e| ConfigError::at(node, format!("sensor expression: {e}")))?;
            let got = expr.resolve(&self.root, &self.inventory);
            if got.is_empty() {
                log::warn!(
                    "line {}: sensor expression {text:?} matches no known sensor",
                    node.line
                );
            }
            Ok(got)
        } else {
            Topic::parse(&text)
                .map(|t| vec![t])
                .map_err(|e| ConfigError::at(node, format!("sensor topic: {e}")))
        }
    }

    /// Resolves every `sensor` entry of `block`, pairing each topic with the
    /// entry that selected it. Duplicates keep their first entry.
    pub fn resolve_sensors<'a>(
        &self,
        block: &'a Node,
    ) -> Result<Vec<(Topic, &'a Node)>, ConfigError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in block.all("sensor") {
            for t in self.resolve(s)? {
                if seen.insert(t.clone()) {
                    out.push((t, s));
                }
            }
        }
        Ok(out)
    }
}

/// Parsed common keys of an operator block.
pub struct Common {
    pub name: String,
    pub interval_ms: u64,
    pub placement: Placement,
    pub allow_empty: bool,
}

impl Common {
    pub fn from_node(
        node: &Node,
        default_interval_ms: u64,
        default_placement: Placement,
    ) -> Result<Self, ConfigError> {
        let name = node
            .name()
            .ok_or_else(|| ConfigError::at(node, format!("{} block needs a name", node.key)))?;
        let interval_ms = match node.int("interval")? {
            Some(v) if v > 0 => v as u64,
            Some(_) => {
                return Err(ConfigError::at(
                    node.get("interval").unwrap_or(node),
                    "interval must be positive",
                ))
            }
            None => default_interval_ms,
        };
        let placement = match node.text("placement")? {
            Some(p) => p
                .parse()
                .map_err(|e: String| ConfigError::at(node.get("placement").unwrap_or(node), e))?,
            None => default_placement,
        };
        Ok(Common {
            name,
            interval_ms,
            placement,
            allow_empty: node.boolean("allowEmpty")?.unwrap_or(false),
        })
    }

    pub fn spec(&self, inputs: Vec<Topic>, outputs: Vec<Topic>) -> UnitSpec {
        UnitSpec {
            name: self.name.clone(),
            inputs,
            outputs,
            interval_ms: self.interval_ms,
            placement: self.placement,
        }
    }
}

/// What a factory returns for one block.
pub struct Built {
    pub spec: UnitSpec,
    pub op: Box<dyn Operator>,
    pub allow_empty: bool,
}

type Factory = Box<dyn Fn(&Node, &BuildCtx) -> Result<Vec<Built>, ConfigError> + Send + Sync>;

#[derive(Default)]
pub struct PluginRegistry {
    factories: BTreeMap<String, Factory>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: &str, f: F)
    where
        F: Fn(&Node, &BuildCtx) -> Result<Vec<Built>, ConfigError> + Send + Sync + 'static,
    {
        self.factories.insert(kind.to_string(), Box::new(f));
    }

    pub fn knows(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// Instantiates every block of a registered kind. Blocks of other kinds are
/// left to the caller.
pub fn load_units(
    cfg: &ConfigFile,
    registry: &PluginRegistry,
    ctx: &BuildCtx,
) -> Result<Vec<OperatorUnit>, ConfigError> {
    let mut built: Vec<(Built, &Node)> = Vec::new();
    for node in &cfg.nodes {
        if let Some(f) = registry.factories.get(&node.key) {
            for b in f(node, ctx)? {
                built.push((b, node));
            }
        }
    }
    let mut names = HashSet::new();
    let mut outputs: BTreeMap<Topic, String> = BTreeMap::new();
    for (b, node) in &built {
        let spec = &b.spec;
        if !names.insert(spec.name.clone()) {
            return Err(ConfigError::at(
                node,
                format!("duplicate unit name {:?}", spec.name),
            ));
        }
        if spec.inputs.is_empty() && !b.allow_empty {
            return Err(ConfigError::at(
                node,
                format!("unit {:?} resolved no input sensors", spec.name),
            ));
        }
        let inputs: HashSet<&Topic> = spec.inputs.iter().collect();
        for o in &spec.outputs {
            if inputs.contains(o) {
                return Err(ConfigError::at(
                    node,
                    format!("unit {:?} reads its own output {o}", spec.name),
                ));
            }
            if let Some(prev) = outputs.insert(o.clone(), spec.name.clone()) {
                return Err(ConfigError::at(
                    node,
                    format!(
                        "output {o} of unit {:?} already produced by {prev:?}",
                        spec.name
                    ),
                ));
            }
        }
    }
    Ok(built
        .into_iter()
        .map(|(b, _)| OperatorUnit::new(b.spec, b.op))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{OpContext, OpError};
    use crate::reading::Reading;

    struct Noop;
    impl Operator for Noop {
        fn compute(&mut self, _: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
            Ok(Vec::new())
        }
    }

    /// A pass-through kind: output topic named by `output`.
    fn registry() -> PluginRegistry {
        let mut r = PluginRegistry::new();
        r.register("echo", |node, ctx| {
            let mut keys = COMMON_KEYS.to_vec();
            keys.extend(["input", "output"]);
            node.check_keys(&keys)?;
            let c = Common::from_node(node, 10_000, Placement::InBand)?;
            let inputs = match node.get("input") {
                Some(b) => ctx
                    .resolve_sensors(b)?
                    .into_iter()
                    .map(|(t, _)| t)
                    .collect(),
                None => Vec::new(),
            };
            let out = Topic::parse(&node.req_text("output")?)
                .map_err(|e| ConfigError::at(node, e.to_string()))?;
            Ok(vec![Built {
                spec: c.spec(inputs, vec![out]),
                op: Box::new(Noop),
                allow_empty: c.allow_empty,
            }])
        });
        r
    }

    fn ctx() -> BuildCtx {
        let inv = ["/r/a/x", "/r/b/x", "/r/b/y"]
            .iter()
            .map(|s| Topic::parse(s).unwrap())
            .collect();
        BuildCtx::new("/r", inv).unwrap()
    }

    #[test]
    fn loads_and_resolves() {
        let cfg = ConfigFile::parse(
            r#"
            echo e1 {
                interval 5000
                input { sensor "<topdown 1>x" }
                output "/r/out/e1"
            }
            plant p { nodes 4 }
            "#,
        )
        .unwrap();
        let units = load_units(&cfg, &registry(), &ctx()).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].spec.inputs.len(), 2);
        assert_eq!(units[0].spec.interval_ms, 5000);
    }

    #[test]
    fn any_error_loads_nothing() {
        let good = r#"echo e1 { input { sensor "/r/a/x" } output "/r/o1" }"#;
        for bad in [
            r#"echo e2 { input { sensor "<topdown 1>zzz" } output "/r/o2" }"#,
            r#"echo e2 { input { sensor "/r/a/x" } output "/r/o1" }"#,
            r#"echo e2 { input { sensor "/r/o2" } output "/r/o2" }"#,
            r#"echo e2 { input { sensor "/r/a/x" } output "/r/o2"
            colour red }"#,
            r#"echo e1 { input { sensor "/r/a/x" } output "/r/o2" }"#,
            r#"echo e2 { input { sensor "<filter >x" } output "/r/o2" }"#,
        ] {
            let cfg = ConfigFile::parse(&format!("{good}\n{bad}")).unwrap();
            assert!(load_units(&cfg, &registry(), &ctx()).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_allowed_when_flagged() {
        let cfg = ConfigFile::parse(
            "echo e { allowEmpty true\n input { sensor \"<topdown 1>zzz\" }\n output \"/r/o\" }",
        )
        .unwrap();
        let units = load_units(&cfg, &registry(), &ctx()).unwrap();
        assert!(units[0].spec.inputs.is_empty());
    }
}
