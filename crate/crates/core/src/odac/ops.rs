//! In-band operators turning a component's recent sensor window into a
//! signature and the signature into a temperature prediction.
//!
//! Models are trained once for a component class on role topics
//! (`/self/temp`, `/peer/power`, `/node/inlet-temp`, ...) and bound to each
//! concrete component when the unit is built.

use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::config::{ConfigError, Node};
use crate::odac::cs::CsModel;
use crate::odac::forest::ForestModel;
use crate::operator::loader::{BuildCtx, Built, Common, COMMON_KEYS};
use crate::operator::{OpContext, OpError, Operator, Placement};
use crate::reading::Reading;
use crate::topic::Topic;

/// Signature coefficients are published as `round(coeff * SIG_SCALE)`.
pub const SIG_SCALE: f64 = 1e6;

/// Name of the `k`-th signature sensor.
pub fn signature_name(k: usize) -> String {
    format!("cs-{k:02}")
}

pub fn signature_topics(component: &Topic, dims: usize) -> Vec<Topic> {
    (0..dims)
        .map(|k| component.child(&signature_name(k)).expect("valid label"))
        .collect()
}

/// Sibling components of the same kind, in cyclic order after `component`.
fn peer_of(component: &Topic, inventory: &[Topic]) -> Option<Topic> {
    let parent = component.parent()?;
    let stem: String = component
        .name()
        .trim_end_matches(|c: char| c.is_ascii_digit())
        .to_string();
    let mut sibs: Vec<Topic> = inventory
        .iter()
        .filter_map(|t| t.parent())
        .filter(|p| {
            p.parent().as_ref() == Some(&parent)
                && p.name().trim_end_matches(|c: char| c.is_ascii_digit()) == stem
        })
        .collect();
    sibs.sort();
    sibs.dedup();
    let i = sibs.iter().position(|s| s == component)?;
    (sibs.len() > 1).then(|| sibs[(i + 1) % sibs.len()].clone())
}

/// Maps role topics onto concrete topics for `component`:
/// `/self/x` → `<component>/x`, `/peer/x` → `<sibling>/x`,
/// `/node/x` → `<parent>/x`. Other topics pass through unchanged.
pub fn bind_roles(
    roles: &[Topic],
    component: &Topic,
    inventory: &[Topic],
) -> Result<Vec<Topic>, String> {
    let peer = peer_of(component, inventory);
    roles
        .iter()
        .map(|r| {
            let base = match (r.depth(), r.label(0)) {
                (2, Some("self")) => Some(component.clone()),
                (2, Some("peer")) => Some(
                    peer.clone()
                        .ok_or_else(|| format!("{component} has no peer"))?,
                ),
                (2, Some("node")) => Some(
                    component
                        .parent()
                        .ok_or_else(|| format!("{component} has no parent"))?,
                ),
                _ => None,
            };
            match base {
                Some(b) => b.child(r.name()).map_err(|e| e.to_string()),
                None => Ok(r.clone()),
            }
        })
        .collect()
}

pub type SharedCs = Arc<RwLock<CsModel>>;
pub type SharedForest = Arc<RwLock<ForestModel>>;

pub struct SignatureOp {
    model: SharedCs,
    inputs: Vec<Topic>,
    outputs: Vec<Topic>,
    path: Option<PathBuf>,
}

impl SignatureOp {
    pub fn new(
        model: SharedCs,
        component: &Topic,
        inventory: &[Topic],
        path: Option<PathBuf>,
    ) -> Result<Self, String> {
        let (inputs, dims) = {
            let m = model.read();
            (bind_roles(&m.sensors, component, inventory)?, m.dims())
        };
        Ok(SignatureOp {
            model,
            inputs,
            outputs: signature_topics(component, dims),
            path,
        })
    }

    pub fn inputs(&self) -> &[Topic] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Topic] {
        &self.outputs
    }
}

impl Operator for SignatureOp {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        let m = self.model.read();
        let series: Vec<Option<Vec<f64>>> = self
            .inputs
            .iter()
            .map(|t| {
                let v: Vec<f64> = ctx
                    .view
                    .last_n(t, m.window, ctx.now)
                    .into_iter()
                    .map(|r| r.1 as f64)
                    .collect();
                (!v.is_empty()).then_some(v)
            })
            .collect();
        if series.iter().all(Option::is_none) {
            return Err(OpError::NoData("no input sensor has data".into()));
        }
        let sig = m
            .transform(&series)
            .map_err(|e| OpError::Failed(e.to_string()))?;
        if sig.tainted {
            log::debug!("{}: signature built with missing sensors", ctx.unit);
        }
        Ok(sig
            .coeffs
            .iter()
            .zip(&self.outputs)
            .map(|(c, t)| Reading::new(t.clone(), ctx.now, (c * SIG_SCALE).round() as i64))
            .collect())
    }

    fn train(&mut self, _ctx: &OpContext<'_>) -> Result<String, OpError> {
        let path = self
            .path
            .clone()
            .ok_or(OpError::Unsupported("retrain without a model file"))?;
        let m = CsModel::load(&path).map_err(|e| OpError::Failed(e.to_string()))?;
        if m.sensors != self.model.read().sensors {
            return Err(OpError::Failed(
                "reloaded model has a different sensor list".into(),
            ));
        }
        let summary = format!(
            "reloaded {} ({} sensors, {} blocks)",
            path.display(),
            m.sensors.len(),
            m.blocks
        );
        *self.model.write() = m;
        Ok(summary)
    }
}

pub struct RegressorOp {
    model: SharedForest,
    inputs: Vec<Topic>,
    output: Topic,
    max_age_ns: u64,
    path: Option<PathBuf>,
}

impl RegressorOp {
    /// `output` names the prediction sensor under `component`.
    pub fn new(
        model: SharedForest,
        component: &Topic,
        output: &str,
        max_age_ns: u64,
        path: Option<PathBuf>,
    ) -> Result<Self, String> {
        let dims = model.read().n_features;
        Ok(RegressorOp {
            model,
            inputs: signature_topics(component, dims),
            output: component.child(output).map_err(|e| e.to_string())?,
            max_age_ns,
            path,
        })
    }

    pub fn inputs(&self) -> &[Topic] {
        &self.inputs
    }

    pub fn output(&self) -> &Topic {
        &self.output
    }
}

impl Operator for RegressorOp {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        let mut x = Vec::with_capacity(self.inputs.len());
        for t in &self.inputs {
            match ctx.view.latest_at(t, ctx.now) {
                Some((ts, v)) if ts + self.max_age_ns >= ctx.now => x.push(v as f64 / SIG_SCALE),
                _ => return Err(OpError::NoData(format!("{t} is missing or stale"))),
            }
        }
        let y = self
            .model
            .read()
            .predict(&x)
            .map_err(|e| OpError::Failed(e.to_string()))?;
        Ok(vec![Reading::new(self.output.clone(), ctx.now, y)])
    }

    fn train(&mut self, _ctx: &OpContext<'_>) -> Result<String, OpError> {
        let path = self
            .path
            .clone()
            .ok_or(OpError::Unsupported("retrain without a model file"))?;
        let m = ForestModel::load(&path).map_err(|e| OpError::Failed(e.to_string()))?;
        if m.n_features != self.inputs.len() {
            return Err(OpError::Failed(
                "reloaded model has a different feature count".into(),
            ));
        }
        let summary = format!("reloaded {} ({} trees)", path.display(), m.trees.len());
        *self.model.write() = m;
        Ok(summary)
    }
}

/// Builds one signature unit per component matched by `component`:
///
/// ```text
/// signature cs {
///   model     "cs.model"
///   component "<topdown 3, filter cm/s../socket>temp"
/// }
/// ```
///
/// `component` resolves to sensors; their parents are the components.
/// Units are named `<block>@<component>`.
pub fn build_signature(
    node: &Node,
    ctx: &BuildCtx,
    shared: Option<SharedCs>,
) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.extend(["model", "component"]);
    node.check_keys(&keys)?;
    let c = Common::from_node(node, 10_000, Placement::InBand)?;
    let path = node.text("model")?.map(PathBuf::from);
    let model = match (shared, &path) {
        (Some(m), _) => m,
        (None, Some(p)) => Arc::new(RwLock::new(
            CsModel::load(p).map_err(|e| ConfigError::at(node, e.to_string()))?,
        )),
        (None, None) => return Err(ConfigError::at(node, "signature block needs model")),
    };
    let comp = node
        .get("component")
        .ok_or_else(|| ConfigError::at(node, "signature block needs component"))?;
    let mut out = Vec::new();
    for comp in components(ctx.resolve(comp)?) {
        let op = SignatureOp::new(model.clone(), &comp, &ctx.inventory, path.clone())
            .map_err(|e| ConfigError::at(node, e))?;
        let mut spec = c.spec(op.inputs().to_vec(), op.outputs().to_vec());
        spec.name = format!("{}@{comp}", c.name);
        out.push(Built {
            spec,
            op: Box::new(op),
            allow_empty: c.allow_empty,
        });
    }
    Ok(out)
}

/// ```text
/// regressor rf {
///   model     "forest.model"
///   component "<topdown 3, filter cm/s../socket>temp"
///   output    temp-p
/// }
/// ```
pub fn build_regressor(
    node: &Node,
    ctx: &BuildCtx,
    shared: Option<SharedForest>,
) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.extend(["model", "component", "output"]);
    node.check_keys(&keys)?;
    let c = Common::from_node(node, 10_000, Placement::InBand)?;
    let path = node.text("model")?.map(PathBuf::from);
    let model = match (shared, &path) {
        (Some(m), _) => m,
        (None, Some(p)) => Arc::new(RwLock::new(
            ForestModel::load(p).map_err(|e| ConfigError::at(node, e.to_string()))?,
        )),
        (None, None) => return Err(ConfigError::at(node, "regressor block needs model")),
    };
    let output = node.text("output")?.unwrap_or_else(|| "temp-p".into());
    let comp = node
        .get("component")
        .ok_or_else(|| ConfigError::at(node, "regressor block needs component"))?;
    let mut out = Vec::new();
    for comp in components(ctx.resolve(comp)?) {
        let op = RegressorOp::new(
            model.clone(),
            &comp,
            &output,
            2 * c.interval_ms * 1_000_000,
            path.clone(),
        )
        .map_err(|e| ConfigError::at(node, e))?;
        let mut spec = c.spec(op.inputs().to_vec(), vec![op.output().clone()]);
        spec.name = format!("{}@{comp}", c.name);
        out.push(Built {
            spec,
            op: Box::new(op),
            allow_empty: true,
        });
    }
    Ok(out)
}

fn components(sensors: Vec<Topic>) -> Vec<Topic> {
    let mut v: Vec<Topic> = sensors.into_iter().filter_map(|t| t.parent()).collect();
    v.sort();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::SensorCache;
    use crate::odac::cs::cs_train;
    use crate::odac::forest::{forest_train, ForestParams};
    use crate::operator::{DataView, HealthLog};
    use crate::reading::NS_PER_S;

    fn t(s: &str) -> Topic {
        Topic::parse(s).unwrap()
    }

    fn inventory() -> Vec<Topic> {
        let mut v = Vec::new();
        for n in ["s00", "s01"] {
            v.push(t(&format!("/d/cm/{n}/power")));
            for s in ["socket0", "socket1"] {
                for x in ["temp", "power"] {
                    v.push(t(&format!("/d/cm/{n}/{s}/{x}")));
                }
            }
        }
        v
    }

    #[test]
    fn roles_bind_to_self_peer_and_node() {
        let roles = [t("/self/temp"), t("/peer/power"), t("/node/power")];
        let got = bind_roles(&roles, &t("/d/cm/s01/socket1"), &inventory()).unwrap();
        assert_eq!(
            got,
            vec![
                t("/d/cm/s01/socket1/temp"),
                t("/d/cm/s01/socket0/power"),
                t("/d/cm/s01/power")
            ]
        );
    }

    #[test]
    fn signature_then_prediction() {
        let roles = vec![t("/self/temp"), t("/self/power"), t("/peer/temp")];
        let hist: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                vec![
                    40_000.0 + 500.0 * i as f64,
                    100.0 * (i % 7) as f64,
                    41_000.0 + 300.0 * i as f64,
                ]
            })
            .collect();
        let cs = cs_train(&hist, roles, 2, 3).unwrap();
        let feats: Vec<Vec<f64>> = (0..60)
            .map(|i| vec![i as f64 / 60.0, 0.0, 0.5, 0.1])
            .collect();
        let targets: Vec<f64> = (0..60).map(|_| 55_000.0).collect();
        let forest = forest_train(
            &feats,
            &targets,
            &ForestParams {
                n_trees: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let cache = Arc::new(SensorCache::new());
        let comp = t("/d/cm/s00/socket0");
        for k in 1..=3u64 {
            for (x, v) in [
                ("socket0/temp", 50_000),
                ("socket0/power", 300),
                ("socket1/temp", 52_000),
            ] {
                cache.insert_raw(&t(&format!("/d/cm/s00/{x}")), k * 10 * NS_PER_S, v);
            }
        }
        let view = DataView::new(cache.clone(), None);
        let health = HealthLog::new();
        let mut sig =
            SignatureOp::new(Arc::new(RwLock::new(cs)), &comp, &inventory(), None).unwrap();
        let ctx = OpContext {
            now: 30 * NS_PER_S,
            unit: "cs",
            inputs: &[],
            outputs: &[],
            view: &view,
            health: &health,
        };
        let out = sig.compute(&ctx).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].topic, t("/d/cm/s00/socket0/cs-00"));
        for r in &out {
            cache.insert(r);
        }
        let mut reg = RegressorOp::new(
            Arc::new(RwLock::new(forest)),
            &comp,
            "temp-p",
            20 * NS_PER_S,
            None,
        )
        .unwrap();
        let out = reg.compute(&ctx).unwrap();
        assert_eq!(out[0].value, 55_000);
        assert_eq!(out[0].topic, t("/d/cm/s00/socket0/temp-p"));
        // stale signature: no prediction
        let late = OpContext {
            now: 100 * NS_PER_S,
            ..ctx
        };
        assert!(matches!(reg.compute(&late), Err(OpError::NoData(_))));
    }
}
