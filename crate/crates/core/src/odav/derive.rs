//! Derived metrics over the most recent reading of each input sensor.
//!
//! ```text
//! SCALE(RATIO(RATE(cycles), RATE(instructions)), 1000)
//! ```
//!
//! Sensor operands are either absolute topics or names relative to a node
//! (`cycles` under `/sng/i01/n0042` means `/sng/i01/n0042/cycles`).

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, Node};
use crate::operator::loader::{BuildCtx, Built, Common, COMMON_KEYS};
use crate::operator::{DataView, OpContext, OpError, Operator, Placement};
use crate::reading::{Reading, NS_PER_S};
use crate::topic::Topic;

pub const MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricExpr {
    Sensor(String),
    Rate(String),
    Ratio(Box<MetricExpr>, Box<MetricExpr>),
    Sum(Vec<MetricExpr>),
    Scale(Box<MetricExpr>, f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeriveError {
    #[error("no reading for {0}")]
    Missing(String),
    #[error("RATE of {0} needs two readings")]
    NeedTwo(String),
    #[error("counter {0} went backwards")]
    Wrapped(String),
    #[error("zero denominator")]
    ZeroDenominator,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{msg} at offset {offset}")]
pub struct MetricParseError {
    pub offset: usize,
    pub msg: String,
}

impl fmt::Display for MetricExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricExpr::Sensor(s) => f.write_str(s),
            MetricExpr::Rate(s) => write!(f, "RATE({s})"),
            MetricExpr::Ratio(a, b) => write!(f, "RATIO({a}, {b})"),
            MetricExpr::Sum(xs) => {
                f.write_str("SUM(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str(")")
            }
            MetricExpr::Scale(a, k) => write!(f, "SCALE({a}, {k})"),
        }
    }
}

struct P<'a> {
    s: &'a [u8],
    i: usize,
}

impl P<'_> {
    fn err(&self, msg: impl Into<String>) -> MetricParseError {
        MetricParseError {
            offset: self.i,
            msg: msg.into(),
        }
    }

    fn ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn eat(&mut self, c: u8) -> Result<(), MetricParseError> {
        self.ws();
        if self.s.get(self.i) == Some(&c) {
            self.i += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn atom(&mut self) -> Result<String, MetricParseError> {
        self.ws();
        let start = self.i;
        while self.i < self.s.len()
            && !matches!(self.s[self.i], b'(' | b')' | b',')
            && !self.s[self.i].is_ascii_whitespace()
        {
            self.i += 1;
        }
        if start == self.i {
            return Err(self.err("expected a sensor or function"));
        }
        Ok(String::from_utf8_lossy(&self.s[start..self.i]).into_owned())
    }

    fn expr(&mut self, depth: usize) -> Result<MetricExpr, MetricParseError> {
        if depth > MAX_DEPTH {
            return Err(self.err(format!("expression deeper than {MAX_DEPTH}")));
        }
        let at = self.i;
        let word = self.atom()?;
        self.ws();
        if self.s.get(self.i) != Some(&b'(') {
            return Ok(MetricExpr::Sensor(word));
        }
        self.i += 1;
        let e = match word.as_str() {
            "RATE" => {
                let s = self.atom()?;
                MetricExpr::Rate(s)
            }
            "RATIO" => {
                let a = self.expr(depth + 1)?;
                self.eat(b',')?;
                let b = self.expr(depth + 1)?;
                MetricExpr::Ratio(Box::new(a), Box::new(b))
            }
            "SUM" => {
                let mut xs = vec![self.expr(depth + 1)?];
                loop {
                    self.ws();
                    if self.s.get(self.i) == Some(&b',') {
                        self.i += 1;
                        xs.push(self.expr(depth + 1)?);
                    } else {
                        break;
                    }
                }
                MetricExpr::Sum(xs)
            }
            "SCALE" => {
                let a = self.expr(depth + 1)?;
                self.eat(b',')?;
                let k_at = self.i;
                let k = self.atom()?;
                let k: f64 = k.parse().map_err(|_| MetricParseError {
                    offset: k_at,
                    msg: format!("SCALE factor {k:?} is not a number"),
                })?;
                MetricExpr::Scale(Box::new(a), k)
            }
            other => {
                return Err(MetricParseError {
                    offset: at,
                    msg: format!("unknown function {other} (expected RATE, RATIO, SUM or SCALE)"),
                })
            }
        };
        self.eat(b')')?;
        Ok(e)
    }
}

impl MetricExpr {
    pub fn parse(text: &str) -> Result<MetricExpr, MetricParseError> {
        let mut p = P {
            s: text.as_bytes(),
            i: 0,
        };
        let e = p.expr(1)?;
        p.ws();
        if p.i != p.s.len() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }

    /// Every sensor operand, in order of appearance.
    pub fn sensors(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            MetricExpr::Sensor(s) | MetricExpr::Rate(s) => out.push(s),
            MetricExpr::Ratio(a, b) => {
                a.collect(out);
                b.collect(out);
            }
            MetricExpr::Sum(xs) => xs.iter().for_each(|x| x.collect(out)),
            MetricExpr::Scale(a, _) => a.collect(out),
        }
    }

    /// Evaluates with `lookup(name, n)` returning up to the `n` latest
    /// readings of an operand, ascending.
    pub fn eval<F>(&self, lookup: &F) -> Result<f64, DeriveError>
    where
        F: Fn(&str, usize) -> Vec<(u64, i64)>,
    {
        match self {
            MetricExpr::Sensor(s) => lookup(s, 1)
                .last()
                .map(|r| r.1 as f64)
                .ok_or_else(|| DeriveError::Missing(s.clone())),
            MetricExpr::Rate(s) => {
                let rs = lookup(s, 2);
                if rs.len() < 2 {
                    return Err(if rs.is_empty() {
                        DeriveError::Missing(s.clone())
                    } else {
                        DeriveError::NeedTwo(s.clone())
                    });
                }
                let (t0, v0) = rs[rs.len() - 2];
                let (t1, v1) = rs[rs.len() - 1];
                if v1 < v0 {
                    return Err(DeriveError::Wrapped(s.clone()));
                }
                Ok((v1 - v0) as f64 / ((t1 - t0) as f64 / NS_PER_S as f64))
            }
            MetricExpr::Ratio(a, b) => {
                let den = b.eval(lookup)?;
                if den == 0.0 {
                    return Err(DeriveError::ZeroDenominator);
                }
                Ok(a.eval(lookup)? / den)
            }
            MetricExpr::Sum(xs) => {
                // absent operands are left out; at least one must be present
                let mut any = None;
                let mut total = 0.0;
                for x in xs {
                    match x.eval(lookup) {
                        Ok(v) => {
                            total += v;
                            any = Some(());
                        }
                        Err(DeriveError::Missing(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                any.map(|_| total)
                    .ok_or_else(|| DeriveError::Missing(self.to_string()))
            }
            MetricExpr::Scale(a, k) => Ok(a.eval(lookup)? * k),
        }
    }
}

/// Resolves a relative operand against a node topic.
pub fn operand_topic(node: &Topic, name: &str) -> Option<Topic> {
    if name.starts_with('/') {
        Topic::parse(name).ok()
    } else {
        node.child(name).ok()
    }
}

#[derive(Debug, Clone)]
pub struct DerivedMetricSpec {
    pub name: String,
    pub expr: MetricExpr,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DeriveStats {
    pub emitted: u64,
    pub zero_denominator: u64,
    pub wrapped: u64,
    pub missing: u64,
}

/// Evaluates one spec for one node at time `t`.
pub fn derive_metric(
    spec: &DerivedMetricSpec,
    node: &Topic,
    view: &DataView,
    t: u64,
) -> Result<Reading, DeriveError> {
    let lookup = |name: &str, n: usize| {
        operand_topic(node, name)
            .map(|topic| view.last_n(&topic, n, t))
            .unwrap_or_default()
    };
    let v = spec.expr.eval(&lookup)?;
    let topic = node
        .child(&spec.name)
        .map_err(|_| DeriveError::Missing(spec.name.clone()))?;
    Ok(Reading::new(topic, t, v.round() as i64))
}

pub struct DeriveOperator {
    nodes: Vec<Topic>,
    specs: Vec<DerivedMetricSpec>,
    pub stats: Arc<parking_lot::Mutex<DeriveStats>>,
}

impl DeriveOperator {
    pub fn new(nodes: Vec<Topic>, specs: Vec<DerivedMetricSpec>) -> Self {
        DeriveOperator {
            nodes,
            specs,
            stats: Default::default(),
        }
    }

    pub fn outputs(&self) -> Vec<Topic> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for s in &self.specs {
                if let Ok(t) = n.child(&s.name) {
                    out.push(t);
                }
            }
        }
        out
    }

    pub fn inputs(&self) -> Vec<Topic> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for s in &self.specs {
                out.extend(
                    s.expr
                        .sensors()
                        .into_iter()
                        .filter_map(|x| operand_topic(n, x)),
                );
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

impl Operator for DeriveOperator {
    fn compute(&mut self, ctx: &OpContext<'_>) -> Result<Vec<Reading>, OpError> {
        let mut out = Vec::new();
        let mut st = self.stats.lock();
        for n in &self.nodes {
            for s in &self.specs {
                match derive_metric(s, n, ctx.view, ctx.now) {
                    Ok(r) => {
                        st.emitted += 1;
                        out.push(r);
                    }
                    Err(DeriveError::ZeroDenominator) => st.zero_denominator += 1,
                    Err(DeriveError::Wrapped(_)) => st.wrapped += 1,
                    Err(_) => st.missing += 1,
                }
            }
        }
        Ok(out)
    }
}

/// `derive <name> { nodes "<expr>" metric <name> { expr "..." } ... }`.
/// `nodes` selects one sensor per node; its parent is the node.
pub fn build(node: &Node, ctx: &BuildCtx) -> Result<Vec<Built>, ConfigError> {
    let mut keys = COMMON_KEYS.to_vec();
    keys.extend(["nodes", "metric"]);
    node.check_keys(&keys)?;
    let c = Common::from_node(node, 120_000, Placement::InBand)?;
    let sel = node
        .get("nodes")
        .ok_or_else(|| ConfigError::at(node, "derive block needs nodes"))?;
    let mut nodes: Vec<Topic> = ctx.resolve(sel)?.iter().filter_map(Topic::parent).collect();
    nodes.sort();
    nodes.dedup();
    let mut specs = Vec::new();
    for m in node.all("metric") {
        m.check_keys(&["expr"])?;
        let name = m
            .name()
            .ok_or_else(|| ConfigError::at(m, "metric needs a name"))?;
        let expr = MetricExpr::parse(&m.req_text("expr")?)
            .map_err(|e| ConfigError::at(m, format!("metric expression: {e}")))?;
        specs.push(DerivedMetricSpec { name, expr });
    }
    if specs.is_empty() {
        return Err(ConfigError::at(node, "derive block declares no metric"));
    }
    let op = DeriveOperator::new(nodes, specs);
    Ok(vec![Built {
        spec: c.spec(op.inputs(), op.outputs()),
        op: Box::new(op),
        allow_empty: c.allow_empty,
    }])
}
