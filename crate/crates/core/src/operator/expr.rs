//! Sensor expressions: templates that pick sets of sensors out of the
//! topic tree.
//!
//! `<topdown 3, filter cm/s../socket>temp-p` starts at a tree root, walks
//! three levels down, keeps the nodes whose root-relative path matches the
//! glob `cm/s../socket`, and appends the sensor name `temp-p`.
//!
//! Glob rules: `.` matches exactly one character, `*` matches any run of
//! characters, neither ever matches `/`. A glob is anchored at the start of
//! the relative path and matches when it consumes a prefix of it, so
//! `cm/s../socket` accepts both `cm/s01/socket` and `cm/s01/socket1`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::topic::Topic;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{msg} at offset {offset}")]
pub struct ExprError {
    pub offset: usize,
    pub msg: String,
}

fn err(offset: usize, msg: impl Into<String>) -> ExprError {
    ExprError {
        offset,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    TopDown(usize),
    BottomUp(usize),
    Filter(String),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::TopDown(n) => write!(f, "topdown {n}"),
            Selector::BottomUp(n) => write!(f, "bottomup {n}"),
            Selector::Filter(p) => write!(f, "filter {p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorExpression {
    pub selectors: Vec<Selector>,
    pub suffix: String,
}

impl fmt::Display for SensorExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<")?;
        for (i, s) in self.selectors.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, ">{}", self.suffix)
    }
}

impl std::str::FromStr for SensorExpression {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, ExprError> {
        SensorExpression::parse(s)
    }
}

impl SensorExpression {
    pub fn parse(text: &str) -> Result<SensorExpression, ExprError> {
        let body_start = text
            .find(|c: char| !c.is_whitespace())
            .ok_or_else(|| err(0, "expected '<'"))?;
        if !text[body_start..].starts_with('<') {
            return Err(err(body_start, "expected '<'"));
        }
        let open = body_start + 1;
        let close = text[open..]
            .find('>')
            .map(|i| i + open)
            .ok_or_else(|| err(text.len(), "expected '>'"))?;
        let mut selectors = Vec::new();
        let mut offset = open;
        for part in text[open..close].split(',') {
            let lead = part.len() - part.trim_start().len();
            let sel_at = offset + lead;
            let part_trim = part.trim();
            let (word, arg) = match part_trim.split_once(char::is_whitespace) {
                Some((w, a)) => (w, a.trim()),
                None => (part_trim, ""),
            };
            let arg_at = sel_at + part_trim.len() - arg.len();
            let sel = match word.to_ascii_lowercase().as_str() {
                "topdown" | "bottomup" => {
                    let n: usize = arg.parse().map_err(|_| {
                        err(arg_at, format!("expected a positive integer after {word}"))
                    })?;
                    if n == 0 {
                        return Err(err(arg_at, "level count must be at least 1"));
                    }
                    if word.eq_ignore_ascii_case("topdown") {
                        Selector::TopDown(n)
                    } else {
                        Selector::BottomUp(n)
                    }
                }
                "filter" => {
                    if arg.is_empty() {
                        return Err(err(arg_at, "empty pattern"));
                    }
                    Selector::Filter(arg.to_string())
                }
                "" => return Err(err(sel_at, "expected a selector")),
                other => {
                    return Err(err(
                        sel_at,
                        format!(
                            "unknown selector {other:?} (expected topdown, bottomup or filter)"
                        ),
                    ))
                }
            };
            selectors.push(sel);
            offset += part.len() + 1;
        }
        let suffix = text[close + 1..].trim();
        if suffix.is_empty() {
            return Err(err(close + 1, "expected a sensor name after '>'"));
        }
        if suffix.contains(['/', '<', '>', ' ']) {
            return Err(err(close + 1, "sensor name must be a single label"));
        }
        Ok(SensorExpression {
            selectors,
            suffix: suffix.to_string(),
        })
    }

    /// Resolves against an inventory. `root` is a label path such as
    /// `["deepest"]`. The result is sorted and free of duplicates.
    pub fn resolve(&self, root: &[String], inventory: &[Topic]) -> Vec<Topic> {
        let mut tree: BTreeSet<Vec<&str>> = BTreeSet::new();
        for t in inventory {
            let labels: Vec<&str> = t.labels().collect();
            // interior nodes only: the leaf is a sensor
            for k in 0..labels.len() {
                tree.insert(labels[..k].to_vec());
            }
        }
        let root: Vec<&str> = root.iter().map(String::as_str).collect();
        let mut current: BTreeSet<Vec<&str>> = BTreeSet::new();
        current.insert(root.clone());
        for sel in &self.selectors {
            current = match sel {
                Selector::TopDown(n) => tree
                    .iter()
                    .filter(|node| {
                        current
                            .iter()
                            .any(|c| node.len() == c.len() + n && node.starts_with(c))
                    })
                    .cloned()
                    .collect(),
                Selector::BottomUp(n) => current
                    .iter()
                    .filter(|c| c.len() >= *n)
                    .map(|c| c[..c.len() - n].to_vec())
                    .collect(),
                Selector::Filter(glob) => current
                    .into_iter()
                    .filter(|c| {
                        let rel = if c.starts_with(&root) {
                            &c[root.len()..]
                        } else {
                            &c[..]
                        };
                        glob_prefix_match(glob.as_bytes(), rel.join("/").as_bytes())
                    })
                    .collect(),
            };
        }
        let inv: BTreeSet<&str> = inventory.iter().map(Topic::as_str).collect();
        let mut out: Vec<Topic> = current
            .iter()
            .filter_map(|node| {
                let mut s = String::new();
                for l in node {
                    s.push('/');
                    s.push_str(l);
                }
                s.push('/');
                s.push_str(&self.suffix);
                inv.contains(s.as_str())
                    .then(|| Topic::parse(&s).ok())
                    .flatten()
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// The tree nodes (without suffix) an expression selects; used to pair
    /// per-component sensors that share a parent.
    pub fn resolve_nodes(&self, root: &[String], inventory: &[Topic]) -> Vec<Topic> {
        self.resolve(root, inventory)
            .into_iter()
            .filter_map(|t| t.parent())
            .collect()
    }
}

/// True when `glob` matches some prefix of `text` (see module docs).
pub fn glob_prefix_match(glob: &[u8], text: &[u8]) -> bool {
    match glob.split_first() {
        None => true,
        Some((b'*', rest)) => {
            let mut i = 0;
            loop {
                if glob_prefix_match(rest, &text[i..]) {
                    return true;
                }
                if i == text.len() || text[i] == b'/' {
                    return false;
                }
                i += 1;
            }
        }
        Some((b'.', rest)) => match text.split_first() {
            Some((c, tail)) if *c != b'/' => glob_prefix_match(rest, tail),
            _ => false,
        },
        Some((g, rest)) => match text.split_first() {
            Some((c, tail)) if c == g => glob_prefix_match(rest, tail),
            _ => false,
        },
    }
}
