//! Bagged regression trees.
//!
//! Each tree trains on a bootstrap resample. At every node `mtry` features
//! are drawn and the split with the largest variance reduction wins; the
//! threshold sits midway between adjacent distinct feature values. Per-tree
//! seeds are derived from the forest seed before training, so the result is
//! the same for any thread count.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::odac::cs::write_atomic;

pub const FOREST_FORMAT: &str = "odapipe-forest";
pub const FOREST_VERSION: u32 = 1;
/// Fewest training rows accepted.
pub const MIN_SAMPLES: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("need at least {min} samples, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("feature rows must have {expected} values, row {row} has {got}")]
    Shape {
        expected: usize,
        row: usize,
        got: usize,
    },
    #[error("{0} features and targets differ in length")]
    Length(usize),
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("signature has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("model file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("model file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` is ceil(sqrt(n_features)).
    pub mtry: Option<usize>,
    /// Bootstrap sample size per tree; `None` is the training-set size.
    pub max_samples: Option<usize>,
    /// Off: every tree sees the training set as-is.
    pub bootstrap: bool,
    /// Recorded in the model file; the prediction horizon in samples.
    pub horizon: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 50,
            max_depth: 12,
            min_leaf: 5,
            mtry: None,
            max_samples: None,
            bootstrap: true,
            horizon: 6,
        }
    }
}

/// Preorder node. Leaves have `feature == LEAF`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

pub const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.feature == LEAF {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.feature == LEAF {
                0
            } else {
                1 + walk(t, n.left as usize).max(walk(t, n.right as usize))
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub n_features: usize,
    pub seed: u64,
    pub horizon: usize,
    pub trees: Vec<Tree>,
}

/// Best variance-reduction split of `idx` on feature `f`:
/// `(threshold, gain)`, both children holding at least `min_leaf` rows.
pub fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    f: usize,
    min_leaf: usize,
) -> Option<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (x[i][f], y[i])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let base = total * total / n as f64;
    let min_leaf = min_leaf.max(1);
    let mut left = 0.0;
    let mut best: Option<(f64, f64)> = None;
    for k in 1..n {
        left += pairs[k - 1].1;
        if k < min_leaf || n - k < min_leaf || pairs[k - 1].0 == pairs[k].0 {
            continue;
        }
        let right = total - left;
        let gain = left * left / k as f64 + right * right / (n - k) as f64 - base;
        if gain > best.map_or(1e-12 * (1.0 + base.abs()), |b| b.1) {
            best = Some(((pairs[k - 1].0 + pairs[k].0) / 2.0, gain));
        }
    }
    best
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    p: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> u32 {
        let me = self.nodes.len() as u32;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(TreeNode {
            feature: LEAF,
            threshold: 0.0,
            left: LEAF,
            right: LEAF,
            value: mean,
        });
        if depth >= self.p.max_depth || idx.len() < 2 * self.p.min_leaf.max(1) {
            return me;
        }
        let nf = self.x[0].len();
        let feats = sample(&mut self.rng, nf, self.mtry.min(nf));
        let mut best: Option<(usize, f64, f64)> = None;
        for f in feats.iter() {
            if let Some((thr, gain)) = best_split(self.x, self.y, idx, f, self.p.min_leaf) {
                if best.is_none_or(|b| gain > b.2) {
                    best = Some((f, thr, gain));
                }
            }
        }
        let Some((f, thr, _)) = best else {
            return me;
        };
        let mut lo = 0;
        for k in 0..idx.len() {
            if self.x[idx[k]][f] <= thr {
                idx.swap(lo, k);
                lo += 1;
            }
        }
        let (l, r) = idx.split_at_mut(lo);
        let li = self.grow(l, depth + 1);
        let ri = self.grow(r, depth + 1);
        let n = &mut self.nodes[me as usize];
        n.feature = f as u32;
        n.threshold = thr;
        n.left = li;
        n.right = ri;
        me
    }
}

pub fn forest_train(
    features: &[Vec<f64>],
    targets: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel, ForestError> {
    if features.len() != targets.len() {
        return Err(ForestError::Length(features.len()));
    }
    if features.len() < MIN_SAMPLES {
        return Err(ForestError::TooFew {
            min: MIN_SAMPLES,
            got: features.len(),
        });
    }
    let nf = features[0].len();
    for (row, r) in features.iter().enumerate() {
        if r.len() != nf {
            return Err(ForestError::Shape {
                expected: nf,
                row,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite);
        }
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(ForestError::NonFinite);
    }
    let mtry = params
        .mtry
        .unwrap_or_else(|| (nf as f64).sqrt().ceil() as usize)
        .clamp(1, nf.max(1));
    let n = features.len();
    let m = params.max_samples.unwrap_or(n).clamp(1, n);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..params.n_trees.max(1)).map(|_| master.gen()).collect();
    let trees = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut idx: Vec<usize> = if params.bootstrap {
                (0..m).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut b = Builder {
                x: features,
                y: targets,
                p: params,
                mtry,
                rng,
                nodes: Vec::new(),
            };
            b.grow(&mut idx, 0);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel {
        n_features: nf,
        seed,
        horizon: params.horizon,
        trees,
    })
}

impl ForestModel {
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::Dimension {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Mean of tree outputs rounded to an integer (milli-units).
    pub fn predict(&self, x: &[f64]) -> Result<i64, ForestError> {
        Ok(self.predict_raw(x)?.round() as i64)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FOREST_FORMAT} {FOREST_VERSION}");
        let _ = writeln!(s, "n_trees {}", self.trees.len());
        let _ = writeln!(s, "n_features {}", self.n_features);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "horizon {}", self.horizon);
        for (i, t) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {i} {}", t.nodes.len());
            for n in &t.nodes {
                if n.feature == LEAF {
                    let _ = writeln!(s, "L {:?}", n.value);
                } else {
                    let _ = writeln!(
                        s,
                        "S {} {:?} {} {} {:?}",
                        n.feature, n.threshold, n.left, n.right, n.value
                    );
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<ForestModel, ForestError> {
        let mut lines = text.lines().enumerate();
        let err = |i: usize, m: &str| ForestError::Format {
            line: i + 1,
            msg: m.into(),
        };
        let mut next = || lines.next().ok_or_else(|| err(0, "truncated file"));
        let (i, head) = next()?;
        match head.split_whitespace().collect::<Vec<_>>()[..] {
            [FOREST_FORMAT, v] if v == FOREST_VERSION.to_string() => {}
            [FOREST_FORMAT, v] => return Err(err(i, &format!("unsupported version {v}"))),
            _ => return Err(err(i, "not a forest model file")),
        }
        let mut field = |name: &str| -> Result<u64, ForestError> {
            let (i, l) = next()?;
            l.strip_prefix(name)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| err(i, &format!("expected {name} <n>")))
        };
        let n_trees = field("n_trees")? as usize;
        let n_features = field("n_features")? as usize;
        let seed = field("seed")?;
        let horizon = field("horizon")? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for k in 0..n_trees {
            let (i, l) = next()?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 3 || p[0] != "tree" || p[1] != k.to_string() {
                return Err(err(i, &format!("expected tree {k} <nodes>")));
            }
            let count: usize = p[2].parse().map_err(|_| err(i, "bad node count"))?;
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                let (i, l) = next()?;
                let p: Vec<&str> = l.split_whitespace().collect();
                let num = |s: &str| s.parse::<f64>().map_err(|_| err(i, "bad number"));
                let idx = |s: &str| s.parse::<u32>().map_err(|_| err(i, "bad index"));
                let node = match p[..] {
                    ["L", v] => TreeNode {
                        feature: LEAF,
                        threshold: 0.0,
                        left: LEAF,
                        right: LEAF,
                        value: num(v)?,
                    },
                    ["S", f, t, l, r, v] => TreeNode {
                        feature: idx(f)?,
                        threshold: num(t)?,
                        left: idx(l)?,
                        right: idx(r)?,
                        value: num(v)?,
                    },
                    _ => return Err(err(i, "expected a node line")),
                };
                if node.feature != LEAF
                    && (node.feature as usize >= n_features
                        || node.left as usize >= count
                        || node.right as usize >= count)
                {
                    return Err(err(i, "node index out of range"));
                }
                if !node.value.is_finite() {
                    return Err(err(i, "non-finite leaf"));
                }
                nodes.push(node);
            }
            if nodes.is_empty() {
                return Err(err(i, "empty tree"));
            }
            trees.push(Tree { nodes });
        }
        if trees.is_empty() {
            return Err(err(0, "forest has no trees"));
        }
        Ok(ForestModel {
            n_features,
            seed,
            horizon,
            trees,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(|e| ForestError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ForestModel, ForestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ForestError::Io(format!("{}: {e}", path.display())))?;
        ForestModel::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| vec![i as f64 / n as f64, ((i * 37) % n) as f64 / n as f64])
            .collect()
    }

    #[test]
    fn constant_targets() {
        let x = grid(60);
        let y = vec![50_000.0; 60];
        let m = forest_train(&x, &y, &ForestParams::default(), 1).unwrap();
        assert_eq!(m.trees.len(), 50);
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        assert_eq!(m.predict(&[0.3, 0.9]).unwrap(), 50_000);
    }

    #[test]
    fn single_split_on_step() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| if r[0] < 0.5 { 40.0 } else { 70.0 })
            .collect();
        let p = ForestParams {
            n_trees: 1,
            max_depth: 1,
            bootstrap: false,
            ..Default::default()
        };
        let m = forest_train(&x, &y, &p, 3).unwrap();
        let root = m.trees[0].nodes[0];
        assert!((root.threshold - 0.495).abs() < 1e-12);
        let l = m.trees[0].nodes[root.left as usize].value;
        let r = m.trees[0].nodes[root.right as usize].value;
        assert_eq!((l, r), (40.0, 70.0));
    }

    #[test]
    fn tree_mean_and_errors() {
        let leaf = |v| Tree {
            nodes: vec![TreeNode {
                feature: LEAF,
                threshold: 0.0,
                left: LEAF,
                right: LEAF,
                value: v,
            }],
        };
        let m = ForestModel {
            n_features: 2,
            seed: 0,
            horizon: 6,
            trees: vec![leaf(60_000.0), leaf(62_000.0)],
        };
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), 61_000);
        assert_eq!(
            m.predict(&[0.0]),
            Err(ForestError::Dimension {
                expected: 2,
                got: 1
            })
        );
        let x = grid(10);
        assert!(matches!(
            forest_train(&x, &[1.0; 10], &ForestParams::default(), 0),
            Err(ForestError::TooFew { .. })
        ));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let x = grid(300);
        let y: Vec<f64> = x
            .iter()
            .map(|r| 1000.0 * (r[0] * 3.0).sin() + 200.0 * r[1])
            .collect();
        let p = ForestParams {
            n_trees: 8,
            ..Default::default()
        };
        let a = forest_train(&x, &y, &p, 42).unwrap();
        let b = forest_train(&x, &y, &p, 42).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = forest_train(&x, &y, &p, 43).unwrap();
        assert_ne!(a.to_text(), c.to_text());
        assert_eq!(ForestModel::from_text(&a.to_text()).unwrap(), a);
        assert!(a.trees.iter().all(|t| t.depth() <= 12));
    }

    #[test]
    fn training_point_close_to_leaf_mean() {
        let x = grid(400);
        let y: Vec<f64> = x.iter().map(|r| 50_000.0 + 20_000.0 * r[0]).collect();
        let p = ForestParams {
            n_trees: 1,
            bootstrap: false,
            ..Default::default()
        };
        let m = forest_train(&x, &y, &p, 0).unwrap();
        for i in (0..400).step_by(37) {
            // a leaf of >= 5 neighbours along a slope of 50 per row
            assert!((m.predict_raw(&x[i]).unwrap() - y[i]).abs() <= 50.0 * 10.0);
        }
    }
}
