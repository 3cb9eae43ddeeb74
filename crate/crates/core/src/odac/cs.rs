//! Correlation-wise smoothing: a compact block signature of a sensor
//! window.
//!
//! Training fixes per-sensor bounds and an ordering in which correlated
//! sensors sit next to each other. A window is normalized by the bounds,
//! reordered, cut into `B` contiguous blocks, and each block is reduced to a
//! `(level, trend)` pair.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::topic::Topic;

pub const CS_FORMAT: &str = "odapipe-cs";
pub const CS_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CsError {
    #[error("{sensors} sensors cannot fill {blocks} blocks")]
    TooFewSensors { sensors: usize, blocks: usize },
    #[error("degenerate training data")]
    Degenerate,
    #[error("history rows must have {expected} columns, row {row} has {got}")]
    Shape {
        expected: usize,
        row: usize,
        got: usize,
    },
    #[error("window needs {expected} samples per sensor, got {got}")]
    Window { expected: usize, got: usize },
    #[error("model file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("model file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsModel {
    pub sensors: Vec<Topic>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `order[i]` is the sensor index placed at position `i`.
    pub order: Vec<usize>,
    pub blocks: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsSignature {
    /// `[level_0, trend_0, level_1, trend_1, ...]`.
    pub coeffs: Vec<f64>,
    /// Some sensor had no data at all and was imputed at mid-range.
    pub tainted: bool,
}

fn pearson_abs(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).abs()
}

/// Greedy correlation chain over the non-constant columns, then constant
/// columns in input order. Ties go to the lower index.
pub fn correlation_order(cols: &[Vec<f64>], constant: &[bool]) -> Vec<usize> {
    let live: Vec<usize> = (0..cols.len()).filter(|&i| !constant[i]).collect();
    let d = live.len();
    let mut r = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in a + 1..d {
            let v = pearson_abs(&cols[live[a]], &cols[live[b]]);
            r[a][b] = v;
            r[b][a] = v;
        }
    }
    let mut order = Vec::with_capacity(cols.len());
    if d > 0 {
        let mean_r = |a: usize| {
            if d == 1 {
                0.0
            } else {
                r[a].iter().sum::<f64>() / (d - 1) as f64
            }
        };
        let mut start = 0;
        for a in 1..d {
            if mean_r(a) > mean_r(start) {
                start = a;
            }
        }
        let mut used = vec![false; d];
        used[start] = true;
        let mut chain = vec![start];
        while chain.len() < d {
            let tail = *chain.last().unwrap();
            let mut best: Option<usize> = None;
            for c in 0..d {
                if !used[c] && best.is_none_or(|b| r[tail][c] > r[tail][b]) {
                    best = Some(c);
                }
            }
            let b = best.unwrap();
            used[b] = true;
            chain.push(b);
        }
        order.extend(chain.into_iter().map(|i| live[i]));
    }
    order.extend((0..cols.len()).filter(|&i| constant[i]));
    order
}

/// Contiguous block sizes over `d` sensors, larger blocks first.
pub fn block_sizes(d: usize, b: usize) -> Vec<usize> {
    (0..b).map(|i| d / b + usize::from(i < d % b)).collect()
}

/// Trains on `history` rows (one per sample, columns in `sensors` order).
pub fn cs_train(
    history: &[Vec<f64>],
    sensors: Vec<Topic>,
    blocks: usize,
    window: usize,
) -> Result<CsModel, CsError> {
    let d = sensors.len();
    if blocks == 0 || d < blocks {
        return Err(CsError::TooFewSensors { sensors: d, blocks });
    }
    if window == 0 {
        return Err(CsError::Window {
            expected: 1,
            got: 0,
        });
    }
    for (row, r) in history.iter().enumerate() {
        if r.len() != d {
            return Err(CsError::Shape {
                expected: d,
                row,
                got: r.len(),
            });
        }
    }
    if history.len() < 2 {
        return Err(CsError::Degenerate);
    }
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| history.iter().map(|r| r[j]).collect())
        .collect();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    let mut constant = Vec::with_capacity(d);
    for c in &cols {
        let mn = c.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(mn.is_finite() && mx.is_finite()) {
            return Err(CsError::Degenerate);
        }
        constant.push(mn == mx);
        lo.push(mn);
        // keep lo < hi; a constant sensor normalizes to 0
        hi.push(if mx > mn { mx } else { mn + 1.0 });
    }
    if constant.iter().all(|&c| c) {
        return Err(CsError::Degenerate);
    }
    let order = correlation_order(&cols, &constant);
    Ok(CsModel {
        sensors,
        lo,
        hi,
        order,
        blocks,
        window,
    })
}

impl CsModel {
    pub fn dims(&self) -> usize {
        2 * self.blocks
    }

    pub fn normalize(&self, j: usize, v: f64) -> f64 {
        ((v - self.lo[j]) / (self.hi[j] - self.lo[j])).clamp(0.0, 1.0)
    }

    /// `series[j]` holds the window of sensor `j` (model order), or `None`
    /// when the sensor produced nothing. Short series are front-padded with
    /// their oldest value.
    pub fn transform(&self, series: &[Option<Vec<f64>>]) -> Result<CsSignature, CsError> {
        let w = self.window;
        if series.len() != self.sensors.len() {
            return Err(CsError::Shape {
                expected: self.sensors.len(),
                row: 0,
                got: series.len(),
            });
        }
        let mut tainted = false;
        let norm: Vec<Vec<f64>> = series
            .iter()
            .enumerate()
            .map(|(j, s)| match s.as_deref() {
                Some(v) if !v.is_empty() => {
                    let take = &v[v.len().saturating_sub(w)..];
                    let mut out = vec![self.normalize(j, take[0]); w - take.len()];
                    out.extend(take.iter().map(|&x| self.normalize(j, x)));
                    out
                }
                _ => {
                    tainted = true;
                    vec![0.5; w]
                }
            })
            .collect();
        let mut coeffs = Vec::with_capacity(self.dims());
        let mut pos = 0;
        for size in block_sizes(self.order.len(), self.blocks) {
            let members = &self.order[pos..pos + size];
            pos += size;
            let block: Vec<f64> = (0..w)
                .map(|t| members.iter().map(|&j| norm[j][t]).sum::<f64>() / size as f64)
                .collect();
            let (level, slope) = level_slope(&block);
            coeffs.push(level);
            coeffs.push(slope * (w.saturating_sub(1)) as f64);
        }
        Ok(CsSignature { coeffs, tainted })
    }

    /// Like [`CsModel::transform`] but matched by topic, in any column order.
    pub fn transform_labeled(&self, cols: &[(Topic, Vec<f64>)]) -> Result<CsSignature, CsError> {
        let series: Vec<Option<Vec<f64>>> = self
            .sensors
            .iter()
            .map(|t| cols.iter().find(|c| &c.0 == t).map(|c| c.1.clone()))
            .collect();
        self.transform(&series)
    }

    pub fn to_text(&self) -> String {
        let mut rank = vec![0; self.order.len()];
        for (pos, &j) in self.order.iter().enumerate() {
            rank[j] = pos;
        }
        let mut s = String::new();
        let _ = writeln!(s, "{CS_FORMAT} {CS_VERSION}");
        let _ = writeln!(s, "blocks {}", self.blocks);
        let _ = writeln!(s, "window {}", self.window);
        let _ = writeln!(s, "sensors {}", self.sensors.len());
        for (j, sensor) in self.sensors.iter().enumerate() {
            let _ = writeln!(s, "{sensor} {:?} {:?} {}", self.lo[j], self.hi[j], rank[j]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CsModel, CsError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, msg: &str| CsError::Format {
            line: line + 1,
            msg: msg.into(),
        };
        let mut next = |want: &str| -> Result<(usize, String), CsError> {
            let (i, l) = lines
                .next()
                .ok_or_else(|| err(0, &format!("missing {want}")))?;
            Ok((i, l.to_string()))
        };
        let (i, head) = next("header")?;
        match head.split_whitespace().collect::<Vec<_>>()[..] {
            [CS_FORMAT, v] if v == CS_VERSION.to_string() => {}
            [CS_FORMAT, v] => return Err(err(i, &format!("unsupported version {v}"))),
            _ => return Err(err(i, "not a CS model file")),
        }
        let mut field = |name: &str| -> Result<usize, CsError> {
            let (i, l) = next(name)?;
            l.strip_prefix(name)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| err(i, &format!("expected {name} <n>")))
        };
        let blocks = field("blocks")?;
        let window = field("window")?;
        let d = field("sensors")?;
        let mut sensors = Vec::with_capacity(d);
        let (mut lo, mut hi) = (Vec::with_capacity(d), Vec::with_capacity(d));
        let mut order = vec![usize::MAX; d];
        for j in 0..d {
            let (i, l) = next("sensor line")?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 4 {
                return Err(err(i, "expected: topic lo hi rank"));
            }
            sensors.push(Topic::parse(p[0]).map_err(|e| err(i, &e.to_string()))?);
            let l_: f64 = p[1].parse().map_err(|_| err(i, "bad lo"))?;
            let h_: f64 = p[2].parse().map_err(|_| err(i, "bad hi"))?;
            if l_.partial_cmp(&h_) != Some(std::cmp::Ordering::Less) {
                return Err(err(i, "lo must be below hi"));
            }
            lo.push(l_);
            hi.push(h_);
            let rank: usize = p[3].parse().map_err(|_| err(i, "bad rank"))?;
            if rank >= d || order[rank] != usize::MAX {
                return Err(err(i, "ranks must be a permutation"));
            }
            order[rank] = j;
        }
        if blocks == 0 || blocks > d || window == 0 {
            return Err(err(
                0,
                "blocks must be within 1..=sensors and window positive",
            ));
        }
        Ok(CsModel {
            sensors,
            lo,
            hi,
            order,
            blocks,
            window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CsError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(|e| CsError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<CsModel, CsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CsError::Io(format!("{}: {e}", path.display())))?;
        CsModel::from_text(&text)
    }
}

/// Mean and least-squares slope per sample.
fn level_slope(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    if y.len() < 2 {
        return (my, 0.0);
    }
    let mx = (n - 1.0) / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    (my, sxy / sxx)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
