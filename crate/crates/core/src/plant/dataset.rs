//! Open-loop training data: per-component sensor windows recorded while
//! the set temperature is stepped at random, plus model training and
//! held-out evaluation on such data.

use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::odac::cs::{cs_train, CsError, CsModel};
use crate::odac::forest::{forest_train, ForestError, ForestModel, ForestParams};
use crate::odac::nrmse::{nrmse, nrmse_by_band, BandError};
use crate::odac::ops::SIG_SCALE;
use crate::plant::apply_workload;
use crate::plant::model::{Plant, PlantConfig, PlantError};
use crate::plant::workload::{generate_workload, WorkloadConfig};
use crate::reading::NS_PER_S;
use crate::topic::Topic;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("workload: {0}")]
    Workload(String),
    #[error(transparent)]
    Cs(#[from] CsError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Role sensors describing one socket: its own sensors, the other socket's
/// headline sensors and the node's power and inlet temperature.
pub fn socket_roles(cores: usize) -> Vec<Topic> {
    let mut names: Vec<String> = ["temp", "power", "util"]
        .iter()
        .map(|n| format!("/self/{n}"))
        .collect();
    names.extend((0..cores).map(|k| format!("/self/util-c{k:02}")));
    names.extend((0..cores).map(|k| format!("/self/temp-c{k:02}")));
    names.extend(
        ["temp", "power", "util"]
            .iter()
            .map(|n| format!("/peer/{n}")),
    );
    names.extend(["power", "inlet-temp"].iter().map(|n| format!("/node/{n}")));
    names
        .iter()
        .map(|n| Topic::parse(n).expect("valid role"))
        .collect()
}

/// Role sensor whose future maximum is predicted.
pub const TARGET_ROLE: &str = "/self/temp";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sensors: Vec<Topic>,
    pub components: Vec<String>,
    pub interval_s: u64,
    /// `[component][sample][sensor]`, milli-units.
    pub rows: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub plant: PlantConfig,
    pub workload: WorkloadConfig,
    /// Workload seed; the set-temperature steps use a derived seed.
    pub seed: u64,
    /// Nodes recorded (the first `nodes` of the rack).
    pub nodes: usize,
    pub duration_s: u64,
    pub interval_s: u64,
    /// Range of the time between set-temperature steps, seconds.
    pub step_s: (f64, f64),
}

impl Dataset {
    pub fn target_col(&self) -> usize {
        self.sensors
            .iter()
            .position(|t| t.as_str() == TARGET_ROLE)
            .expect("target role present")
    }

    pub fn samples(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// CSV: `component,t_s,<role topics>`, values as integers.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "component,t_s")?;
        for s in &self.sensors {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
        let mut line = String::new();
        for (c, comp) in self.components.iter().enumerate() {
            for (i, row) in self.rows[c].iter().enumerate() {
                line.clear();
                let _ = write!(line, "{comp},{}", (i as u64 + 1) * self.interval_s);
                for v in row {
                    let _ = write!(line, ",{}", *v as i64);
                }
                writeln!(w, "{line}")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset, DatasetError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let header = header?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "component" || cols[1] != "t_s" {
            return Err(DatasetError::Parse {
                line: 1,
                msg: "expected header component,t_s,<sensors>".into(),
            });
        }
        let sensors = cols[2..]
            .iter()
            .map(|c| {
                Topic::parse(c).map_err(|e| DatasetError::Parse {
                    line: 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !sensors.iter().any(|t| t.as_str() == TARGET_ROLE) {
            return Err(DatasetError::Parse {
                line: 1,
                msg: format!("no {TARGET_ROLE} column"),
            });
        }
        let mut ds = Dataset {
            sensors,
            components: Vec::new(),
            interval_s: 0,
            rows: Vec::new(),
        };
        let mut last_t: Option<u64> = None;
        for (i, l) in lines {
            let l = l?;
            let lineno = i + 1;
            let bad = |msg: String| DatasetError::Parse { line: lineno, msg };
            let mut it = l.split(',');
            let comp = it.next().ok_or_else(|| bad("missing component".into()))?;
            let t: u64 = it
                .next()
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| bad("bad t_s".into()))?;
            let row = it
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map(|v| v as f32)
                        .map_err(|_| bad(format!("bad value {x:?}")))
                })
                .collect::<Result<Vec<f32>, _>>()?;
            if row.len() != ds.sensors.len() {
                return Err(bad(format!(
                    "expected {} values, got {}",
                    ds.sensors.len(),
                    row.len()
                )));
            }
            if ds.components.last().map(String::as_str) != Some(comp) {
                ds.components.push(comp.to_string());
                ds.rows.push(Vec::new());
                last_t = None;
            }
            if let Some(prev) = last_t {
                let step = t
                    .checked_sub(prev)
                    .filter(|s| *s > 0)
                    .ok_or_else(|| bad("time must increase".into()))?;
                if ds.interval_s == 0 {
                    ds.interval_s = step;
                } else if step != ds.interval_s {
                    return Err(bad(format!(
                        "irregular sampling: step {step} vs {}",
                        ds.interval_s
                    )));
                }
            }
            last_t = Some(t);
            ds.rows.last_mut().expect("pushed").push(row);
        }
        if ds.rows.is_empty() {
            return Err(DatasetError::Invalid("dataset has no rows".into()));
        }
        if ds.interval_s == 0 {
            ds.interval_s = 10;
        }
        Ok(ds)
    }
}

/// Runs the plant open loop and records every sampled socket.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    let cfg = PlantConfig {
        nodes: spec.nodes.min(spec.plant.nodes).max(1),
        ..spec.plant.clone()
    };
    let mut plant = Plant::new(cfg.clone())?;
    let sched = generate_workload(
        &spec.workload,
        cfg.nodes,
        cfg.sockets,
        spec.seed,
        spec.duration_s as f64,
    )
    .map_err(DatasetError::Workload)?;
    let mut steps = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_57e9);
    let roles = socket_roles(cfg.cores);
    let mut components = Vec::new();
    let mut binding: Vec<Vec<Topic>> = Vec::new();
    for n in 0..cfg.nodes {
        for s in 0..cfg.sockets {
            let comp = cfg.socket_topic(n, s);
            let inv = plant
                .node_readings(n, 0)
                .into_iter()
                .map(|r| r.topic)
                .collect::<Vec<_>>();
            binding.push(
                crate::odac::ops::bind_roles(&roles, &comp, &inv).map_err(DatasetError::Invalid)?,
            );
            components.push(comp.to_string());
        }
    }
    let mut rows = vec![Vec::new(); components.len()];
    let mut next_step = 0.0;
    let dt = cfg.dt;
    let total = (spec.duration_s as f64 / dt).round() as u64;
    let sample_every = ((spec.interval_s as f64) / dt).round().max(1.0) as u64;
    for k in 1..=total {
        let t = k as f64 * dt;
        if t >= next_step {
            plant.set_rcu_temperature(steps.gen_range(cfg.t_min..=cfg.t_max))?;
            next_step = t + steps.gen_range(spec.step_s.0..=spec.step_s.1);
        }
        apply_workload(&mut plant, &sched, t);
        plant.step()?;
        if k % sample_every == 0 {
            let ts = (t * NS_PER_S as f64).round() as u64;
            for n in 0..cfg.nodes {
                let rs = plant.node_readings(n, ts);
                for s in 0..cfg.sockets {
                    let c = n * cfg.sockets + s;
                    let row = binding[c]
                        .iter()
                        .map(|b| {
                            rs.iter()
                                .find(|r| &r.topic == b)
                                .map_or(f32::NAN, |r| r.value as f32)
                        })
                        .collect();
                    rows[c].push(row);
                }
            }
        }
    }
    Ok(Dataset {
        sensors: roles,
        components,
        interval_s: spec.interval_s,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub blocks: usize,
    pub window: usize,
    /// Prediction horizon in samples.
    pub horizon: usize,
    /// Samples between training windows.
    pub stride: usize,
    pub forest: ForestParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            blocks: 20,
            window: 6,
            horizon: 6,
            stride: 6,
            forest: ForestParams {
                max_samples: Some(20_000),
                ..ForestParams::default()
            },
        }
    }
}

/// Window ending at `i` as per-sensor series.
fn window_at(rows: &[Vec<f32>], i: usize, w: usize) -> Vec<Option<Vec<f64>>> {
    let d = rows[0].len();
    (0..d)
        .map(|j| Some(rows[i + 1 - w..=i].iter().map(|r| r[j] as f64).collect()))
        .collect()
}

/// Signature features and future-maximum targets at every `stride`-th
/// sample with a full window behind and a full horizon ahead.
pub fn training_pairs(
    ds: &Dataset,
    cs: &CsModel,
    horizon: usize,
    stride: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), DatasetError> {
    let tc = ds.target_col();
    let w = cs.window;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rows in &ds.rows {
        let mut i = w - 1;
        while i + horizon < rows.len() {
            // quantized as the in-band operator publishes them
            let sig = cs.transform(&window_at(rows, i, w))?;
            x.push(
                sig.coeffs
                    .iter()
                    .map(|c| (c * SIG_SCALE).round() / SIG_SCALE)
                    .collect(),
            );
            y.push(
                rows[i + 1..=i + horizon]
                    .iter()
                    .map(|r| r[tc] as f64)
                    .fold(f64::MIN, f64::max),
            );
            i += stride.max(1);
        }
    }
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub rows: usize,
    pub samples: usize,
    pub blocks: usize,
    pub window: usize,
    pub trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

pub fn train_models(
    ds: &Dataset,
    p: &TrainParams,
    seed: u64,
) -> Result<(CsModel, ForestModel, TrainSummary), DatasetError> {
    let cs = train_cs(ds, p)?;
    let (forest, summary) = train_forest(ds, &cs, p, seed)?;
    Ok((cs, forest, summary))
}

/// Trains a forest on the signatures `cs` produces for `ds`.
pub fn train_forest(
    ds: &Dataset,
    cs: &CsModel,
    p: &TrainParams,
    seed: u64,
) -> Result<(ForestModel, TrainSummary), DatasetError> {
    if ds.sensors != cs.sensors {
        return Err(DatasetError::Invalid(
            "dataset sensors differ from the signature model".into(),
        ));
    }
    let (x, y) = training_pairs(ds, cs, p.horizon, p.stride)?;
    let forest = forest_train(
        &x,
        &y,
        &ForestParams {
            horizon: p.horizon,
            ..p.forest
        },
        seed,
    )?;
    let summary = TrainSummary {
        rows: ds.samples(),
        samples: x.len(),
        blocks: cs.blocks,
        window: cs.window,
        trees: forest.trees.len(),
        max_depth: forest.trees.iter().map(|t| t.depth()).max().unwrap_or(0),
        seed,
    };
    Ok((forest, summary))
}

pub fn train_cs(ds: &Dataset, p: &TrainParams) -> Result<CsModel, DatasetError> {
    let history: Vec<Vec<f64>> = ds
        .rows
        .iter()
        .flatten()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    Ok(cs_train(&history, ds.sensors.clone(), p.blocks, p.window)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub nrmse: f64,
    pub bands: Vec<BandError>,
}

/// Evaluates at every `stride`-th sample; truths and bands in milli-units.
pub fn evaluate(
    ds: &Dataset,
    cs: &CsModel,
    forest: &ForestModel,
    stride: usize,
    band_milli: f64,
) -> Result<EvalReport, DatasetError> {
    if ds.sensors != cs.sensors {
        return Err(DatasetError::Invalid(
            "dataset sensors differ from the signature model".into(),
        ));
    }
    let (x, truth) = training_pairs(ds, cs, forest.horizon.max(1), stride)?;
    let pred = x
        .iter()
        .map(|f| forest.predict(f).map(|v| v as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let g =
        nrmse(&pred, &truth).ok_or_else(|| DatasetError::Invalid("degenerate truths".into()))?;
    Ok(EvalReport {
        samples: pred.len(),
        nrmse: g,
        bands: nrmse_by_band(&pred, &truth, band_milli),
    })
}
