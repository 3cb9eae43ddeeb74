//! Closed-loop scenario runner: plant, one pusher per node with in-band
//! prediction units, an rcu pusher, and an agent hosting the controller and
//! health checks, all on one virtual clock.
//!
//! ```text
//! scenario cm-73 {
//!   seed            7
//!   duration        86400
//!   sample          10000
//!   controlInterval 60000
//!   critical        93000
//!   accel           0
//! }
//! plant {
//!   nodes 50
//! }
//! training {
//!   seed     1001
//!   nodes    16
//!   duration 86400
//! }
//! signature cs {
//!   component "<topdown 3, filter cm/s../socket>temp"
//!   interval  60000
//! }
//! regressor rf {
//!   component "<topdown 3, filter cm/s../socket>temp"
//!   interval  60000
//! }
//! controller c1 { ... }
//! healthchecker hc { ... }
//! ```
//!
//! `fixed 35` in the scenario block pins the set temperature and skips the
//! controller blocks.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::cache::SensorCache;
use crate::clock::{SharedClock, VirtualClock};
use crate::config::{ConfigError, ConfigFile, Node};
use crate::odac::control::{self as ctl, Knob, KnobLog};
use crate::odac::cs::CsModel;
use crate::odac::forest::{ForestModel, ForestParams};
use crate::odac::nrmse::{nrmse, nrmse_by_band, BandError};
use crate::odac::{health, ops};
use crate::odav::stats::deciles;
use crate::operator::loader::{load_units, BuildCtx, PluginRegistry};
use crate::operator::{DataView, HealthLog, Scheduler};
use crate::plant::apply_workload;
use crate::plant::dataset::{
    generate_dataset, train_models, DatasetError, DatasetSpec, TrainParams,
};
use crate::plant::endpoint::{LocalKnob, SharedPlant};
use crate::plant::model::{Plant, PlantConfig, PlantError};
use crate::plant::workload::{generate_workload, WorkloadConfig};
use crate::pusher::plant::{PlantPart, PlantSource};
use crate::pusher::{LocalLink, Pusher};
use crate::reading::{NS_PER_MS, NS_PER_S};
use crate::topic::Topic;
use crate::transport::client::Publisher;
use crate::transport::Agent;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSpec {
    pub dataset: DatasetSpec,
    pub params: TrainParams,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub duration_s: u64,
    pub sample_ms: u64,
    pub control_ms: u64,
    /// Milli-degrees at which a measured temperature counts as a violation.
    pub critical: i64,
    /// Simulated seconds per wall second; 0 runs unpaced.
    pub accel: f64,
    pub fixed: Option<f64>,
    pub plant: PlantConfig,
    pub workload: WorkloadConfig,
    pub training: Option<TrainingSpec>,
    /// Operator blocks (signature, regressor, controller, healthchecker).
    pub config: ConfigFile,
}

fn floats(node: &Node, key: &str, n: usize) -> Result<Option<Vec<f64>>, ConfigError> {
    let Some(text) = node.text(key)? else {
        return Ok(None);
    };
    let v: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    match v {
        Ok(v) if v.len() == n => Ok(Some(v)),
        _ => Err(ConfigError::at(
            node.get(key).unwrap_or(node),
            format!("{key} needs {n} numbers"),
        )),
    }
}

fn pair(node: &Node, key: &str, cur: (f64, f64)) -> Result<(f64, f64), ConfigError> {
    Ok(floats(node, key, 2)?.map_or(cur, |v| (v[0], v[1])))
}

fn positive(node: &Node, key: &str, default: u64) -> Result<u64, ConfigError> {
    match node.int(key)? {
        None => Ok(default),
        Some(v) if v > 0 => Ok(v as u64),
        Some(_) => Err(ConfigError::at(
            node.get(key).unwrap_or(node),
            format!("{key} must be positive"),
        )),
    }
}

fn plant_config(node: Option<&Node>, seed: u64) -> Result<PlantConfig, ConfigError> {
    let mut c = PlantConfig {
        seed,
        ..PlantConfig::default()
    };
    let Some(n) = node else { return Ok(c) };
    n.check_keys(&[
        "prefix",
        "nodes",
        "sockets",
        "cores",
        "tdp",
        "r",
        "rSpread",
        "tauC",
        "tauV",
        "flowMax",
        "flowMin",
        "tMin",
        "tMax",
        "hardMin",
        "hardMax",
        "kW",
        "dt",
        "basePower",
        "initialSetTemp",
        "seed",
    ])?;
    if let Some(p) = n.text("prefix")? {
        c.prefix = p;
    }
    c.nodes = positive(n, "nodes", c.nodes as u64)? as usize;
    c.sockets = positive(n, "sockets", c.sockets as u64)? as usize;
    c.cores = n.int("cores")?.map_or(c.cores, |v| v.max(0) as usize);
    let f = |k: &str, d: f64| n.float(k).map(|v| v.unwrap_or(d));
    c.class.tdp_w = f("tdp", c.class.tdp_w)?;
    c.class.r_kw = f("r", c.class.r_kw)?;
    c.class.r_spread = f("rSpread", c.class.r_spread)?;
    c.tau_c = f("tauC", c.tau_c)?;
    c.tau_v = f("tauV", c.tau_v)?;
    c.flow_max = f("flowMax", c.flow_max)?;
    c.flow_min = f("flowMin", c.flow_min)?;
    c.t_min = f("tMin", c.t_min)?;
    c.t_max = f("tMax", c.t_max)?;
    c.hard_min = f("hardMin", c.hard_min)?;
    c.hard_max = f("hardMax", c.hard_max)?;
    c.k_w = f("kW", c.k_w)?;
    c.dt = f("dt", c.dt)?;
    c.initial_set_temp = f("initialSetTemp", c.initial_set_temp)?;
    c.base_power = pair(n, "basePower", c.base_power)?;
    c.seed = n.int("seed")?.map_or(seed, |v| v as u64);
    c.validate()
        .map_err(|e| ConfigError::at(n, e.to_string()))?;
    Ok(c)
}

fn workload_config(node: Option<&Node>) -> Result<WorkloadConfig, ConfigError> {
    let mut w = WorkloadConfig::default();
    let Some(n) = node else { return Ok(w) };
    n.check_keys(&[
        "weights",
        "heavyWeights",
        "compute",
        "comm",
        "idle",
        "sizes",
        "sizeWeights",
        "heavySizeWeights",
        "commU",
        "heavyPerDay",
        "heavyDuration",
        "socketJitter",
        "gang",
    ])?;
    if let Some(v) = floats(n, "weights", 3)? {
        w.weights = [v[0], v[1], v[2]];
    }
    if let Some(v) = floats(n, "heavyWeights", 3)? {
        w.heavy_weights = [v[0], v[1], v[2]];
    }
    for (i, k) in ["compute", "comm", "idle"].into_iter().enumerate() {
        w.durations[i] = pair(n, k, w.durations[i])?;
    }
    if let Some(text) = n.text("sizes")? {
        let v: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError::at(n, "sizes needs lo hi pairs"))?;
        if v.is_empty() || !v.len().is_multiple_of(2) {
            return Err(ConfigError::at(n, "sizes needs lo hi pairs"));
        }
        w.sizes = v.chunks(2).map(|c| (c[0], c[1])).collect();
    }
    let sizes = w.sizes.len();
    if let Some(v) = floats(n, "sizeWeights", sizes)? {
        w.size_weights = v;
    }
    if let Some(v) = floats(n, "heavySizeWeights", sizes)? {
        w.heavy_size_weights = v;
    }
    w.comm_u = pair(n, "commU", w.comm_u)?;
    w.heavy_duration = pair(n, "heavyDuration", w.heavy_duration)?;
    w.heavy_per_day = n.float("heavyPerDay")?.unwrap_or(w.heavy_per_day);
    w.socket_jitter = n.float("socketJitter")?.unwrap_or(w.socket_jitter);
    if let Some(g) = floats(n, "gang", 2)? {
        if g.iter().any(|x| *x < 1.0 || x.fract() != 0.0) {
            return Err(ConfigError::at(n, "gang needs two positive integers"));
        }
        w.gang = (g[0] as usize, g[1] as usize);
    }
    w.validate().map_err(|e| ConfigError::at(n, e))?;
    Ok(w)
}

fn training_spec(
    n: &Node,
    plant: &PlantConfig,
    workload: &WorkloadConfig,
) -> Result<TrainingSpec, ConfigError> {
    n.check_keys(&[
        "seed",
        "nodes",
        "duration",
        "sample",
        "step",
        "blocks",
        "window",
        "horizon",
        "stride",
        "trees",
        "maxDepth",
        "minLeaf",
        "maxSamples",
    ])?;
    let d = TrainParams::default();
    let fd = ForestParams::default();
    let seed = n.int("seed")?.map_or(1001, |v| v as u64);
    let params = TrainParams {
        blocks: positive(n, "blocks", d.blocks as u64)? as usize,
        window: positive(n, "window", d.window as u64)? as usize,
        horizon: positive(n, "horizon", d.horizon as u64)? as usize,
        stride: positive(n, "stride", d.stride as u64)? as usize,
        forest: ForestParams {
            n_trees: positive(n, "trees", fd.n_trees as u64)? as usize,
            max_depth: positive(n, "maxDepth", fd.max_depth as u64)? as usize,
            min_leaf: positive(n, "minLeaf", fd.min_leaf as u64)? as usize,
            max_samples: Some(positive(
                n,
                "maxSamples",
                d.forest.max_samples.unwrap_or(20_000) as u64,
            )? as usize),
            ..d.forest
        },
    };
    Ok(TrainingSpec {
        dataset: DatasetSpec {
            plant: plant.clone(),
            workload: workload.clone(),
            seed,
            nodes: positive(n, "nodes", 16)? as usize,
            duration_s: positive(n, "duration", 86_400)?,
            interval_s: positive(n, "sample", 10)?,
            step_s: pair(n, "step", (300.0, 3600.0))?,
        },
        params,
        seed,
    })
}

fn single<'a>(config: &'a ConfigFile, kind: &'a str) -> Result<Option<&'a Node>, ConfigError> {
    let mut it = config.blocks(kind);
    let first = it.next();
    if let Some(extra) = it.next() {
        return Err(ConfigError::at(
            extra,
            format!("only one {kind} block is allowed"),
        ));
    }
    Ok(first)
}

impl ScenarioSpec {
    /// Parses and validates a scenario file. `seed` overrides the file's.
    pub fn parse(text: &str, seed: Option<u64>) -> Result<ScenarioSpec, ConfigError> {
        let config = ConfigFile::parse(text)?;
        let mut sc = config.blocks("scenario");
        let s = sc.next().ok_or(ConfigError {
            line: 1,
            col: 1,
            msg: "missing scenario block".into(),
        })?;
        if let Some(extra) = sc.next() {
            return Err(ConfigError::at(extra, "only one scenario block is allowed"));
        }
        s.check_keys(&[
            "seed",
            "duration",
            "sample",
            "controlInterval",
            "critical",
            "accel",
            "fixed",
        ])?;
        let seed = seed.unwrap_or(s.int("seed")?.map_or(1, |v| v as u64));
        let plant = plant_config(single(&config, "plant")?, seed)?;
        let workload = workload_config(single(&config, "workload")?)?;
        let training = single(&config, "training")?
            .map(|n| training_spec(n, &plant, &workload))
            .transpose()?;
        let fixed = s.float("fixed")?;
        if let Some(t) = fixed {
            if !(plant.t_min..=plant.t_max).contains(&t) {
                return Err(ConfigError::at(
                    s,
                    format!(
                        "fixed set temperature {t} outside [{}, {}]",
                        plant.t_min, plant.t_max
                    ),
                ));
            }
        }
        let accel = s.float("accel")?.unwrap_or(0.0);
        if !(accel >= 0.0 && accel.is_finite()) {
            return Err(ConfigError::at(s, "accel must be >= 0"));
        }
        let spec = ScenarioSpec {
            name: s.name().unwrap_or_else(|| "scenario".into()),
            seed,
            duration_s: positive(s, "duration", 86_400)?,
            sample_ms: positive(s, "sample", 10_000)?,
            control_ms: positive(s, "controlInterval", 60_000)?,
            critical: s.int("critical")?.unwrap_or(93_000),
            accel,
            fixed,
            plant,
            workload,
            training,
            config: config.clone(),
        };
        if !spec.control_ms.is_multiple_of(spec.sample_ms) {
            return Err(ConfigError::at(
                s,
                "controlInterval must be a multiple of sample",
            ));
        }
        if (spec.sample_ms as f64 / 1000.0) % spec.plant.dt != 0.0 {
            return Err(ConfigError::at(
                s,
                "sample must be a multiple of the plant step",
            ));
        }
        if spec.config.blocks("signature").next().is_some()
            != spec.config.blocks("regressor").next().is_some()
        {
            return Err(ConfigError::at(
                s,
                "signature and regressor blocks go together",
            ));
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path, seed: Option<u64>) -> Result<ScenarioSpec, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(ScenarioSpec::parse(&text, seed)?)
    }

    fn has_predictor(&self) -> bool {
        self.config.blocks("regressor").next().is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    pub cs: CsModel,
    pub forest: ForestModel,
}

/// Trains the models a scenario's training block describes.
pub fn train_for(spec: &TrainingSpec) -> Result<Models, ScenarioError> {
    let ds = generate_dataset(&spec.dataset)?;
    let (cs, forest, _) = train_models(&ds, &spec.params, spec.seed)?;
    Ok(Models { cs, forest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlTick {
    pub t_s: u64,
    /// Set temperature during the tick, before the agent runs.
    pub set_temp: f64,
    pub inlet: f64,
    pub ret: f64,
    pub flow: f64,
    pub hot_fraction: Option<f64>,
    /// Hottest measured component reading since the previous tick.
    pub peak_temp: Option<i64>,
    pub violation: bool,
    /// A health event was raised at this tick for a component temperature.
    pub event: bool,
    /// Set temperature right after the agent ran.
    pub set_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub name: String,
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
    pub critical: i64,
    pub ticks: Vec<ControlTick>,
    /// Predicted-temperature deciles per control tick, milli-degrees.
    pub pred_deciles: Vec<(u64, [i64; 11])>,
    /// Measured component temperatures in 1 °C bins: (lower edge, count).
    pub temp_hist: Vec<(i64, u64)>,
    /// Prediction/truth pairs, milli-degrees.
    pub predictions: Vec<(f64, f64)>,
    pub health_events: usize,
    pub knob_writes: usize,
}

pub const TRCU_BINS: usize = 10;
pub const BAND_MILLI: f64 = 5000.0;

impl ScenarioResult {
    /// Histogram of the set temperature over control ticks: equal bins over
    /// [t_min, t_max], the last one closed.
    pub fn trcu_hist(&self) -> Vec<(f64, f64, u64)> {
        let w = (self.t_max - self.t_min) / TRCU_BINS as f64;
        let mut counts = [0u64; TRCU_BINS];
        for t in &self.ticks {
            let i = (((t.set_temp - self.t_min) / w).floor().max(0.0) as usize).min(TRCU_BINS - 1);
            counts[i] += 1;
        }
        (0..TRCU_BINS)
            .map(|i| {
                (
                    self.t_min + i as f64 * w,
                    self.t_min + (i + 1) as f64 * w,
                    counts[i],
                )
            })
            .collect()
    }

    pub fn fraction_at(&self, t: f64) -> f64 {
        if self.ticks.is_empty() {
            return 0.0;
        }
        self.ticks
            .iter()
            .filter(|k| (k.set_temp - t).abs() < 1e-9)
            .count() as f64
            / self.ticks.len() as f64
    }

    /// Maximal runs of ticks below `t_max`.
    pub fn excursions(&self) -> usize {
        let mut n = 0;
        let mut below = false;
        for k in &self.ticks {
            let b = k.set_temp < self.t_max - 1e-9;
            if b && !below {
                n += 1;
            }
            below = b;
        }
        n
    }

    pub fn mean_flow(&self) -> f64 {
        self.ticks.iter().map(|k| k.flow).sum::<f64>() / self.ticks.len().max(1) as f64
    }

    pub fn mean_delta(&self) -> f64 {
        self.ticks.iter().map(|k| k.ret - k.inlet).sum::<f64>() / self.ticks.len().max(1) as f64
    }

    pub fn violations(&self) -> usize {
        self.ticks.iter().filter(|k| k.violation).count()
    }

    /// Violating ticks without both a health event and the minimum set
    /// temperature right after.
    pub fn unhandled(&self) -> usize {
        self.ticks
            .iter()
            .filter(|k| k.violation && !(k.event && (k.set_after - self.t_min).abs() < 1e-9))
            .count()
    }

    pub fn nrmse(&self) -> Option<f64> {
        let (p, t): (Vec<f64>, Vec<f64>) = self.predictions.iter().copied().unzip();
        nrmse(&p, &t)
    }

    pub fn nrmse_bands(&self) -> Vec<BandError> {
        let (p, t): (Vec<f64>, Vec<f64>) = self.predictions.iter().copied().unzip();
        nrmse_by_band(&p, &t, BAND_MILLI)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} seed {}", self.name, self.seed);
        let _ = writeln!(s, "control ticks {}", self.ticks.len());
        let _ = writeln!(s, "trcu histogram");
        for (lo, hi, n) in self.trcu_hist() {
            let _ = writeln!(s, "  [{lo:.1}, {hi:.1}) {n}");
        }
        let _ = writeln!(s, "fraction at t_max {:.4}", self.fraction_at(self.t_max));
        let _ = writeln!(s, "fraction at t_min {:.4}", self.fraction_at(self.t_min));
        let _ = writeln!(s, "excursions below t_max {}", self.excursions());
        let _ = writeln!(s, "mean flow {:.4}", self.mean_flow());
        let _ = writeln!(s, "mean return-inlet delta {:.4}", self.mean_delta());
        let _ = writeln!(s, "violations {}", self.violations());
        let _ = writeln!(s, "unhandled violations {}", self.unhandled());
        match self.nrmse() {
            Some(e) => {
                let _ = writeln!(
                    s,
                    "prediction nrmse {e:.5} over {} samples",
                    self.predictions.len()
                );
            }
            None => {
                let _ = writeln!(s, "prediction nrmse n/a");
            }
        }
        let _ = writeln!(s, "health events {}", self.health_events);
        let _ = writeln!(s, "knob writes {}", self.knob_writes);
        s
    }

    /// Writes one CSV per plotted quantity plus `summary.txt`.
    pub fn write_bundle(&self, dir: &Path) -> Result<(), ScenarioError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io_err(&p))
        };
        let series = |f: &dyn Fn(&ControlTick) -> Option<f64>| {
            let mut s = String::from("t_s,value\n");
            for k in &self.ticks {
                if let Some(v) = f(k) {
                    let _ = writeln!(s, "{},{v:.3}", k.t_s);
                }
            }
            s
        };
        write("set-temp.csv", series(&|k| Some(k.set_temp)))?;
        write("inlet-temp.csv", series(&|k| Some(k.inlet)))?;
        write("return-temp.csv", series(&|k| Some(k.ret)))?;
        write("flow.csv", series(&|k| Some(k.flow)))?;
        write("hot-fraction.csv", series(&|k| k.hot_fraction))?;
        let mut s = String::from("lo,hi,count\n");
        for (lo, hi, n) in self.trcu_hist() {
            let _ = writeln!(s, "{lo:.1},{hi:.1},{n}");
        }
        write("trcu-hist.csv", s)?;
        let mut s = String::from("t_s,d0,d1,d2,d3,d4,d5,d6,d7,d8,d9,d10\n");
        for (t, d) in &self.pred_deciles {
            let _ = write!(s, "{t}");
            for v in d {
                let _ = write!(s, ",{:.3}", *v as f64 / 1000.0);
            }
            s.push('\n');
        }
        write("pred-deciles.csv", s)?;
        let mut s = String::from("lo,count\n");
        for (lo, n) in &self.temp_hist {
            let _ = writeln!(s, "{lo},{n}");
        }
        write("temp-hist.csv", s)?;
        let mut s = String::from("lo,hi,count,nrmse\n");
        for b in self.nrmse_bands() {
            let lo = b.lo / 1000.0;
            let _ = writeln!(
                s,
                "{lo:.1},{:.1},{},{:.5}",
                lo + BAND_MILLI / 1000.0,
                b.count,
                b.nrmse
            );
        }
        write("nrmse-bands.csv", s)?;
        write("summary.txt", self.summary())
    }
}

/// Shared models handed to every node's in-band units.
struct Shared {
    cs: ops::SharedCs,
    forest: ops::SharedForest,
}

fn node_pusher(
    spec: &ScenarioSpec,
    plant: &SharedPlant,
    node: usize,
    agent: &Arc<Agent>,
    clock: &SharedClock,
    health: &HealthLog,
    shared: Option<&Shared>,
) -> Result<Pusher<LocalLink>, ScenarioError> {
    let prefix = spec.plant.node_topic(node);
    let publisher = Publisher::new(LocalLink(agent.clone()), clock.clone(), 8 << 20);
    let mut p = Pusher::new(
        prefix,
        Arc::new(SensorCache::new()),
        publisher,
        health.clone(),
    );
    p.add_plugin(Box::new(PlantSource::local(
        plant.clone(),
        PlantPart::Node(node),
        spec.sample_ms,
    )))
    .map_err(ScenarioError::Invalid)?;
    if let Some(sh) = shared {
        let root = format!(
            "/{}",
            spec.plant.node_topic(node).label(0).unwrap_or_default()
        );
        let ctx = BuildCtx::new(&root, p.inventory())?;
        let mut reg = PluginRegistry::new();
        let cs = sh.cs.clone();
        reg.register("signature", move |n, c| {
            ops::build_signature(n, c, Some(cs.clone()))
        });
        let forest = sh.forest.clone();
        reg.register("regressor", move |n, c| {
            ops::build_regressor(n, c, Some(forest.clone()))
        });
        let units = load_units(&spec.config, &reg, &ctx)?;
        let local: Vec<Topic> = units
            .iter()
            .filter(|u| u.spec.outputs.iter().any(|t| t.name().starts_with("cs-")))
            .flat_map(|u| u.spec.outputs.clone())
            .collect();
        p.mark_local(local);
        p.scheduler_mut().extend(units);
    }
    Ok(p)
}

fn temp_bin(v: i64) -> i64 {
    v.div_euclid(1000)
}

/// Runs a scenario. `models` skips training; otherwise the training block
/// is used when prediction units are configured.
pub fn run_scenario(
    spec: &ScenarioSpec,
    models: Option<&Models>,
) -> Result<ScenarioResult, ScenarioError> {
    let cfg = spec.plant.clone();
    let mut plant_cfg = cfg.clone();
    if let Some(t) = spec.fixed {
        plant_cfg.initial_set_temp = t;
    }
    let plant: SharedPlant = Arc::new(Mutex::new(Plant::new(plant_cfg)?));
    let schedule = generate_workload(
        &spec.workload,
        cfg.nodes,
        cfg.sockets,
        spec.seed,
        spec.duration_s as f64,
    )
    .map_err(ScenarioError::Invalid)?;
    let vclock = VirtualClock::new(0);
    let clock: SharedClock = Arc::new(vclock.clone());
    let health = HealthLog::new();
    let agent = Arc::new(Agent::new(Arc::new(SensorCache::new())));

    let trained;
    let models = match (models, spec.has_predictor()) {
        (_, false) => None,
        (Some(m), true) => Some(m),
        (None, true) => {
            let t = spec.training.as_ref().ok_or_else(|| {
                ScenarioError::Invalid("prediction units need a training block or models".into())
            })?;
            trained = train_for(t)?;
            Some(&trained)
        }
    };
    let shared = models.map(|m| Shared {
        cs: Arc::new(RwLock::new(m.cs.clone())),
        forest: Arc::new(RwLock::new(m.forest.clone())),
    });

    let mut pushers = Vec::with_capacity(cfg.nodes + 1);
    for n in 0..cfg.nodes {
        pushers.push(node_pusher(
            spec,
            &plant,
            n,
            &agent,
            &clock,
            &health,
            shared.as_ref(),
        )?);
    }
    let mut rcu_pusher = Pusher::new(
        cfg.rcu_topic(),
        Arc::new(SensorCache::new()),
        Publisher::new(LocalLink(agent.clone()), clock.clone(), 1 << 20),
        health.clone(),
    );
    rcu_pusher
        .add_plugin(Box::new(PlantSource::local(
            plant.clone(),
            PlantPart::Rcu,
            spec.sample_ms,
        )))
        .map_err(ScenarioError::Invalid)?;

    // agent side: controller and health checks over everything published
    let mut inventory = plant.lock().inventory();
    let mut pred_topics = Vec::new();
    for p in &pushers {
        for u in p.scheduler().units() {
            pred_topics.extend(
                u.spec
                    .outputs
                    .iter()
                    .filter(|t| !t.name().starts_with("cs-"))
                    .cloned(),
            );
        }
    }
    inventory.extend(pred_topics.iter().cloned());
    let root = format!("/{}", cfg.rcu_topic().label(0).unwrap_or_default());
    let ctx = BuildCtx::new(&root, inventory)?;
    let knob_log: KnobLog = Arc::default();
    let mut reg = PluginRegistry::new();
    if spec.fixed.is_none() {
        let log = knob_log.clone();
        let plant_k = plant.clone();
        reg.register("controller", move |n, c| {
            let knob = |_: &Topic| -> Box<dyn Knob> { Box::new(LocalKnob(plant_k.clone())) };
            ctl::build(n, c, &knob, &log)
        });
    }
    reg.register("healthchecker", health::build);
    let units = load_units(&spec.config, &reg, &ctx)?;
    for u in &units {
        if spec
            .config
            .blocks("controller")
            .any(|b| b.name().as_deref() == Some(u.name()))
            && u.spec.interval_ms != spec.control_ms
        {
            return Err(ScenarioError::Invalid(format!(
                "controller {} runs every {} ms but controlInterval is {} ms",
                u.name(),
                u.spec.interval_ms,
                spec.control_ms
            )));
        }
    }
    let mut agent_sched = Scheduler::new(
        DataView::new(agent.cache().clone(), None),
        agent.clone(),
        health.clone(),
    );
    agent_sched.extend(units);

    for p in &mut pushers {
        p.arm(0);
    }
    rcu_pusher.arm(0);
    agent_sched.arm(0);

    let comp_temps: Vec<Topic> = (0..cfg.nodes)
        .flat_map(|n| (0..cfg.sockets).map(move |s| (n, s)))
        .map(|(n, s)| cfg.socket_topic(n, s).child("temp").expect("valid label"))
        .collect();
    // prediction sensor of each component, if one is produced
    let pred_of: Vec<Option<Topic>> = comp_temps
        .iter()
        .map(|t| {
            pred_topics
                .iter()
                .find(|p| p.parent() == t.parent())
                .cloned()
        })
        .collect();
    let comp_set: std::collections::HashSet<&Topic> = comp_temps.iter().collect();
    let hot_topic = cfg.rcu_topic().child("hot-fraction").expect("valid label");
    let horizon = models.map_or(0, |m| m.forest.horizon.max(1));

    let steps_per_sample = ((spec.sample_ms as f64 / 1000.0) / cfg.dt).round() as u64;
    let samples_per_control = spec.control_ms / spec.sample_ms;
    let total_samples = spec.duration_s * 1000 / spec.sample_ms;
    let mut step = 0u64;
    let mut ticks = Vec::new();
    let mut pred_deciles = Vec::new();
    let mut temp_hist = std::collections::BTreeMap::<i64, u64>::new();
    let mut peak_since: Option<i64> = None;
    // per component: recent measured temperatures and pending predictions
    let mut history: Vec<VecDeque<i64>> = vec![VecDeque::new(); comp_temps.len()];
    let mut pending: Vec<VecDeque<(u64, i64)>> = vec![VecDeque::new(); comp_temps.len()];
    let mut predictions = Vec::new();
    let wall = Instant::now();

    for k in 1..=total_samples {
        for _ in 0..steps_per_sample {
            step += 1;
            let t = step as f64 * cfg.dt;
            let mut p = plant.lock();
            apply_workload(&mut p, &schedule, t);
            p.step()?;
        }
        let now = k * spec.sample_ms * NS_PER_MS;
        vclock.set(now);
        for p in &mut pushers {
            p.tick(now);
        }
        rcu_pusher.tick(now);

        let cache = agent.cache();
        for (c, t) in comp_temps.iter().enumerate() {
            let v = match cache.latest(t) {
                Some((ts, v)) if ts == now => v,
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "{t} not delivered at {now}"
                    )))
                }
            };
            *temp_hist.entry(temp_bin(v)).or_default() += 1;
            peak_since = Some(peak_since.map_or(v, |p| p.max(v)));
            // resolve predictions whose horizon has now fully elapsed
            let h = &mut history[c];
            h.push_back(v);
            if h.len() > horizon.max(1) {
                h.pop_front();
            }
            if let Some(&(at, pv)) = pending[c].front() {
                if horizon > 0 && k == at + horizon as u64 {
                    let truth = h.iter().copied().max().expect("non-empty");
                    predictions.push((pv as f64, truth as f64));
                    pending[c].pop_front();
                }
            }
            if let Some(pt) = &pred_of[c] {
                if let Some((ts, pv)) = cache.latest(pt) {
                    if ts == now {
                        pending[c].push_back((k, pv));
                    }
                }
            }
        }

        if k % samples_per_control == 0 {
            let before = plant.lock().rcu;
            let events_before = health.len();
            agent_sched.run_due(now);
            let new_events = health.events()[events_before..].to_vec();
            let event = new_events.iter().any(|e| {
                e.timestamp == now && e.topic.as_ref().is_some_and(|t| comp_set.contains(t))
            });
            let hot_fraction = cache
                .latest(&hot_topic)
                .filter(|(ts, _)| *ts == now)
                .map(|(_, v)| v as f64 / 1000.0);
            let fresh: Vec<i64> = pred_topics
                .iter()
                .filter_map(|t| {
                    cache
                        .latest(t)
                        .filter(|(ts, _)| ts + spec.control_ms * NS_PER_MS > now)
                })
                .map(|(_, v)| v)
                .collect();
            if let Some(d) = deciles(&fresh) {
                pred_deciles.push((now / NS_PER_S, d));
            }
            let peak = peak_since.take();
            ticks.push(ControlTick {
                t_s: now / NS_PER_S,
                set_temp: before.set_temp,
                inlet: before.inlet,
                ret: before.ret,
                flow: before.flow,
                hot_fraction,
                peak_temp: peak,
                violation: peak.is_some_and(|p| p >= spec.critical),
                event,
                set_after: plant.lock().rcu.set_temp,
            });
        }

        if spec.accel > 0.0 {
            let target = Duration::from_secs_f64(now as f64 / NS_PER_S as f64 / spec.accel);
            if let Some(wait) = target.checked_sub(wall.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }

    let knob_writes = knob_log.lock().len();
    Ok(ScenarioResult {
        name: spec.name.clone(),
        seed: spec.seed,
        t_min: cfg.t_min,
        t_max: cfg.t_max,
        critical: spec.critical,
        ticks,
        pred_deciles,
        temp_hist: temp_hist.into_iter().collect(),
        predictions,
        health_events: health.len(),
        knob_writes,
    })
}
