//! Collect-agent daemon assembled from a configuration file:
//!
//! ```text
//! agent {
//!   listen       "127.0.0.1:18830"
//!   dataDir      "/var/lib/odapipe"
//!   ttl          2592000
//!   flush        1000
//!   queue        1024
//!   root         "/deepest"
//!   plant        "127.0.0.1:18831"
//!   resolveDelay 30000
//!   control      "127.0.0.1:18832"
//! }
//! controller cm-control { ... }
//! healthchecker safety { ... }
//! smoothing s5 { ... }
//! jobaggregator ja1 { ... }
//! derive perf { ... }
//! ```
//!
//! Without `dataDir` the agent keeps a cache only. Out-of-band units are
//! resolved against the topics seen during the first `resolveDelay`
//! milliseconds; controllers write their knob through `plant`. `control`
//! opens the line-oriented unit control endpoint.

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::cache::SensorCache;
use crate::clock::SharedClock;
use crate::config::{ConfigError, ConfigFile};
use crate::odac::control::{self as ctl, Knob, KnobLog};
use crate::odac::health;
use crate::odav;
use crate::operator::control::ControlServer;
use crate::operator::loader::{load_units, BuildCtx, PluginRegistry};
use crate::operator::{DataView, HealthLog, OperatorUnit, Scheduler, SchedulerHandle};
use crate::plant::endpoint::TcpKnob;
use crate::storage::store::{Store, StoreConfig, StoreError};
use crate::topic::Topic;
use crate::transport::broker::{Agent, StorageWriter};
use crate::transport::server::{AgentHandler, Server, DEFAULT_PORT};

#[derive(Debug, Error)]
pub enum AgentdError {
    #[error("config line {}: {}", .0.line, .0.msg)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Listen {
        addr: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentdConfig {
    pub listen: String,
    pub data_dir: Option<PathBuf>,
    pub ttl_s: u64,
    pub flush_ms: u64,
    /// Storage ingest queue depth, in batches.
    pub queue: usize,
    pub root: String,
    /// Knob endpoint for controllers.
    pub plant: Option<String>,
    pub resolve_delay_ms: u64,
    pub control: Option<String>,
}

impl AgentdConfig {
    pub fn from_file(cfg: &ConfigFile) -> Result<Self, ConfigError> {
        let mut blocks = cfg.blocks("agent");
        let node = blocks.next().ok_or(ConfigError {
            line: 1,
            col: 1,
            msg: "missing agent block".into(),
        })?;
        if let Some(extra) = blocks.next() {
            return Err(ConfigError::at(extra, "only one agent block is allowed"));
        }
        node.check_keys(&[
            "listen",
            "dataDir",
            "ttl",
            "flush",
            "queue",
            "root",
            "plant",
            "resolveDelay",
            "control",
        ])?;
        let non_neg = |k: &str, v: Option<i64>, d: u64| -> Result<u64, ConfigError> {
            match v {
                Some(x) if x < 0 => Err(ConfigError::at(node, format!("{k} must not be negative"))),
                Some(x) => Ok(x as u64),
                None => Ok(d),
            }
        };
        let flush_ms = non_neg("flush", node.int("flush")?, 1000)?;
        let queue = non_neg("queue", node.int("queue")?, 1024)? as usize;
        if flush_ms == 0 || queue == 0 {
            return Err(ConfigError::at(node, "flush and queue must be positive"));
        }
        Ok(AgentdConfig {
            listen: node
                .text("listen")?
                .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}")),
            data_dir: node.text("dataDir")?.map(PathBuf::from),
            ttl_s: non_neg("ttl", node.int("ttl")?, 30 * 24 * 3600)?,
            flush_ms,
            queue,
            root: node.text("root")?.unwrap_or_else(|| "/deepest".into()),
            plant: node.text("plant")?,
            resolve_delay_ms: non_neg("resolveDelay", node.int("resolveDelay")?, 30_000)?,
            control: node.text("control")?,
        })
    }
}

/// Factories for every out-of-band operator kind an agent runs.
pub fn agent_registry(
    plant: Option<String>,
    store: Option<Arc<Store>>,
    knobs: KnobLog,
) -> PluginRegistry {
    let mut reg = PluginRegistry::new();
    reg.register("controller", move |n, c| {
        let addr = plant.clone().ok_or_else(|| {
            crate::config::ConfigError::at(n, "controller needs a plant address in the agent block")
        })?;
        let knob = |_: &Topic| -> Box<dyn Knob> { Box::new(TcpKnob::new(&addr)) };
        ctl::build(n, c, &knob, &knobs)
    });
    reg.register("healthchecker", health::build);
    reg.register("smoothing", move |n, c| {
        odav::smooth::build(n, c, store.as_ref())
    });
    reg.register("jobaggregator", odav::jobs::build);
    reg.register("derive", odav::derive::build);
    reg
}

/// Parses and resolves every operator block against `inventory` without
/// starting anything. Used for config validation.
pub fn check_agent_config(
    text: &str,
    inventory: Vec<Topic>,
) -> Result<(AgentdConfig, Vec<OperatorUnit>), AgentdError> {
    let file = ConfigFile::parse(text)?;
    let cfg = AgentdConfig::from_file(&file)?;
    let ctx = BuildCtx::new(&cfg.root, inventory)?;
    let reg = agent_registry(cfg.plant.clone(), None, KnobLog::default());
    let units = load_units(&file, &reg, &ctx)?;
    Ok((cfg, units))
}

pub struct RunningAgent {
    pub config: AgentdConfig,
    file: ConfigFile,
    agent: Arc<Agent>,
    server: Option<Server>,
    writer: Option<StorageWriter>,
    store: Option<Arc<Store>>,
    scheduler: Option<(Arc<Scheduler>, SchedulerHandle)>,
    control: Option<ControlServer>,
    health: HealthLog,
    knobs: KnobLog,
    clock: SharedClock,
}

impl RunningAgent {
    /// Opens the store and starts listening. Operators start with
    /// [`RunningAgent::start_operators`].
    pub fn start(text: &str, clock: SharedClock) -> Result<Self, AgentdError> {
        let file = ConfigFile::parse(text)?;
        let config = AgentdConfig::from_file(&file)?;
        let cache = Arc::new(SensorCache::new());
        let (agent, writer, store) = match &config.data_dir {
            Some(dir) => {
                let mut sc = StoreConfig::new(dir);
                sc.default_ttl_s = config.ttl_s;
                sc.flush_interval_ms = config.flush_ms;
                let store = Arc::new(Store::open(sc, clock.clone())?);
                let (agent, writer) = Agent::with_store_queue(cache, store.clone(), config.queue);
                (agent, Some(writer), Some(store))
            }
            None => (Agent::new(cache), None, None),
        };
        let agent = Arc::new(agent);
        let server = Server::bind(
            &config.listen,
            Arc::new(AgentHandler {
                agent: agent.clone(),
            }),
        )
        .map_err(|source| AgentdError::Listen {
            addr: config.listen.clone(),
            source,
        })?;
        Ok(RunningAgent {
            config,
            file,
            agent,
            server: Some(server),
            writer,
            store,
            scheduler: None,
            control: None,
            health: HealthLog::new(),
            knobs: KnobLog::default(),
            clock,
        })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.server.as_ref().expect("running").local_addr()
    }

    /// Bound address of the unit control endpoint, once operators run.
    pub fn control_addr(&self) -> Option<std::net::SocketAddr> {
        self.control.as_ref().map(|c| c.local_addr())
    }

    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }

    pub fn store(&self) -> Option<&Arc<Store>> {
        self.store.as_ref()
    }

    pub fn health(&self) -> &HealthLog {
        &self.health
    }

    /// Every topic seen so far, from the cache and the store.
    pub fn inventory(&self) -> Vec<Topic> {
        let mut inv = self.agent.cache().topics();
        if let Some(s) = &self.store {
            inv.extend(s.topics());
        }
        inv.sort();
        inv.dedup();
        inv
    }

    /// Resolves the operator blocks against the current inventory and runs
    /// them on wall-clock threads. Returns the unit names.
    pub fn start_operators(&mut self) -> Result<Vec<String>, AgentdError> {
        let ctx = BuildCtx::new(&self.config.root, self.inventory())?;
        let reg = agent_registry(
            self.config.plant.clone(),
            self.store.clone(),
            self.knobs.clone(),
        );
        let units = load_units(&self.file, &reg, &ctx)?;
        let names = units.iter().map(|u| u.name().to_string()).collect();
        let mut sched = Scheduler::new(
            DataView::new(self.agent.cache().clone(), self.store.clone()),
            self.agent.clone(),
            self.health.clone(),
        );
        sched.extend(units);
        let sched = Arc::new(sched);
        let handle = sched.spawn(self.clock.clone());
        self.control = None;
        if let Some(addr) = &self.config.control {
            let cs =
                ControlServer::bind(addr, sched.clone(), self.clock.clone()).map_err(|source| {
                    AgentdError::Listen {
                        addr: addr.clone(),
                        source,
                    }
                })?;
            self.control = Some(cs);
        }
        if let Some((_, old)) = self.scheduler.replace((sched, handle)) {
            old.stop();
        }
        Ok(names)
    }

    /// Flushes pending data and drops expired segments.
    pub fn housekeeping(&self) -> Result<(), StoreError> {
        if let Some(s) = &self.store {
            s.maybe_flush()?;
            s.expire(self.clock.now_ns());
        }
        Ok(())
    }

    /// Stops operators and the listener, then drains the storage queue.
    pub fn shutdown(mut self) -> Result<(), StoreError> {
        self.control = None;
        if let Some((_, h)) = self.scheduler.take() {
            h.stop();
        }
        if let Some(s) = self.server.take() {
            s.shutdown();
        }
        let writer = self.writer.take();
        let store = self.store.take();
        drop(self);
        if let Some(w) = writer {
            w.join()?;
        }
        if let Some(s) = store {
            s.flush()?;
        }
        Ok(())
    }
}
