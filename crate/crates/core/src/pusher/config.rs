//! Builds a pusher from a configuration file:
//!
//! ```text
//! pusher {
//!   prefix       "/deepest/cm/s00"
//!   agent        "127.0.0.1:18830"
//!   bufferBytes  4194304
//!   failureAlert 5
//! }
//! file mem {
//!   path     "/proc/meminfo"
//!   kind     meminfo
//!   interval 10000
//!   sensor MemFree { name mem-free }
//!   sensor Cached  { name cached  localOnly true }
//! }
//! file cpu0 {
//!   path "/proc/stat"
//!   kind stat
//!   line cpu0
//!   sensor user   { name cpu0-user }
//!   sensor system { name cpu0-system }
//! }
//! plantsource cm {
//!   endpoint "127.0.0.1:18831"
//!   interval 10000
//! }
//! ```
//!
//! Sensor names are relative to the node prefix, which the environment
//! variable `ODAPIPE_NODE_PREFIX` overrides. `signature`, `regressor` and
//! `derive` blocks become in-band operator units; signature outputs stay
//! local.

use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::cache::SensorCache;
use crate::clock::SharedClock;
use crate::config::{ConfigError, ConfigFile, Node};
use crate::odac::ops;
use crate::odav;
use crate::operator::loader::{load_units, BuildCtx, PluginRegistry};
use crate::operator::HealthLog;
use crate::pusher::file::{FileSource, ParserKind};
use crate::pusher::plant::PlantSource;
use crate::pusher::{Pusher, SensorDecl, DEFAULT_FAILURE_ALERT};
use crate::topic::Topic;
use crate::transport::client::{Publisher, TcpLink};
use crate::transport::server::DEFAULT_PORT;

pub const PREFIX_ENV: &str = "ODAPIPE_NODE_PREFIX";

#[derive(Debug, Clone, PartialEq)]
pub struct PusherConfig {
    pub prefix: Topic,
    pub agent: String,
    pub buffer_bytes: usize,
    pub failure_alert: u32,
    /// Root that in-band sensor expressions navigate from.
    pub root: String,
}

impl PusherConfig {
    pub fn from_file(cfg: &ConfigFile, prefix_override: Option<&str>) -> Result<Self, ConfigError> {
        let mut blocks = cfg.blocks("pusher");
        let node = blocks.next().ok_or(ConfigError {
            line: 1,
            col: 1,
            msg: "missing pusher block".into(),
        })?;
        if let Some(extra) = blocks.next() {
            return Err(ConfigError::at(extra, "only one pusher block is allowed"));
        }
        node.check_keys(&["prefix", "agent", "bufferBytes", "failureAlert", "root"])?;
        let prefix_text = match prefix_override {
            Some(p) => p.to_string(),
            None => node.req_text("prefix")?,
        };
        let prefix = Topic::parse(&prefix_text)
            .map_err(|e| ConfigError::at(node, format!("prefix: {e}")))?;
        let buffer_bytes = node.int("bufferBytes")?.unwrap_or(4 << 20);
        if buffer_bytes <= 0 {
            return Err(ConfigError::at(node, "bufferBytes must be positive"));
        }
        let root = match node.text("root")? {
            Some(r) => r,
            None => format!("/{}", prefix.label(0).unwrap_or_default()),
        };
        Ok(PusherConfig {
            agent: node
                .text("agent")?
                .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}")),
            buffer_bytes: buffer_bytes as usize,
            failure_alert: node
                .int("failureAlert")?
                .map_or(DEFAULT_FAILURE_ALERT, |v| v.max(1) as u32),
            prefix,
            root,
        })
    }
}

fn sensor_decls(block: &Node, prefix: &Topic) -> Result<Vec<(String, SensorDecl)>, ConfigError> {
    let mut out = Vec::new();
    for s in block.all("sensor") {
        s.check_keys(&["name", "localOnly"])?;
        let key = s
            .name()
            .ok_or_else(|| ConfigError::at(s, "sensor needs a key"))?;
        let name = s.text("name")?.unwrap_or_else(|| key.to_lowercase());
        let topic = prefix
            .child(&name)
            .map_err(|e| ConfigError::at(s, format!("sensor name: {e}")))?;
        let decl = SensorDecl {
            topic,
            local_only: s.boolean("localOnly")?.unwrap_or(false),
        };
        out.push((key, decl));
    }
    if out.is_empty() {
        return Err(ConfigError::at(block, "no sensors declared"));
    }
    Ok(out)
}

/// Builds a pusher publishing over TCP. `prefix_override` usually comes
/// from [`PREFIX_ENV`].
pub fn build_pusher(
    text: &str,
    prefix_override: Option<&str>,
    clock: SharedClock,
) -> Result<(PusherConfig, Pusher<TcpLink>), ConfigError> {
    let cfg = ConfigFile::parse(text)?;
    let pc = PusherConfig::from_file(&cfg, prefix_override)?;
    let link = TcpLink::new(pc.agent.clone(), pc.prefix.to_string());
    let publisher = Publisher::new(link, clock, pc.buffer_bytes);
    let mut p = Pusher::new(
        pc.prefix.clone(),
        Arc::new(SensorCache::new()),
        publisher,
        HealthLog::new(),
    )
    .with_failure_alert(pc.failure_alert);
    for node in &cfg.nodes {
        let name = node.name().unwrap_or_else(|| node.key.clone());
        match node.key.as_str() {
            "file" => {
                node.check_keys(&["path", "kind", "line", "interval", "sensor"])?;
                let kind: ParserKind = node
                    .req_text("kind")?
                    .parse()
                    .map_err(|e: String| ConfigError::at(node, e))?;
                let line = node.text("line")?.unwrap_or_else(|| "cpu".into());
                let src = FileSource::new(
                    &name,
                    PathBuf::from(node.req_text("path")?),
                    kind,
                    &line,
                    sensor_decls(node, &pc.prefix)?,
                    node.int("interval")?.map_or(10_000, |v| v.max(1) as u64),
                );
                p.add_plugin(Box::new(src))
                    .map_err(|e| ConfigError::at(node, e))?;
            }
            "plantsource" => {
                node.check_keys(&["endpoint", "interval"])?;
                let src = PlantSource::tcp(
                    &node.req_text("endpoint")?,
                    &pc.prefix,
                    node.int("interval")?.map_or(10_000, |v| v.max(1) as u64),
                )
                .map_err(|e| ConfigError::at(node, e))?
                .named(&name);
                p.add_plugin(Box::new(src))
                    .map_err(|e| ConfigError::at(node, e))?;
            }
            _ => {}
        }
    }
    let ctx = BuildCtx::new(&pc.root, p.inventory())?;
    let local: Arc<Mutex<Vec<Topic>>> = Arc::default();
    let mut reg = PluginRegistry::new();
    {
        let local = local.clone();
        reg.register("signature", move |n, c| {
            let built = ops::build_signature(n, c, None)?;
            local
                .lock()
                .extend(built.iter().flat_map(|b| b.spec.outputs.iter().cloned()));
            Ok(built)
        });
    }
    reg.register("regressor", |n, c| ops::build_regressor(n, c, None));
    reg.register("derive", odav::derive::build);
    let units = load_units(&cfg, &reg, &ctx)?;
    p.mark_local(local.lock().drain(..));
    p.scheduler_mut().extend(units);
    Ok((pc, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;

    #[test]
    fn builds_file_plugins_with_prefix_override() {
        let dir = tempfile::tempdir().unwrap();
        let mem = dir.path().join("meminfo");
        std::fs::write(&mem, "MemFree: 4096 kB\nCached: 1 kB\n").unwrap();
        let text = format!(
            "pusher {{\n prefix \"/r/n0\"\n agent \"127.0.0.1:1\"\n}}\nfile mem {{\n path \"{}\"\n kind meminfo\n sensor MemFree {{\n name mem-free\n }}\n sensor Cached {{\n localOnly true\n }}\n}}\n",
            mem.display()
        );
        let clock: SharedClock = Arc::new(VirtualClock::new(0));
        let (pc, mut p) = build_pusher(&text, Some("/r/n7"), clock).unwrap();
        assert_eq!(pc.prefix.as_str(), "/r/n7");
        assert_eq!(
            p.inventory(),
            vec![
                Topic::parse("/r/n7/cached").unwrap(),
                Topic::parse("/r/n7/mem-free").unwrap()
            ]
        );
        p.arm(0);
        p.tick(10_000_000_000);
        assert_eq!(
            p.cache()
                .latest(&Topic::parse("/r/n7/mem-free").unwrap())
                .unwrap()
                .1,
            4_194_304
        );
        // the agent is unreachable: the reading stays buffered
        assert!(p.publisher_stats().buffered >= 1);
    }

    #[test]
    fn rejects_bad_kind() {
        let text =
            "pusher {\n prefix \"/r/n0\"\n}\nfile x {\n path \"/x\"\n kind json\n sensor a\n}\n";
        let clock: SharedClock = Arc::new(VirtualClock::new(0));
        let err = build_pusher(text, None, clock).err().unwrap();
        assert!(err.msg.contains("unknown file kind"));
    }
}
