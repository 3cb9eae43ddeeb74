use std::path::Path;

use odapipe::agentd::{check_agent_config, AgentdError};
use odapipe::config::ConfigFile;
use odapipe::plant::model::{Plant, PlantConfig};
use odapipe::pusher::config::PusherConfig;
use odapipe::Topic;

use crate::fail::{data, Classify, Res};
use crate::sim::load_scenario;
use crate::ValidateArgs;

/// A simulated rack's sensors plus one `temp-p` prediction per socket.
pub fn rack_inventory(nodes: usize) -> Res<Vec<Topic>> {
    let cfg = PlantConfig {
        nodes,
        ..Default::default()
    };
    let plant = Plant::new(cfg.clone()).data()?;
    let mut inv = plant.inventory();
    for n in 0..cfg.nodes {
        for s in 0..cfg.sockets {
            inv.push(cfg.socket_topic(n, s).child("temp-p").data()?);
        }
    }
    inv.sort();
    Ok(inv)
}

fn read_inventory(path: &Path) -> Res<Vec<Topic>> {
    let text = std::fs::read_to_string(path).env_ctx(&format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| Topic::parse(l).map_err(|e| data(format!("{}: {l:?}: {e}", path.display()))))
        .collect()
}

pub fn run(a: &ValidateArgs) -> Res<()> {
    let text =
        std::fs::read_to_string(&a.config).env_ctx(&format!("reading {}", a.config.display()))?;
    let file = ConfigFile::parse(&text)
        .map_err(|e| data(format!("{}:{}: {}", a.config.display(), e.line, e.msg)))?;
    let has = |k: &str| file.blocks(k).next().is_some();
    if has("scenario") {
        let spec = load_scenario(&a.config, None)?;
        println!(
            "scenario {}: {} nodes, {} s, sample {} ms, control {} ms, training {}",
            spec.name,
            spec.plant.nodes,
            spec.duration_s,
            spec.sample_ms,
            spec.control_ms,
            if spec.training.is_some() { "yes" } else { "no" }
        );
        return Ok(());
    }
    if has("pusher") {
        let pc = PusherConfig::from_file(&file, None)
            .map_err(|e| data(format!("{}:{}: {}", a.config.display(), e.line, e.msg)))?;
        println!("pusher {} -> {}", pc.prefix, pc.agent);
        return Ok(());
    }
    if has("agent") {
        let inventory = match (&a.inventory, a.plant_nodes) {
            (Some(p), _) => read_inventory(p)?,
            (None, Some(n)) => rack_inventory(n)?,
            (None, None) => Vec::new(),
        };
        let (cfg, units) = check_agent_config(&text, inventory).map_err(|e| match e {
            AgentdError::Config(c) => data(format!("{}:{}: {}", a.config.display(), c.line, c.msg)),
            other => data(other),
        })?;
        println!("agent {} with {} units", cfg.listen, units.len());
        for u in &units {
            println!(
                "  {} inputs {} outputs {} interval {} ms",
                u.name(),
                u.spec.inputs.len(),
                u.spec.outputs.len(),
                u.spec.interval_ms
            );
        }
        return Ok(());
    }
    Err(data(format!(
        "{}: no scenario, agent or pusher block",
        a.config.display()
    )))
}
