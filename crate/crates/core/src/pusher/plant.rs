//! Sampler reading a simulated plant, in-process or over its TCP endpoint.

use crate::plant::endpoint::{read_plant, SharedPlant};
use crate::pusher::{SamplerPlugin, SensorDecl};
use crate::reading::Reading;
use crate::topic::Topic;
use crate::transport::SubscriptionPattern;

/// What part of the plant a source samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantPart {
    Node(usize),
    Rcu,
}

enum Backend {
    Local(SharedPlant, PlantPart),
    Tcp(String, SubscriptionPattern),
}

pub struct PlantSource {
    name: String,
    backend: Backend,
    sensors: Vec<SensorDecl>,
    interval_ms: u64,
}

impl PlantSource {
    pub fn local(plant: SharedPlant, part: PlantPart, interval_ms: u64) -> Self {
        let topics: Vec<Topic> = {
            let p = plant.lock();
            match part {
                PlantPart::Node(n) => p.node_readings(n, 0),
                PlantPart::Rcu => p.rcu_readings(0),
            }
            .into_iter()
            .map(|r| r.topic)
            .collect()
        };
        PlantSource {
            name: "plant".into(),
            backend: Backend::Local(plant, part),
            sensors: topics.into_iter().map(SensorDecl::new).collect(),
            interval_ms,
        }
    }

    /// Samples every plant sensor under `prefix`; the sensor list is taken
    /// from one query at construction.
    pub fn tcp(addr: &str, prefix: &Topic, interval_ms: u64) -> Result<Self, String> {
        let pattern =
            SubscriptionPattern::parse(&format!("{prefix}/#")).map_err(|e| e.to_string())?;
        let found = read_plant(addr, &pattern).map_err(|e| e.to_string())?;
        if found.is_empty() {
            return Err(format!("plant at {addr} has no sensors under {prefix}"));
        }
        Ok(PlantSource {
            name: "plant".into(),
            sensors: found
                .into_iter()
                .map(|r| SensorDecl::new(r.topic))
                .collect(),
            backend: Backend::Tcp(addr.to_string(), pattern),
            interval_ms,
        })
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

impl SamplerPlugin for PlantSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn sensors(&self) -> Vec<SensorDecl> {
        self.sensors.clone()
    }

    fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    fn sample(&mut self, ts: u64) -> Result<Vec<Reading>, String> {
        match &self.backend {
            Backend::Local(plant, part) => {
                let p = plant.lock();
                Ok(match part {
                    PlantPart::Node(n) => p.node_readings(*n, ts),
                    PlantPart::Rcu => p.rcu_readings(ts),
                })
            }
            Backend::Tcp(addr, pattern) => {
                // the endpoint stamps its own clock; ours governs the cache
                let rs = read_plant(addr, pattern).map_err(|e| e.to_string())?;
                Ok(rs
                    .into_iter()
                    .map(|r| Reading::new(r.topic, ts, r.value))
                    .collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::model::{Plant, PlantConfig};
    use parking_lot::Mutex;
    use std::sync::Arc;

    #[test]
    fn rcu_source_gives_four_readings() {
        let plant = Arc::new(Mutex::new(
            Plant::new(PlantConfig {
                nodes: 1,
                ..Default::default()
            })
            .unwrap(),
        ));
        plant.lock().rcu.inlet = 38.5;
        let mut s = PlantSource::local(plant, PlantPart::Rcu, 10_000);
        let rs = s.sample(5).unwrap();
        assert_eq!(rs.len(), 4);
        assert!(rs
            .iter()
            .any(|r| r.topic.name() == "inlet-temp" && r.value == 38_500));
        assert_eq!(s.sensors().len(), 4);
    }
}
