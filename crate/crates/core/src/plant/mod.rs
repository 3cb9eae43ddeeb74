//! Simulated rack: cooling unit, node thermals, workload and the closed-loop
//! scenario runner.

pub mod dataset;
pub mod endpoint;
pub mod model;
pub mod scenario;
pub mod workload;

pub use endpoint::{read_plant, LocalKnob, PlantHandler, SharedPlant, TcpKnob};
pub use model::{ComponentClass, Plant, PlantConfig, PlantError, RcuState};
pub use workload::{
    component_power, generate_workload, PhaseKind, Schedule, WorkloadConfig, WorkloadPhase,
};

/// Sets every component's load from the schedule at `t_s`.
pub fn apply_workload(plant: &mut Plant, schedule: &Schedule, t_s: f64) {
    let sockets = plant.cfg.sockets;
    let tdp = plant.cfg.class.tdp_w;
    for node in 0..plant.cfg.nodes.min(schedule.nodes.len()) {
        let ph = schedule.phase(node, t_s);
        for s in 0..sockets {
            let u = ph.u.get(s).copied().unwrap_or(0.0);
            plant.set_load(node * sockets + s, component_power(ph.kind, u, tdp), u);
        }
    }
}
