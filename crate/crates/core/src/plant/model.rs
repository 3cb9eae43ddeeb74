//! Rack cooling unit and first-order component thermals.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::reading::{to_milli, Reading, NS_PER_S};
use crate::topic::Topic;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("invalid plant config: {0}")]
    Config(String),
    #[error("set temperature {value} outside hard limits [{min}, {max}]")]
    OutOfLimits { value: f64, min: f64, max: f64 },
    #[error("unknown register {0}")]
    UnknownRegister(String),
    #[error("non-finite state at t={time_s}s:\n{dump}")]
    NonFinite { time_s: f64, dump: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentClass {
    pub name: String,
    pub tdp_w: f64,
    /// Thermal resistance to the inlet water, K/W.
    pub r_kw: f64,
    /// Per-component resistance spread, as a fraction of `r_kw`.
    pub r_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    /// Topic prefix of the rack, e.g. `/deepest/cm`.
    pub prefix: String,
    pub nodes: usize,
    pub sockets: usize,
    pub cores: usize,
    pub class: ComponentClass,
    pub tau_c: f64,
    pub tau_v: f64,
    /// Flow in m³/h at `t_min` and `t_max` respectively.
    pub flow_max: f64,
    pub flow_min: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Set temperatures outside these are refused.
    pub hard_min: f64,
    pub hard_max: f64,
    /// Water heat capacity, kWh per m³·K.
    pub k_w: f64,
    pub dt: f64,
    /// Per-node power of everything other than the sockets, W.
    pub base_power: (f64, f64),
    pub initial_set_temp: f64,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            prefix: "/deepest/cm".into(),
            nodes: 50,
            sockets: 2,
            cores: 12,
            class: ComponentClass {
                name: "cpu".into(),
                tdp_w: 165.0,
                r_kw: 0.25,
                r_spread: 0.03,
            },
            tau_c: 30.0,
            tau_v: 120.0,
            flow_max: 20.0,
            flow_min: 10.0,
            t_min: 35.0,
            t_max: 45.0,
            hard_min: 30.0,
            hard_max: 46.0,
            k_w: 1.163,
            dt: 1.0,
            base_power: (860.0, 940.0),
            initial_set_temp: 45.0,
            seed: 1,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: String| Err(PlantError::Config(m));
        if self.nodes == 0 || self.sockets == 0 {
            return bad("need at least one node and socket".into());
        }
        let pos = [
            ("tdp", self.class.tdp_w),
            ("R", self.class.r_kw),
            ("tau_c", self.tau_c),
            ("tau_v", self.tau_v),
            ("flow_min", self.flow_min),
            ("k_w", self.k_w),
            ("dt", self.dt),
            ("t_min", self.t_min),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(0.0..0.5).contains(&self.class.r_spread) {
            return bad(format!(
                "R spread {} must lie in [0, 0.5)",
                self.class.r_spread
            ));
        }
        if self.flow_min >= self.flow_max {
            return bad("flow_min must be below flow_max".into());
        }
        if self.t_min >= self.t_max {
            return bad("t_min must be below t_max".into());
        }
        if !(self.hard_min <= self.t_min && self.t_max <= self.hard_max) {
            return bad("hard limits must contain [t_min, t_max]".into());
        }
        if self.dt > self.tau_c.min(self.tau_v) / 5.0 {
            return bad(format!(
                "dt {} exceeds a fifth of the smallest time constant",
                self.dt
            ));
        }
        if !(0.0 <= self.base_power.0 && self.base_power.0 <= self.base_power.1) {
            return bad("base power range must be non-negative and ordered".into());
        }
        if !(self.hard_min..=self.hard_max).contains(&self.initial_set_temp) {
            return bad("initial set temperature outside hard limits".into());
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.nodes * self.sockets
    }

    /// Flow for a set temperature: linear between the anchors, clamped.
    pub fn flow(&self, set_temp: f64) -> f64 {
        let f = self.flow_max
            - (self.flow_max - self.flow_min) * (set_temp - self.t_min) / (self.t_max - self.t_min);
        f.clamp(self.flow_min, self.flow_max)
    }

    pub fn node_topic(&self, node: usize) -> Topic {
        Topic::parse(&format!("{}/s{node:02}", self.prefix)).expect("valid prefix")
    }

    pub fn socket_topic(&self, node: usize, socket: usize) -> Topic {
        self.node_topic(node)
            .child(&format!("socket{socket}"))
            .expect("valid label")
    }

    pub fn rcu_topic(&self) -> Topic {
        Topic::parse(&format!("{}/rcu", self.prefix)).expect("valid prefix")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcuState {
    pub set_temp: f64,
    pub inlet: f64,
    pub ret: f64,
    pub flow: f64,
}

pub struct Plant {
    pub cfg: PlantConfig,
    pub rcu: RcuState,
    /// Per component (node-major).
    pub temps: Vec<f64>,
    pub powers: Vec<f64>,
    pub utils: Vec<f64>,
    r: Vec<f64>,
    base: Vec<f64>,
    /// Per component and core: offset below the package temperature (K)
    /// and utilization skew.
    core_temp_offset: Vec<f64>,
    core_util_skew: Vec<f64>,
    pub time_s: f64,
}

/// Register names accepted by [`Plant::write`].
pub const SET_TEMP: &str = "set-temp";

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Plant, PlantError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.components();
        let r = (0..n)
            .map(|_| cfg.class.r_kw * (1.0 + rng.gen_range(-1.0..=1.0) * cfg.class.r_spread))
            .collect();
        let base = (0..cfg.nodes)
            .map(|_| rng.gen_range(cfg.base_power.0..=cfg.base_power.1))
            .collect();
        let core_temp_offset = (0..n * cfg.cores)
            .map(|_| rng.gen_range(0.0..2.0))
            .collect();
        let core_util_skew = (0..n * cfg.cores)
            .map(|_| rng.gen_range(-0.05..0.05))
            .collect();
        let t0 = cfg.initial_set_temp;
        let idle = cfg.class.tdp_w * 0.15;
        let mut p = Plant {
            rcu: RcuState {
                set_temp: t0,
                inlet: t0,
                ret: t0,
                flow: cfg.flow(t0),
            },
            temps: vec![t0; n],
            powers: vec![idle; n],
            utils: vec![0.0; n],
            r,
            base,
            core_temp_offset,
            core_util_skew,
            time_s: 0.0,
            cfg,
        };
        p.rcu.ret = p.return_temp();
        Ok(p)
    }

    pub fn r_of(&self, c: usize) -> f64 {
        self.r[c]
    }

    pub fn base_of(&self, node: usize) -> f64 {
        self.base[node]
    }

    pub fn total_power_w(&self) -> f64 {
        self.powers.iter().sum::<f64>() + self.base.iter().sum::<f64>()
    }

    fn return_temp(&self) -> f64 {
        self.rcu.inlet + self.total_power_w() / 1000.0 / (self.cfg.k_w * self.rcu.flow)
    }

    pub fn node_power(&self, node: usize) -> f64 {
        let s = self.cfg.sockets;
        self.base[node] + self.powers[node * s..(node + 1) * s].iter().sum::<f64>()
    }

    /// Sets component loads for the coming steps.
    pub fn set_load(&mut self, c: usize, power_w: f64, util: f64) {
        self.powers[c] = power_w;
        self.utils[c] = util;
    }

    pub fn set_rcu_temperature(&mut self, t: f64) -> Result<(), PlantError> {
        if !(self.cfg.hard_min..=self.cfg.hard_max).contains(&t) {
            return Err(PlantError::OutOfLimits {
                value: t,
                min: self.cfg.hard_min,
                max: self.cfg.hard_max,
            });
        }
        self.rcu.set_temp = t;
        Ok(())
    }

    /// Writes a register under the rack's `rcu` topic (milli-units).
    pub fn write(&mut self, topic: &Topic, milli: i64) -> Result<(), PlantError> {
        if topic.parent().as_ref() != Some(&self.cfg.rcu_topic()) || topic.name() != SET_TEMP {
            return Err(PlantError::UnknownRegister(topic.to_string()));
        }
        self.set_rcu_temperature(milli as f64 / 1000.0)
    }

    /// Advances one `dt`.
    pub fn step(&mut self) -> Result<(), PlantError> {
        let dt = self.cfg.dt;
        self.rcu.inlet += dt / self.cfg.tau_v * (self.rcu.set_temp - self.rcu.inlet);
        let a = dt / self.cfg.tau_c;
        for ((t, p), r) in self.temps.iter_mut().zip(&self.powers).zip(&self.r) {
            *t += a * (self.rcu.inlet + r * p - *t);
        }
        self.rcu.flow = self.cfg.flow(self.rcu.set_temp);
        self.rcu.ret = self.return_temp();
        self.time_s += dt;
        let finite = self.rcu.inlet.is_finite()
            && self.rcu.ret.is_finite()
            && self.temps.iter().chain(&self.powers).all(|v| v.is_finite());
        if !finite {
            return Err(PlantError::NonFinite {
                time_s: self.time_s,
                dump: self.dump(),
            });
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut s = format!("rcu {:?}\n", self.rcu);
        for (i, (t, p)) in self.temps.iter().zip(&self.powers).enumerate() {
            let _ = writeln!(s, "component {i}: temp {t} power {p}");
        }
        s
    }

    /// RCU sensors: set temperature, inlet, return, flow.
    pub fn rcu_readings(&self, ts: u64) -> Vec<Reading> {
        let rcu = self.cfg.rcu_topic();
        [
            (SET_TEMP, self.rcu.set_temp),
            ("inlet-temp", self.rcu.inlet),
            ("return-temp", self.rcu.ret),
            ("flow", self.rcu.flow),
        ]
        .into_iter()
        .map(|(n, v)| Reading::new(rcu.child(n).expect("valid label"), ts, to_milli(v)))
        .collect()
    }

    /// All sensors of one node: node power and inlet temperature, then per
    /// socket temperature, power, utilization and per-core utilization and
    /// temperature. Per-core noise is a deterministic function of the seed,
    /// component and timestamp.
    pub fn node_readings(&self, node: usize, ts: u64) -> Vec<Reading> {
        let cfg = &self.cfg;
        let nt = cfg.node_topic(node);
        let mut out = Vec::with_capacity(2 + cfg.sockets * (3 + 2 * cfg.cores));
        out.push(Reading::new(
            nt.child("power").unwrap(),
            ts,
            to_milli(self.node_power(node)),
        ));
        out.push(Reading::new(
            nt.child("inlet-temp").unwrap(),
            ts,
            to_milli(self.rcu.inlet),
        ));
        for s in 0..cfg.sockets {
            let c = node * cfg.sockets + s;
            let st = cfg.socket_topic(node, s);
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ ((c as u64) << 40) ^ (ts / NS_PER_S));
            out.push(Reading::new(
                st.child("temp").unwrap(),
                ts,
                to_milli(self.temps[c]),
            ));
            out.push(Reading::new(
                st.child("power").unwrap(),
                ts,
                to_milli(self.powers[c]),
            ));
            out.push(Reading::new(
                st.child("util").unwrap(),
                ts,
                to_milli(self.utils[c]),
            ));
            for k in 0..cfg.cores {
                let i = c * cfg.cores + k;
                let u = (self.utils[c] + self.core_util_skew[i] + rng.gen_range(-0.02..0.02))
                    .clamp(0.0, 1.0);
                out.push(Reading::new(
                    st.child(&format!("util-c{k:02}")).unwrap(),
                    ts,
                    to_milli(u),
                ));
            }
            for k in 0..cfg.cores {
                let i = c * cfg.cores + k;
                let t = self.temps[c] - self.core_temp_offset[i] - rng.gen_range(0.0..0.2);
                out.push(Reading::new(
                    st.child(&format!("temp-c{k:02}")).unwrap(),
                    ts,
                    to_milli(t),
                ));
            }
        }
        out
    }

    /// Every sensor of the rack.
    pub fn snapshot(&self, ts: u64) -> Vec<Reading> {
        let mut v = self.rcu_readings(ts);
        for n in 0..self.cfg.nodes {
            v.extend(self.node_readings(n, ts));
        }
        v
    }

    /// Topics that [`Plant::snapshot`] produces.
    pub fn inventory(&self) -> Vec<Topic> {
        self.snapshot(0).into_iter().map(|r| r.topic).collect()
    }
}
