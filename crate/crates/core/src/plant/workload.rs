//! Seeded per-node phase schedules: compute, communication and idle.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Compute,
    Comm,
    Idle,
}

impl PhaseKind {
    const ALL: [PhaseKind; 3] = [PhaseKind::Compute, PhaseKind::Comm, PhaseKind::Idle];

    /// Fraction of TDP drawn at utilization `u`.
    pub fn power_fraction(self, u: f64) -> f64 {
        match self {
            PhaseKind::Compute => 0.15 + 0.85 * u,
            PhaseKind::Comm => 0.15 + 0.35 * u,
            PhaseKind::Idle => 0.15,
        }
    }
}

pub fn component_power(kind: PhaseKind, u: f64, tdp_w: f64) -> f64 {
    tdp_w * kind.power_fraction(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadPhase {
    pub kind: PhaseKind,
    pub start_s: f64,
    pub duration_s: f64,
    /// Utilization per socket.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    /// Phase weights (compute, comm, idle) outside and inside heavy episodes.
    pub weights: [f64; 3],
    pub heavy_weights: [f64; 3],
    /// Duration range per phase kind, seconds.
    pub durations: [(f64, f64); 3],
    /// Compute utilization range per input size.
    pub sizes: Vec<(f64, f64)>,
    pub size_weights: Vec<f64>,
    pub heavy_size_weights: Vec<f64>,
    pub comm_u: (f64, f64),
    /// Heavy episodes per day and their duration range, seconds.
    pub heavy_per_day: f64,
    pub heavy_duration: (f64, f64),
    /// Socket-to-socket utilization spread within a node.
    pub socket_jitter: f64,
    /// Node count range of a gang: nodes running one job in lock-step.
    pub gang: (usize, usize),
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            weights: [0.62, 0.26, 0.12],
            heavy_weights: [0.85, 0.1, 0.05],
            durations: [(300.0, 1800.0), (60.0, 300.0), (60.0, 600.0)],
            sizes: vec![(0.38, 0.44), (0.75, 0.77), (0.9, 0.95)],
            size_weights: vec![0.82, 0.16, 0.02],
            heavy_size_weights: vec![0.2, 0.78, 0.02],
            comm_u: (0.2, 0.9),
            heavy_per_day: 6.0,
            heavy_duration: (1200.0, 2700.0),
            socket_jitter: 0.01,
            gang: (8, 16),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok_range = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self
            .durations
            .iter()
            .any(|&(a, b)| !(a > 0.0 && ok_range((a, b))))
        {
            return Err("phase durations must be positive ranges".into());
        }
        if self.sizes.is_empty()
            || self.sizes.len() != self.size_weights.len()
            || self.sizes.len() != self.heavy_size_weights.len()
        {
            return Err("sizes and size weights must have equal, non-zero length".into());
        }
        for &(a, b) in self.sizes.iter().chain([&self.comm_u]) {
            if !(ok_range((a, b)) && a >= 0.0 && b <= 1.0) {
                return Err(format!("utilization range [{a}, {b}] outside [0, 1]"));
            }
        }
        for w in [
            &self.weights[..],
            &self.heavy_weights,
            &self.size_weights,
            &self.heavy_size_weights,
        ] {
            if w.iter().any(|x| *x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err("weights must be non-negative with a positive sum".into());
            }
        }
        if self.gang.0 == 0 || self.gang.0 > self.gang.1 {
            return Err("gang sizes must be at least 1 with min <= max".into());
        }
        if self.heavy_per_day < 0.0
            || !(self.heavy_duration.0 > 0.0 && ok_range(self.heavy_duration))
        {
            return Err("heavy episodes need a positive duration range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub nodes: Vec<Vec<WorkloadPhase>>,
    /// `(first node, node count)` of each gang.
    pub gangs: Vec<(usize, usize)>,
    /// Heavy-load episodes as `[start, end)` seconds.
    pub heavy: Vec<(f64, f64)>,
    pub horizon_s: f64,
}

impl Schedule {
    /// The phase a node is in at `t_s` (the last one past the horizon).
    pub fn phase(&self, node: usize, t_s: f64) -> &WorkloadPhase {
        let ph = &self.nodes[node];
        let i = ph.partition_point(|p| p.start_s <= t_s);
        &ph[i.saturating_sub(1)]
    }
}

fn pick<R: Rng>(rng: &mut R, w: &[f64]) -> usize {
    WeightedIndex::new(w)
        .expect("validated weights")
        .sample(rng)
}

/// Builds per-node schedules covering `[0, horizon_s)`. Nodes are split
/// into gangs of consecutive nodes that share one phase sequence; gangs
/// start at random offsets so they are not synchronized. Phases are cut at
/// heavy-episode boundaries.
pub fn generate_workload(
    cfg: &WorkloadConfig,
    nodes: usize,
    sockets: usize,
    seed: u64,
    horizon_s: f64,
) -> Result<Schedule, String> {
    cfg.validate()?;
    if horizon_s.is_nan() || horizon_s <= 0.0 {
        return Err("horizon must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heavy = (cfg.heavy_per_day * horizon_s / 86_400.0).round() as usize;
    let mut heavy: Vec<(f64, f64)> = (0..n_heavy)
        .map(|_| {
            let d = rng.gen_range(cfg.heavy_duration.0..=cfg.heavy_duration.1);
            let s = rng.gen_range(0.0..horizon_s);
            (s, (s + d).min(horizon_s))
        })
        .collect();
    heavy.sort_by(|a, b| a.0.total_cmp(&b.0));
    let in_heavy = |t: f64| heavy.iter().any(|&(s, e)| s <= t && t < e);
    let next_edge = |t: f64| {
        heavy
            .iter()
            .flat_map(|&(s, e)| [s, e])
            .filter(|&x| x > t)
            .fold(f64::INFINITY, f64::min)
    };
    let mut gangs = Vec::new();
    let mut first_node = 0;
    while first_node < nodes {
        let n = rng
            .gen_range(cfg.gang.0..=cfg.gang.1)
            .min(nodes - first_node);
        gangs.push((first_node, n));
        first_node += n;
    }
    let mut out = Vec::with_capacity(nodes);
    for &(_, members) in &gangs {
        let mut shared = Vec::new();
        let mut t = 0.0;
        let mut first = true;
        while t < horizon_s {
            let h = in_heavy(t);
            let kind =
                PhaseKind::ALL[pick(&mut rng, if h { &cfg.heavy_weights } else { &cfg.weights })];
            let (lo, hi) = cfg.durations[kind as usize];
            let mut d = rng.gen_range(lo..=hi);
            if first {
                d *= rng.gen_range(0.05..1.0);
                first = false;
            }
            d = d.min(next_edge(t) - t).max(1.0);
            let base = match kind {
                PhaseKind::Compute => {
                    let s = pick(
                        &mut rng,
                        if h {
                            &cfg.heavy_size_weights
                        } else {
                            &cfg.size_weights
                        },
                    );
                    let (a, b) = cfg.sizes[s];
                    rng.gen_range(a..=b)
                }
                PhaseKind::Comm => rng.gen_range(cfg.comm_u.0..=cfg.comm_u.1),
                PhaseKind::Idle => 0.0,
            };
            shared.push((kind, t, d, base));
            t += d;
        }
        for _ in 0..members {
            let phases = shared
                .iter()
                .map(|&(kind, start_s, duration_s, base)| {
                    let u = (0..sockets)
                        .map(|_| {
                            if kind == PhaseKind::Idle {
                                0.0
                            } else {
                                (base + rng.gen_range(-1.0..=1.0) * cfg.socket_jitter)
                                    .clamp(0.0, 1.0)
                            }
                        })
                        .collect();
                    WorkloadPhase {
                        kind,
                        start_s,
                        duration_s,
                        u,
                    }
                })
                .collect();
            out.push(phases);
        }
    }
    Ok(Schedule {
        nodes: out,
        gangs,
        horizon_s,
        heavy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_levels() {
        assert_eq!(component_power(PhaseKind::Compute, 1.0, 165.0), 165.0);
        assert!((component_power(PhaseKind::Idle, 0.7, 250.0) - 37.5).abs() < 1e-12);
        assert!((component_power(PhaseKind::Comm, 1.0, 100.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_covering() {
        let cfg = WorkloadConfig {
            gang: (1, 1),
            ..Default::default()
        };
        let a = generate_workload(&cfg, 4, 2, 9, 86_400.0).unwrap();
        let b = generate_workload(&cfg, 4, 2, 9, 86_400.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_workload(&cfg, 4, 2, 10, 86_400.0).unwrap());
        for ph in &a.nodes {
            assert_eq!(ph[0].start_s, 0.0);
            for w in ph.windows(2) {
                assert!((w[0].start_s + w[0].duration_s - w[1].start_s).abs() < 1e-9);
                assert!(w[0].duration_s > 0.0);
            }
            let last = ph.last().unwrap();
            assert!(last.start_s + last.duration_s >= 86_400.0);
        }
        // single-node gangs are not phase-aligned
        assert_ne!(a.nodes[0][1].start_s, a.nodes[1][1].start_s);
        assert_eq!(a.phase(0, 0.0), &a.nodes[0][0]);
    }

    #[test]
    fn gangs_share_phases() {
        let cfg = WorkloadConfig {
            gang: (3, 3),
            ..Default::default()
        };
        let s = generate_workload(&cfg, 7, 2, 4, 20_000.0).unwrap();
        assert_eq!(s.gangs, vec![(0, 3), (3, 3), (6, 1)]);
        for t in [0.0, 5_000.0, 19_999.0] {
            let (a, b) = (s.phase(0, t), s.phase(2, t));
            assert_eq!((a.kind, a.start_s), (b.kind, b.start_s));
        }
        assert_ne!(s.nodes[0][1].start_s, s.nodes[3][1].start_s);
    }
}
