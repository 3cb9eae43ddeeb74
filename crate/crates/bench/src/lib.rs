//! Deterministic inputs shared by the benchmarks in `benches/`.

use odapipe::{Reading, Topic};

/// `n` topics spread over nodes of 20 sensors each.
pub fn topics(n: usize) -> Vec<Topic> {
    (0..n)
        .map(|i| {
            Topic::parse(&format!("/bench/n{:04}/s{:02}", i / 20, i % 20)).expect("valid topic")
        })
        .collect()
}

/// One reading per topic per step, `steps` steps 10 s apart.
pub fn readings(topics: &[Topic], steps: usize) -> Vec<Reading> {
    let mut out = Vec::with_capacity(topics.len() * steps);
    for k in 0..steps {
        for (i, t) in topics.iter().enumerate() {
            let v = 40_000 + ((i * 7919 + k * 104_729) % 20_000) as i64;
            out.push(Reading::new(
                t.clone(),
                1_000_000_000 + k as u64 * 10_000_000_000,
                v,
            ));
        }
    }
    out
}

/// Pseudo-random rows in [0, 1) from a fixed linear congruential sequence.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    s = s
                        .wrapping_mul(6_364_136_223_846_793_005)
                        .wrapping_add(1_442_695_040_888_963_407);
                    (s >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect()
        })
        .collect()
}
