//! Acceptance suite. Prints one `criterion N PASS|FAIL` line per criterion
//! and exits non-zero when any fails.
//!
//! `cargo test --test acceptance -- 1 6` runs a subset.

mod common;
mod control;
mod oracles;
mod pipeline;
mod regime;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

/// Detail line on success, reason on failure.
pub type Outcome = Result<String, String>;

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "control law examples", control::control_law_examples),
    (2, "closed-loop regimes", regime::closed_loop_regimes),
    (
        3,
        "flow reduction against the fixed minimum",
        regime::flow_reduction,
    ),
    (4, "held-out prediction error", regime::held_out_prediction),
    (
        5,
        "critical temperatures are always handled",
        regime::safety,
    ),
    (6, "oracle equivalence", oracles::oracle_equivalence),
    (
        7,
        "train and run-scenario are byte-identical",
        control::determinism,
    ),
    (8, "ingest throughput", pipeline::ingest_throughput),
    (9, "end-to-end freshness", pipeline::freshness),
    (
        10,
        "shipped control config resolves exactly",
        control::config_fidelity,
    ),
];

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for &(n, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n} PASS ({name}, {secs:.1} s): {detail}"),
            Err(why) => {
                println!("criterion {n} FAIL ({name}, {secs:.1} s): {why}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
