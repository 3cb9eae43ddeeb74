use odapipe::plant::dataset::{evaluate, generate_dataset};

use crate::common::{ensure, models, run_named, runs, shipped_scenarios};
use crate::Outcome;

/// Wall-clock budget for one 24 h scenario.
const SCENARIO_BUDGET_S: f64 = 120.0;

pub fn closed_loop_regimes() -> Outcome {
    let mut notes = Vec::new();
    for name in ["cm-68", "cm-73", "cm-78"] {
        let r = run_named(name)?;
        ensure(r.spec.duration_s >= 86_400, || {
            format!("{name} runs {} s", r.spec.duration_s)
        })?;
        ensure(r.spec.plant.nodes == 50, || {
            format!("{name} has {} nodes", r.spec.plant.nodes)
        })?;
        ensure(r.wall_s < SCENARIO_BUDGET_S, || {
            format!("{name} took {:.1} s", r.wall_s)
        })?;
    }

    let high = &run_named("cm-78")?.result;
    let at_max = high.fraction_at(high.t_max);
    ensure(at_max >= 0.9, || {
        format!("cm-78 at T_max for {at_max:.3} of ticks")
    })?;
    notes.push(format!("cm-78 at T_max {at_max:.3}"));

    let low = &run_named("cm-68")?.result;
    let hist = low.trcu_hist();
    let total: u64 = hist.iter().map(|b| b.2).sum();
    let lo = hist[0].2 as f64 / total as f64;
    let hi = hist[hist.len() - 1].2 as f64 / total as f64;
    ensure(lo >= 0.15 && hi >= 0.15, || {
        format!("cm-68 extreme bins {lo:.3} and {hi:.3}")
    })?;
    notes.push(format!("cm-68 extreme bins {lo:.3}/{hi:.3}"));

    let mid = &run_named("cm-73")?.result;
    let at_max = mid.fraction_at(mid.t_max);
    let exc = mid.excursions();
    ensure(at_max > 0.5 && exc >= 3, || {
        format!("cm-73 at T_max {at_max:.3}, {exc} excursions")
    })?;
    notes.push(format!("cm-73 at T_max {at_max:.3} with {exc} excursions"));

    let slowest = runs().iter().map(|r| r.wall_s).fold(0.0, f64::max);
    notes.push(format!("slowest scenario {slowest:.1} s unpaced"));
    Ok(notes.join(", "))
}

pub fn flow_reduction() -> Outcome {
    let high = run_named("cm-78")?;
    let base = run_named("baseline-35")?;
    ensure(base.spec.fixed == Some(high.result.t_min), || {
        "baseline does not pin T_min".into()
    })?;
    ensure(
        high.spec.seed == base.spec.seed && high.spec.workload == base.spec.workload,
        || "baseline and policy runs use different workloads".into(),
    )?;
    let (fh, fb) = (high.result.mean_flow(), base.result.mean_flow());
    let reduction = 1.0 - fh / fb;
    ensure(reduction >= 0.40, || {
        format!(
            "flow {fh:.3} vs baseline {fb:.3}: {:.1}% lower",
            reduction * 100.0
        )
    })?;
    Ok(format!(
        "mean flow {fh:.3} vs {fb:.3}: {:.1}% lower",
        reduction * 100.0
    ))
}

pub fn held_out_prediction() -> Outcome {
    let t = std::time::Instant::now();
    let m = models();
    let training = shipped_scenarios()
        .into_iter()
        .find_map(|(_, s)| s.training)
        .ok_or("no training block")?;
    ensure(training.dataset.duration_s == 86_400, || {
        "training set is not one day".into()
    })?;
    let mut held = training.dataset.clone();
    held.seed = training.dataset.seed.wrapping_add(7919);
    let ds = generate_dataset(&held).map_err(|e| e.to_string())?;
    let r = evaluate(&ds, &m.cs, &m.forest, 1, 5000.0).map_err(|e| e.to_string())?;
    let bands: Vec<String> = r
        .bands
        .iter()
        .map(|b| {
            format!(
                "[{:.0},{:.0}) {:.3} n={}",
                b.lo / 1000.0,
                b.lo / 1000.0 + 5.0,
                b.nrmse,
                b.count
            )
        })
        .collect();
    println!("  held-out bands: {}", bands.join("; "));
    ensure(r.nrmse <= 0.10, || format!("held-out nrmse {:.4}", r.nrmse))?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "held-out nrmse {:.4} over {} samples, {} bands of 5 C",
        r.nrmse,
        r.samples,
        r.bands.len()
    ))
}

pub fn safety() -> Outcome {
    let mut notes = Vec::new();
    let mut total = 0;
    for r in runs() {
        let res = &r.result;
        let un = res.unhandled();
        ensure(un == 0, || {
            format!(
                "{}: {un} of {} violations unhandled",
                r.name,
                res.violations()
            )
        })?;
        total += res.violations();
        notes.push(format!("{} {}", r.name, res.violations()));
    }
    // the property must be exercised, not hold vacuously
    ensure(total > 0, || {
        "no scenario reached its critical temperature".into()
    })?;
    Ok(format!(
        "violations per scenario: {}; all handled",
        notes.join(", ")
    ))
}
