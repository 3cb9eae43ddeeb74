use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odapipe::odac::cs::cs_train;
use odapipe::odac::forest::{best_split, forest_train, ForestParams};
use odapipe::odav::stats::deciles;
use odapipe::storage::store::{QueryRange, Store, StoreConfig};
use odapipe::transport::SubscriptionPattern;
use odapipe::{Reading, Topic, VirtualClock};

use crate::common::ensure;
use crate::Outcome;

pub fn oracle_equivalence() -> Outcome {
    let notes = [
        deciles_vs_counting()?,
        cs_vs_exhaustive()?,
        split_vs_brute_force()?,
        store_vs_map()?,
    ];
    Ok(notes.join("; "))
}

/// The `k`-th decile is the smallest value with at least `ceil(k n / 10)`
/// values at or below it.
fn decile_oracle(values: &[i64]) -> [i64; 11] {
    let n = values.len();
    let mut d = [0i64; 11];
    d[0] = *values.iter().min().unwrap();
    d[10] = *values.iter().max().unwrap();
    for (k, slot) in d.iter_mut().enumerate().take(10).skip(1) {
        let need = (k * n).div_ceil(10);
        *slot = *values
            .iter()
            .filter(|&&v| values.iter().filter(|&&w| w <= v).count() >= need)
            .min()
            .unwrap();
    }
    d
}

fn deciles_vs_counting() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    const CASES: usize = 10_000;
    for case in 0..CASES {
        let n = rng.gen_range(1..=120);
        let spread = if rng.gen_bool(0.5) { 10 } else { 1_000_000 };
        let v: Vec<i64> = (0..n).map(|_| rng.gen_range(-spread..=spread)).collect();
        let got = deciles(&v).ok_or("deciles of non-empty input is None")?;
        let want = decile_oracle(&v);
        ensure(got == want, || {
            format!("deciles case {case} {v:?}: got {got:?}, want {want:?}")
        })?;
    }
    ensure(deciles(&[]).is_none(), || "deciles of empty input".into())?;
    Ok(format!("deciles {CASES} cases"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn cs_vs_exhaustive() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut trials = 0;
    for d in 2..=6usize {
        let all = permutations(d);
        for _ in 0..40 {
            // each sensor belongs to a cluster of exact affine copies
            let clusters = rng.gen_range(1..d);
            let mut of: Vec<usize> = (0..d)
                .map(|j| {
                    if j < clusters {
                        j
                    } else {
                        rng.gen_range(0..clusters)
                    }
                })
                .collect();
            for j in (1..d).rev() {
                let k = rng.gen_range(0..=j);
                of.swap(j, k);
            }
            let samples = 300;
            let latent: Vec<Vec<f64>> = (0..clusters)
                .map(|_| (0..samples).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let affine: Vec<(f64, f64)> = (0..d)
                .map(|_| {
                    let a = rng.gen_range(0.5..3.0) * if rng.gen_bool(0.3) { -1.0 } else { 1.0 };
                    (a, rng.gen_range(-50.0..50.0))
                })
                .collect();
            let history: Vec<Vec<f64>> = (0..samples)
                .map(|t| {
                    (0..d)
                        .map(|j| affine[j].0 * latent[of[j]][t] + affine[j].1)
                        .collect()
                })
                .collect();
            let sensors: Vec<Topic> = (0..d)
                .map(|j| Topic::parse(&format!("/x/s{j}")).unwrap())
                .collect();
            let model = cs_train(&history, sensors, 1, 2).map_err(|e| e.to_string())?;

            let contiguous = |p: &[usize]| {
                (0..clusters).all(|c| {
                    let pos: Vec<usize> = (0..d).filter(|&i| of[p[i]] == c).collect();
                    pos.last().unwrap() - pos[0] + 1 == pos.len()
                })
            };
            let admissible: Vec<&Vec<usize>> = all.iter().filter(|p| contiguous(p)).collect();
            ensure(admissible.contains(&&model.order), || {
                format!(
                    "D={d} clusters {of:?}: order {:?} splits a correlated group",
                    model.order
                )
            })?;
            trials += 1;
        }
    }
    Ok(format!("cs adjacency {trials} trials over D 2..=6"))
}

fn sse(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

/// Variance reduction of splitting at `thr` (left is `x <= thr`), or `None`
/// when a side is smaller than `min_leaf`.
fn gain_at(x: &[f64], y: &[f64], thr: f64, min_leaf: usize) -> Option<f64> {
    let l: Vec<f64> = x
        .iter()
        .zip(y)
        .filter(|p| *p.0 <= thr)
        .map(|p| *p.1)
        .collect();
    let r: Vec<f64> = x
        .iter()
        .zip(y)
        .filter(|p| *p.0 > thr)
        .map(|p| *p.1)
        .collect();
    (l.len() >= min_leaf && r.len() >= min_leaf).then(|| sse(y) - sse(&l) - sse(&r))
}

fn split_vs_brute_force() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mut trees = 0;
    const CASES: usize = 2_000;
    for case in 0..CASES {
        let n = rng.gen_range(2..=80);
        let levels = rng.gen_range(2..=20);
        let x: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 * 0.5)
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v * rng.gen_range(-2.0..2.0) + rng.gen_range(-1.0..1.0))
            .collect();
        let min_leaf = rng.gen_range(1..=5);

        let mut distinct = x.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut best: Option<(f64, f64)> = None;
        for w in distinct.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            if let Some(g) = gain_at(&x, &y, thr, min_leaf) {
                if best.is_none_or(|b| g > b.1) {
                    best = Some((thr, g));
                }
            }
        }
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let idx: Vec<usize> = (0..n).collect();
        let got = best_split(&rows, &y, &idx, 0, min_leaf);
        let tol = |g: f64| 1e-9 * (1.0 + g.abs() + sse(&y));
        match (got, best) {
            (None, None) => {}
            (None, Some((_, g))) => ensure(g <= tol(g), || {
                format!("split case {case}: missed gain {g}")
            })?,
            (Some((t, g)), None) => {
                return Err(format!(
                    "split case {case}: split at {t} gain {g} with no candidate"
                ))
            }
            (Some((t, g)), Some((bt, bg))) => {
                let at = gain_at(&x, &y, t, min_leaf)
                    .ok_or_else(|| format!("split case {case}: {t} violates min_leaf"))?;
                ensure(
                    (g - bg).abs() <= tol(bg) && (at - bg).abs() <= tol(bg),
                    || format!("split case {case}: got ({t}, {g}), brute force ({bt}, {bg})"),
                )?;
            }
        }

        // a one-split tree on the full set predicts the two side means
        let unique_best = best.is_some_and(|(bt, bg)| {
            distinct.windows(2).all(|w| {
                let thr = (w[0] + w[1]) / 2.0;
                thr == bt || gain_at(&x, &y, thr, min_leaf).is_none_or(|g| g < bg - 1e-6)
            })
        });
        if n >= 50 && unique_best {
            let (bt, _) = best.unwrap();
            let p = ForestParams {
                n_trees: 1,
                max_depth: 1,
                min_leaf,
                mtry: Some(1),
                max_samples: None,
                bootstrap: false,
                horizon: 1,
            };
            let model = forest_train(&rows, &y, &p, 1).map_err(|e| e.to_string())?;
            let side_mean = |left: bool| {
                let v: Vec<f64> = x
                    .iter()
                    .zip(&y)
                    .filter(|q| (*q.0 <= bt) == left)
                    .map(|q| *q.1)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            for &v in &distinct {
                let got = model.predict_raw(&[v]).map_err(|e| e.to_string())?;
                let want = side_mean(v <= bt);
                ensure((got - want).abs() < 1e-9, || {
                    format!("tree case {case}: predicts {got} at {v}, want {want}")
                })?;
            }
            trees += 1;
        }
    }
    Ok(format!("best split {CASES} cases, {trees} one-split trees"))
}

fn store_vs_map() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let topics: Vec<Topic> = [
        "/a/n0/t", "/a/n0/p", "/a/n1/t", "/b/n0/t", "/b/n1/x", "/ab/n0/t",
    ]
    .iter()
    .map(|t| Topic::parse(t).unwrap())
    .collect();
    let patterns = ["/a/#", "/b/#", "/#", "/a/n0/#", "/a/n0/t", "/ab/#", "/c/#"];
    let mut queries = 0;
    const WORKLOADS: u64 = 40;
    for w in 0..WORKLOADS {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let clock = VirtualClock::new(1);
        let open = || {
            let mut cfg = StoreConfig::new(dir.path());
            cfg.default_ttl_s = 0;
            Store::open(cfg, Arc::new(clock.clone())).map_err(|e| e.to_string())
        };
        let mut store = open()?;
        let mut durable: BTreeMap<(Topic, u64), i64> = BTreeMap::new();
        let mut live = durable.clone();
        for _ in 0..60 {
            match rng.gen_range(0..10) {
                0..=4 => {
                    let batch: Vec<Reading> = (0..rng.gen_range(1..50))
                        .map(|_| {
                            let t = topics[rng.gen_range(0..topics.len())].clone();
                            Reading::new(t, rng.gen_range(0..500), rng.gen_range(-1000..1000))
                        })
                        .collect();
                    store.insert_batch(&batch).map_err(|e| e.to_string())?;
                    for r in batch {
                        live.insert((r.topic, r.timestamp), r.value);
                    }
                }
                5 => {
                    store.flush().map_err(|e| e.to_string())?;
                    durable = live.clone();
                }
                6 => {
                    // unflushed readings are lost on reopen
                    drop(store);
                    store = open()?;
                    live = durable.clone();
                }
                7 => {
                    store.compact().map_err(|e| e.to_string())?;
                    durable = live.clone();
                }
                _ => {
                    let pat = patterns[rng.gen_range(0..patterns.len())];
                    let a = rng.gen_range(0..520);
                    let b = rng.gen_range(a..=520);
                    let sp = SubscriptionPattern::parse(pat).unwrap();
                    let got: Vec<(Topic, u64, i64)> = store
                        .query(&QueryRange::new(sp.clone(), a, b))
                        .map_err(|e| e.to_string())?
                        .into_iter()
                        .map(|r| (r.topic, r.timestamp, r.value))
                        .collect();
                    let want: Vec<(Topic, u64, i64)> = live
                        .iter()
                        .filter(|((t, ts), _)| sp.matches(t) && (a..=b).contains(ts))
                        .map(|((t, ts), v)| (t.clone(), *ts, *v))
                        .collect();
                    ensure(got == want, || {
                        format!("workload {w}: query {pat} [{a},{b}] differs from the map")
                    })?;
                    queries += 1;
                }
            }
        }
    }
    Ok(format!("store {WORKLOADS} workloads, {queries} queries"))
}
