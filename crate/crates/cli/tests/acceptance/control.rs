use std::path::Path;
use std::time::Instant;

use odapipe::agentd::check_agent_config;
use odapipe::odac::control::{update_set_temperature, ControlPolicy, Prediction};
use odapipe::operator::expr::SensorExpression;
use odapipe::Topic;

use crate::common::{ensure, odapipe_ok, path_str, repo_path};
use crate::Outcome;

fn preds(n: usize, hot: usize, extra: Option<i64>) -> Vec<Prediction> {
    let mut v: Vec<Prediction> = (0..n)
        .map(|i| Prediction {
            value: if i < hot { 80_000 } else { 60_000 },
            hot: 73_000,
            crit: 93_000,
        })
        .collect();
    if let Some(x) = extra {
        v[0].value = x;
    }
    v
}

pub fn control_law_examples() -> Outcome {
    let t = Instant::now();
    let policy = ControlPolicy::new(0.2, 35.0, 45.0).map_err(|e| e.to_string())?;
    let cases = [
        (
            "fixed point at P_hot = P_th",
            40.0,
            preds(10, 2, None),
            40.0,
        ),
        ("all hot from 45", 45.0, preds(10, 10, None), 37.0),
        ("none hot from 44 clamps", 44.0, preds(10, 0, None), 45.0),
        (
            "critical prediction",
            45.0,
            preds(10, 0, Some(93_000)),
            35.0,
        ),
    ];
    let mut got = Vec::new();
    for (what, t_rcu, p, want) in cases {
        let v = update_set_temperature(&policy, t_rcu, &p).map_err(|e| format!("{what}: {e}"))?;
        ensure((v - want).abs() <= 0.001, || {
            format!("{what}: got {v}, want {want}")
        })?;
        got.push(format!("{v:.3}"));
    }
    let ms = t.elapsed().as_secs_f64() * 1000.0;
    ensure(ms < 1000.0, || format!("took {ms:.1} ms"))?;
    Ok(format!(
        "40 -> {}, 45 -> {}, 44 -> {}, crit -> {} in {ms:.2} ms",
        got[0], got[1], got[2], got[3]
    ))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("bundle dir")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).expect("read"),
            )
        })
        .collect();
    v.sort();
    v
}

pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let scenario = repo_path("configs/scenarios/cm-73.conf");
    let ds = d.join("train.csv");
    odapipe_ok(&[
        "gen-dataset",
        "--config",
        path_str(&scenario),
        "--out",
        path_str(&ds),
    ])?;

    let mut cs = Vec::new();
    let mut forest = Vec::new();
    for k in 0..2 {
        let c = d.join(format!("cs{k}.model"));
        odapipe_ok(&[
            "train",
            "--dataset",
            path_str(&ds),
            "--kind",
            "cs",
            "--out",
            path_str(&c),
        ])?;
        cs.push(std::fs::read(&c).map_err(|e| e.to_string())?);
        let f = d.join(format!("forest{k}.model"));
        odapipe_ok(&[
            "train",
            "--dataset",
            path_str(&ds),
            "--kind",
            "forest",
            "--cs",
            path_str(&c),
            "--seed",
            "1001",
            "--out",
            path_str(&f),
        ])?;
        forest.push(std::fs::read(&f).map_err(|e| e.to_string())?);
    }
    ensure(cs[0] == cs[1], || "signature models differ".into())?;
    ensure(forest[0] == forest[1], || "forest models differ".into())?;

    let mut bundles = Vec::new();
    for k in 0..2 {
        let out = d.join(format!("run{k}"));
        odapipe_ok(&[
            "run-scenario",
            "--config",
            path_str(&scenario),
            "--out",
            path_str(&out),
            "--seed",
            "7",
            "--cs",
            path_str(&d.join("cs0.model")),
            "--forest",
            path_str(&d.join("forest0.model")),
        ])?;
        bundles.push(files(&out));
    }
    ensure(bundles[0] == bundles[1], || {
        let diff: Vec<&str> = bundles[0]
            .iter()
            .zip(&bundles[1])
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.as_str())
            .collect();
        format!("scenario bundles differ in {diff:?}")
    })?;
    let bytes: usize = bundles[0].iter().map(|f| f.1.len()).sum();
    Ok(format!(
        "cs {} B, forest {} B, {} bundle files ({} B) identical across two runs",
        cs[0].len(),
        forest[0].len(),
        bundles[0].len(),
        bytes
    ))
}

const EXPRESSION: &str = "<topdown 3, filter cm/s../socket>temp-p";

fn t(s: &str) -> Topic {
    Topic::parse(s).expect("topic")
}

pub fn config_fidelity() -> Outcome {
    let path = repo_path("configs/cm-control.conf");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    ensure(text.contains(EXPRESSION), || {
        "shipped config lacks the controller expression".into()
    })?;

    let mut inventory = Vec::new();
    let mut expected = Vec::new();
    for n in 0..4 {
        inventory.push(t(&format!("/deepest/cm/s{n:02}/power")));
        inventory.push(t(&format!("/deepest/cm/s{n:02}/temp-p")));
        for s in 0..2 {
            let sock = format!("/deepest/cm/s{n:02}/socket{s}");
            expected.push(t(&format!("{sock}/temp-p")));
            for leaf in ["temp", "power", "temp-pp", "core0/temp-p", "core0/temp"] {
                inventory.push(t(&format!("{sock}/{leaf}")));
            }
        }
        inventory.push(t(&format!("/deepest/cm/s{n:02}/gpu0/temp-p")));
    }
    for d in [
        "/deepest/cm/s0/socket0/temp-p",
        "/deepest/cm/s100/socket0/temp-p",
        "/deepest/cm/x00/socket0/temp-p",
        "/deepest/sm/s00/socket0/temp-p",
        "/deepest/cm/rcu/temp-p",
        "/other/cm/s00/socket0/temp-p",
        "/deepest/cm/s00/temp-p/socket0",
    ] {
        inventory.push(t(d));
    }
    inventory.extend(expected.iter().cloned());
    inventory.sort();
    expected.sort();

    let expr = SensorExpression::parse(EXPRESSION).map_err(|e| e.to_string())?;
    let resolved = expr.resolve(&["deepest".to_string()], &inventory);
    ensure(resolved == expected, || {
        format!("expression selected {resolved:?}")
    })?;

    let (_, units) = check_agent_config(&text, inventory.clone())
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let ctl = units
        .iter()
        .find(|u| u.name() == "cm-control")
        .ok_or("no cm-control unit")?;
    let mut predicted: Vec<Topic> = ctl
        .spec
        .inputs
        .iter()
        .filter(|i| i.as_str().ends_with("/temp-p"))
        .cloned()
        .collect();
    predicted.sort();
    ensure(predicted == expected, || {
        format!("controller predicted inputs {predicted:?}")
    })?;
    Ok(format!(
        "{} of {} inventory topics selected, all socket temp-p; {} units built",
        resolved.len(),
        inventory.len(),
        units.len()
    ))
}
