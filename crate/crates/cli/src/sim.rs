use std::fs;
use std::io::Write;
use std::path::Path;

use odapipe::jobsource::{generate_jobs, jobs_from_schedule, write_jsonl, JobScript, Placement};
use odapipe::odac::cs::CsModel;
use odapipe::odac::forest::ForestModel;
use odapipe::plant::dataset::{
    evaluate, generate_dataset, train_cs, train_forest, Dataset, TrainParams,
};
use odapipe::plant::model::PlantConfig;
use odapipe::plant::scenario::{run_scenario as run, train_for, Models, ScenarioSpec};
use odapipe::plant::workload::generate_workload;

use crate::fail::{data, env, Classify, Res};
use crate::{EvalArgs, Format, GenDatasetArgs, GenJobsArgs, ModelKind, RunScenarioArgs, TrainArgs};

fn read_text(path: &Path) -> Res<String> {
    fs::read_to_string(path).env_ctx(&format!("reading {}", path.display()))
}

pub fn load_scenario(path: &Path, seed: Option<u64>) -> Res<ScenarioSpec> {
    let text = read_text(path)?;
    ScenarioSpec::parse(&text, seed)
        .map_err(|e| data(format!("{}:{}: {}", path.display(), e.line, e.msg)))
}

/// Fails with an environment error unless `dir` can take files.
fn ensure_writable_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).env_ctx(&format!("creating {}", dir.display()))?;
    let probe = dir.join(".odapipe-write-probe");
    fs::write(&probe, b"").env_ctx(&format!("{} is not writable", dir.display()))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn create_parent(path: &Path) -> Res<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).env_ctx(&format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn run_scenario(a: &RunScenarioArgs) -> Res<()> {
    let mut spec = load_scenario(&a.config, a.seed)?;
    if let Some(x) = a.accel {
        if !(x >= 0.0 && x.is_finite()) {
            return Err(data("--accel must be a non-negative number"));
        }
        spec.accel = x;
    }
    ensure_writable_dir(&a.out)?;
    let models = match (&a.cs, &a.forest) {
        (Some(cs), Some(forest)) => Some(Models {
            cs: CsModel::load(cs).data_ctx(&format!("loading {}", cs.display()))?,
            forest: ForestModel::load(forest).data_ctx(&format!("loading {}", forest.display()))?,
        }),
        _ => match &spec.training {
            Some(t) => {
                eprintln!(
                    "training models on {} simulated s of {} nodes",
                    t.dataset.duration_s, t.dataset.nodes
                );
                Some(train_for(t).data_ctx("training")?)
            }
            None => None,
        },
    };
    let result = run(&spec, models.as_ref()).data_ctx(&format!("scenario {}", spec.name))?;
    result.write_bundle(&a.out).env_ctx("writing bundle")?;
    print!("{}", result.summary());
    Ok(())
}

fn params(a: &TrainArgs) -> TrainParams {
    let mut p = TrainParams::default();
    p.blocks = a.blocks.unwrap_or(p.blocks);
    p.window = a.window.unwrap_or(p.window);
    p.horizon = a.horizon.unwrap_or(p.horizon);
    p.stride = a.stride.unwrap_or(p.stride);
    p.forest.n_trees = a.trees.unwrap_or(p.forest.n_trees);
    p.forest.max_depth = a.max_depth.unwrap_or(p.forest.max_depth);
    p.forest.min_leaf = a.min_leaf.unwrap_or(p.forest.min_leaf);
    if a.max_samples.is_some() {
        p.forest.max_samples = a.max_samples;
    }
    p
}

fn load_dataset(path: &Path) -> Res<Dataset> {
    if !path.exists() {
        return Err(env(format!("dataset {} does not exist", path.display())));
    }
    Dataset::read_csv(path).data_ctx(&format!("reading {}", path.display()))
}

pub fn train(a: &TrainArgs) -> Res<()> {
    let ds = load_dataset(&a.dataset)?;
    let p = params(a);
    create_parent(&a.out)?;
    match a.kind {
        ModelKind::Cs => {
            let cs = train_cs(&ds, &p).data()?;
            cs.save(&a.out)
                .env_ctx(&format!("writing {}", a.out.display()))?;
            println!(
                "cs rows {} sensors {} blocks {} window {} permutation {:?}",
                ds.samples(),
                cs.sensors.len(),
                cs.blocks,
                cs.window,
                cs.order
            );
        }
        ModelKind::Forest => {
            let cs = match &a.cs {
                Some(path) => {
                    CsModel::load(path).data_ctx(&format!("loading {}", path.display()))?
                }
                None => train_cs(&ds, &p).data()?,
            };
            let (forest, s) = train_forest(&ds, &cs, &p, a.seed).data()?;
            forest
                .save(&a.out)
                .env_ctx(&format!("writing {}", a.out.display()))?;
            println!(
                "forest rows {} samples {} blocks {} window {} trees {} depth {} seed {}",
                s.rows, s.samples, s.blocks, s.window, s.trees, s.max_depth, s.seed
            );
        }
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Res<()> {
    if a.band.is_nan() || a.band <= 0.0 {
        return Err(data("--band must be positive"));
    }
    let ds = load_dataset(&a.dataset)?;
    let cs = CsModel::load(&a.cs).data_ctx(&format!("loading {}", a.cs.display()))?;
    let forest =
        ForestModel::load(&a.forest).data_ctx(&format!("loading {}", a.forest.display()))?;
    let r = evaluate(&ds, &cs, &forest, a.stride.max(1), a.band * 1000.0).data()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let res: std::io::Result<()> = (|| {
        match a.format {
            Format::Csv => {
                writeln!(out, "band_lo_c,band_hi_c,count,nrmse")?;
                writeln!(out, "all,all,{},{:.6}", r.samples, r.nrmse)?;
                for b in &r.bands {
                    writeln!(
                        out,
                        "{:.1},{:.1},{},{:.6}",
                        b.lo / 1000.0,
                        b.lo / 1000.0 + a.band,
                        b.count,
                        b.nrmse
                    )?;
                }
            }
            Format::Table => {
                writeln!(out, "nrmse {:.6} over {} samples", r.nrmse, r.samples)?;
                for b in &r.bands {
                    writeln!(
                        out,
                        "  [{:>5.1}, {:>5.1})  {:>8}  {:.6}",
                        b.lo / 1000.0,
                        b.lo / 1000.0 + a.band,
                        b.count,
                        b.nrmse
                    )?;
                }
            }
        }
        out.flush()
    })();
    res.env()
}

pub fn gen_dataset(a: &GenDatasetArgs) -> Res<()> {
    let spec = load_scenario(&a.config, None)?;
    let mut ds = spec
        .training
        .ok_or_else(|| data(format!("{} has no training block", a.config.display())))?
        .dataset;
    if let Some(s) = a.seed {
        ds.seed = s;
    }
    if let Some(n) = a.nodes {
        ds.nodes = n;
    }
    if let Some(d) = a.duration {
        ds.duration_s = d;
    }
    create_parent(&a.out)?;
    let d = generate_dataset(&ds).data()?;
    d.write_csv(&a.out)
        .env_ctx(&format!("writing {}", a.out.display()))?;
    println!(
        "dataset {} components {} samples seed {}",
        d.components.len(),
        d.samples(),
        ds.seed
    );
    Ok(())
}

fn parse_counts(text: &str) -> Res<Vec<(usize, f64)>> {
    text.split(',')
        .map(|item| {
            let (n, w) = item.split_once(':').unwrap_or((item, "1"));
            match (n.trim().parse::<usize>(), w.trim().parse::<f64>()) {
                (Ok(n), Ok(w)) => Ok((n, w)),
                _ => Err(data(format!(
                    "--node-counts: bad entry {item:?} (expected count:weight)"
                ))),
            }
        })
        .collect()
}

pub fn gen_jobs(a: &GenJobsArgs) -> Res<()> {
    let records = match &a.config {
        Some(path) => {
            let spec = load_scenario(path, a.seed)?;
            let cfg: &PlantConfig = &spec.plant;
            let sched = generate_workload(
                &spec.workload,
                cfg.nodes,
                cfg.sockets,
                spec.seed,
                spec.duration_s as f64,
            )
            .map_err(data)?;
            let names: Vec<_> = (0..cfg.nodes).map(|n| cfg.node_topic(n)).collect();
            jobs_from_schedule(&sched, &names, a.start, 8).data()?
        }
        None => {
            let script = JobScript {
                jobs: a.jobs,
                node_counts: parse_counts(&a.node_counts)?,
                duration_s: (a.min_duration, a.max_duration),
                interarrival_s: a.interarrival,
                nodes: JobScript::rack(&a.prefix, a.nodes).data()?,
                placement: a.placement.parse::<Placement>().map_err(data)?,
                users: a.users,
                start_ts: a.start,
                seed: a.seed.unwrap_or(1),
            };
            generate_jobs(&script).data()?
        }
    };
    create_parent(&a.out)?;
    let f = fs::File::create(&a.out).env_ctx(&format!("creating {}", a.out.display()))?;
    write_jsonl(&records, std::io::BufWriter::new(f)).env_ctx("writing jobs")?;
    println!("{} records", records.len());
    Ok(())
}
