use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use odapipe::plant::scenario::{run_scenario, train_for, Models, ScenarioResult, ScenarioSpec};

pub fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

/// Fails the criterion with a message when `cond` is false.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn odapipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odapipe"))
        .args(args)
        .env_remove("ODAPIPE_AGENT_ADDR")
        .output()
        .expect("spawn odapipe")
}

pub fn odapipe_ok(args: &[&str]) -> Result<String, String> {
    let o = odapipe(args);
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!(
            "odapipe {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every shipped scenario, by file name.
pub fn shipped_scenarios() -> Vec<(String, ScenarioSpec)> {
    let dir = repo_path("configs/scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .expect("scenario directory")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "conf"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let spec = ScenarioSpec::from_file(&p, None)
                .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (name, spec)
        })
        .collect()
}

pub struct Run {
    pub name: String,
    pub spec: ScenarioSpec,
    pub result: ScenarioResult,
    pub wall_s: f64,
}

/// Models trained from the shipped training block, shared by every
/// scenario that declares the same one.
pub fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let specs = shipped_scenarios();
        let training = specs
            .iter()
            .find_map(|(_, s)| s.training.clone())
            .expect("a training block");
        train_for(&training).expect("training")
    })
}

/// Runs every shipped scenario once.
pub fn runs() -> &'static [Run] {
    static R: OnceLock<Vec<Run>> = OnceLock::new();
    R.get_or_init(|| {
        let m = models();
        let first = shipped_scenarios()
            .into_iter()
            .find_map(|(_, s)| s.training)
            .expect("training");
        shipped_scenarios()
            .into_iter()
            .map(|(name, spec)| {
                assert!(
                    spec.training.as_ref().is_none_or(|t| *t == first),
                    "{name} declares a different training block"
                );
                let t = std::time::Instant::now();
                let result = run_scenario(&spec, Some(m)).unwrap_or_else(|e| panic!("{name}: {e}"));
                Run {
                    name,
                    spec,
                    result,
                    wall_s: t.elapsed().as_secs_f64(),
                }
            })
            .collect()
    })
}

pub fn run_named(name: &str) -> Result<&'static Run, String> {
    runs()
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| format!("no shipped scenario {name}"))
}
