//! `odapipe`: query, simulate, train, evaluate and run pipeline daemons.

mod daemon;
mod fail;
mod query;
mod sim;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use odapipe::transport::server::DEFAULT_PORT;

#[derive(Parser, Debug)]
#[command(
    name = "odapipe",
    version,
    about = "Telemetry pipeline and predictive cooling control tools"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Readings for a topic or pattern from an agent or a store directory.
    Query(QueryArgs),
    /// Runs a scenario in virtual time and writes its CSV bundle.
    RunScenario(RunScenarioArgs),
    /// Trains a signature or forest model from a dataset CSV.
    Train(TrainArgs),
    /// Prediction error of a model pair on a dataset CSV.
    Eval(EvalArgs),
    /// Parses a scenario, agent or pusher config and resolves its operators.
    ValidateConfig(ValidateArgs),
    /// Operator unit status from an agent's control endpoint.
    Status(StatusArgs),
    /// Pauses, resumes or retrains one operator unit.
    Unit(UnitArgs),
    /// Runs a collect agent.
    Agent(DaemonArgs),
    /// Runs a pusher.
    Pusher(PusherArgs),
    /// Serves a simulated plant over TCP in wall-clock time.
    PlantServe(PlantServeArgs),
    /// Writes an open-loop training dataset CSV.
    GenDataset(GenDatasetArgs),
    /// Writes job start and end records as JSONL.
    GenJobs(GenJobsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Table,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Any,
    Cache,
    Store,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cs,
    Forest,
}

/// RFC 3339 or integer nanoseconds since the epoch.
fn parse_time(s: &str) -> Result<u64, String> {
    if let Ok(ns) = s.parse::<u64>() {
        return Ok(ns);
    }
    let t = chrono::DateTime::parse_from_rfc3339(s)
        .map_err(|e| format!("expected RFC 3339 or unix nanoseconds ({e})"))?;
    t.timestamp_nanos_opt()
        .and_then(|n| u64::try_from(n).ok())
        .ok_or_else(|| "time outside the representable range".to_string())
}

fn default_agent() -> String {
    format!("127.0.0.1:{DEFAULT_PORT}")
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    /// Topic or pattern with a trailing `/#`.
    pub pattern: String,
    /// Agent address.
    #[arg(long, env = "ODAPIPE_AGENT_ADDR", default_value_t = default_agent())]
    pub agent: String,
    /// Read a store directory instead of asking an agent.
    #[arg(long, conflicts_with = "source")]
    pub store: Option<PathBuf>,
    #[arg(long, value_parser = parse_time, default_value = "0")]
    pub from: u64,
    #[arg(long, value_parser = parse_time, default_value_t = u64::MAX)]
    pub to: u64,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Agent-side data source.
    #[arg(long, value_enum)]
    pub source: Option<Source>,
}

#[derive(Args, Debug)]
pub struct RunScenarioArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulated seconds per wall second; 0 runs unpaced.
    #[arg(long)]
    pub accel: Option<f64>,
    /// Pre-trained signature model; requires --forest.
    #[arg(long, requires = "forest")]
    pub cs: Option<PathBuf>,
    /// Pre-trained forest model; requires --cs.
    #[arg(long, requires = "cs")]
    pub forest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ModelKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Signature model to build forest features with; trained from the
    /// dataset when absent.
    #[arg(long)]
    pub cs: Option<PathBuf>,
    #[arg(long, default_value_t = 1001)]
    pub seed: u64,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub max_samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub cs: PathBuf,
    #[arg(long)]
    pub forest: PathBuf,
    /// Samples between evaluated windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Band width for per-band errors, degrees Celsius.
    #[arg(long, default_value_t = 5.0)]
    pub band: f64,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Sensor inventory, one topic per line, for resolving expressions.
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    /// Resolve against a simulated rack of this many nodes, including
    /// per-socket prediction sensors.
    #[arg(long)]
    pub plant_nodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct StatusArgs {
    /// Control endpoint of the agent.
    #[arg(long, env = "ODAPIPE_CONTROL_ADDR", default_value = "127.0.0.1:18832")]
    pub control: String,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitAction {
    Pause,
    Resume,
    Retrain,
}

#[derive(Args, Debug)]
pub struct UnitArgs {
    #[arg(value_enum)]
    pub action: UnitAction,
    pub unit: String,
    #[arg(long, env = "ODAPIPE_CONTROL_ADDR", default_value = "127.0.0.1:18832")]
    pub control: String,
}

#[derive(Args, Debug)]
pub struct DaemonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Exit after this many seconds instead of running until killed.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PusherArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Node prefix overriding the config.
    #[arg(long, env = "ODAPIPE_NODE_PREFIX")]
    pub prefix: Option<String>,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PlantServeArgs {
    /// Scenario config supplying the plant and workload.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:18831")]
    pub listen: String,
    /// Simulated seconds per wall second.
    #[arg(long, default_value_t = 1.0)]
    pub accel: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenDatasetArgs {
    /// Scenario config whose training block describes the dataset.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    pub duration: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenJobsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Derive jobs from a scenario's workload so they line up with its
    /// load phases.
    #[arg(long, conflicts_with_all = ["jobs", "node_counts", "placement"])]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub jobs: usize,
    /// Nodes in the rack.
    #[arg(long, default_value_t = 50)]
    pub nodes: usize,
    #[arg(long, default_value = "/deepest/cm")]
    pub prefix: String,
    /// `count:weight` pairs, comma separated.
    #[arg(long, default_value = "1:4,2:3,4:2,8:1")]
    pub node_counts: String,
    #[arg(long, default_value_t = 600)]
    pub min_duration: u64,
    #[arg(long, default_value_t = 7200)]
    pub max_duration: u64,
    /// Mean seconds between submissions.
    #[arg(long, default_value_t = 300.0)]
    pub interarrival: f64,
    #[arg(long, default_value = "packed")]
    pub placement: String,
    #[arg(long, default_value_t = 8)]
    pub users: usize,
    #[arg(long, value_parser = parse_time, default_value = "0")]
    pub start: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match cli.cmd {
        Cmd::Query(a) => query::run(&a),
        Cmd::RunScenario(a) => sim::run_scenario(&a),
        Cmd::Train(a) => sim::train(&a),
        Cmd::Eval(a) => sim::eval(&a),
        Cmd::ValidateConfig(a) => validate::run(&a),
        Cmd::Status(a) => daemon::status(&a),
        Cmd::Unit(a) => daemon::unit(&a),
        Cmd::Agent(a) => daemon::agent(&a),
        Cmd::Pusher(a) => daemon::pusher(&a),
        Cmd::PlantServe(a) => daemon::plant_serve(&a),
        Cmd::GenDataset(a) => sim::gen_dataset(&a),
        Cmd::GenJobs(a) => sim::gen_jobs(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
