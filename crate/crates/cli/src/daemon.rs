use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use odapipe::agentd::RunningAgent;
use odapipe::operator::control::send_command;
use odapipe::plant::apply_workload;
use odapipe::plant::endpoint::{shared_plant, PlantHandler, SharedPlant};
use odapipe::plant::model::Plant;
use odapipe::plant::workload::generate_workload;
use odapipe::pusher::config::build_pusher;
use odapipe::transport::server::Server;
use odapipe::{SharedClock, WallClock};

use crate::fail::{data, env, Classify, Res};
use crate::sim::load_scenario;
use crate::{DaemonArgs, Format, PlantServeArgs, PusherArgs, StatusArgs, UnitAction, UnitArgs};

fn deadline(duration: Option<f64>) -> Res<Option<Instant>> {
    match duration {
        Some(d) if !(d >= 0.0 && d.is_finite()) => {
            Err(data("--duration must be a non-negative number of seconds"))
        }
        Some(d) => Ok(Some(Instant::now() + Duration::from_secs_f64(d))),
        None => Ok(None),
    }
}

fn expired(end: Option<Instant>) -> bool {
    end.is_some_and(|e| Instant::now() >= e)
}

fn control(addr: &str, line: &str) -> Res<Vec<String>> {
    match send_command(addr, line) {
        Ok(Ok(lines)) => Ok(lines),
        Ok(Err(msg)) => Err(data(msg)),
        Err(e) => Err(env(format!("control endpoint {addr}: {e}"))),
    }
}

pub fn status(a: &StatusArgs) -> Res<()> {
    let lines = control(&a.control, "status")?;
    match a.format {
        Format::Table => {
            for l in lines {
                println!("{l}");
            }
        }
        Format::Csv => {
            // `name k=v k=v ...` lines become one row per unit
            let mut header = false;
            for l in lines {
                let mut words = l.split_whitespace();
                let name = words.next().unwrap_or_default();
                let kv: Vec<(&str, &str)> = words.filter_map(|w| w.split_once('=')).collect();
                if !header {
                    let keys: Vec<&str> = kv.iter().map(|p| p.0).collect();
                    println!("unit,{}", keys.join(","));
                    header = true;
                }
                let vals: Vec<&str> = kv.iter().map(|p| p.1).collect();
                println!("{name},{}", vals.join(","));
            }
        }
    }
    Ok(())
}

pub fn unit(a: &UnitArgs) -> Res<()> {
    let verb = match a.action {
        UnitAction::Pause => "pause",
        UnitAction::Resume => "resume",
        UnitAction::Retrain => "retrain",
    };
    for l in control(&a.control, &format!("{verb} {}", a.unit))? {
        println!("{l}");
    }
    Ok(())
}

pub fn agent(a: &DaemonArgs) -> Res<()> {
    let end = deadline(a.duration)?;
    let text =
        std::fs::read_to_string(&a.config).env_ctx(&format!("reading {}", a.config.display()))?;
    let clock: SharedClock = Arc::new(WallClock);
    let mut agent = RunningAgent::start(&text, clock).map_err(|e| match e {
        odapipe::agentd::AgentdError::Config(_) => data(e),
        _ => env(e),
    })?;
    eprintln!("agent listening on {}", agent.local_addr());
    let resolve_at = Instant::now() + Duration::from_millis(agent.config.resolve_delay_ms);
    let tick = Duration::from_millis(agent.config.flush_ms.clamp(10, 1000));
    let mut started = false;
    while !expired(end) {
        if !started && Instant::now() >= resolve_at {
            let units = agent.start_operators().map_err(data)?;
            eprintln!("operators running: {}", units.join(", "));
            if let Some(c) = agent.control_addr() {
                eprintln!("control endpoint on {c}");
            }
            started = true;
        }
        agent.housekeeping().env_ctx("store housekeeping")?;
        std::thread::sleep(tick);
    }
    agent.shutdown().env_ctx("shutting down")
}

pub fn pusher(a: &PusherArgs) -> Res<()> {
    let end = deadline(a.duration)?;
    let text =
        std::fs::read_to_string(&a.config).env_ctx(&format!("reading {}", a.config.display()))?;
    let clock: SharedClock = Arc::new(WallClock);
    let (pc, mut p) =
        build_pusher(&text, a.prefix.as_deref(), clock.clone()).data_ctx("pusher config")?;
    eprintln!(
        "pusher {} publishing {} sensors to {}",
        pc.prefix,
        p.inventory().len(),
        pc.agent
    );
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let worker = std::thread::spawn(move || {
        p.run(clock, stop2);
        p.publisher_stats()
    });
    while !expired(end) {
        std::thread::sleep(Duration::from_millis(100));
    }
    stop.store(true, Ordering::Release);
    let stats = worker.join().map_err(|_| env("pusher thread panicked"))?;
    eprintln!("pusher stopped: {stats:?}");
    Ok(())
}

pub fn plant_serve(a: &PlantServeArgs) -> Res<()> {
    if !(a.accel > 0.0 && a.accel.is_finite()) {
        return Err(data("--accel must be positive"));
    }
    let end = deadline(a.duration)?;
    let spec = load_scenario(&a.config, a.seed)?;
    let cfg = spec.plant.clone();
    let horizon = spec.duration_s as f64;
    let sched = generate_workload(&spec.workload, cfg.nodes, cfg.sockets, spec.seed, horizon)
        .map_err(data)?;
    let plant: SharedPlant = shared_plant(Plant::new(cfg.clone()).data()?);
    let handler = Arc::new(PlantHandler {
        plant: plant.clone(),
        clock: Arc::new(WallClock),
    });
    let server = Server::bind(&a.listen, handler).env_ctx(&format!("listening on {}", a.listen))?;
    eprintln!(
        "plant with {} nodes on {} at {}x",
        cfg.nodes,
        server.local_addr(),
        a.accel
    );
    let start = Instant::now();
    let mut t = 0.0;
    while !expired(end) {
        t += cfg.dt;
        {
            let mut p = plant.lock();
            // the workload repeats after the scenario duration
            apply_workload(&mut p, &sched, t % horizon);
            p.step().data()?;
        }
        let due = start + Duration::from_secs_f64(t / a.accel);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    server.shutdown();
    Ok(())
}
