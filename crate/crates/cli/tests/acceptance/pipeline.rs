use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use odapipe::agentd::RunningAgent;
use odapipe::storage::store::{Store, StoreConfig};
use odapipe::transport::client::{Link, TcpLink};
use odapipe::transport::frame::batch_frames;
use odapipe::{Clock, Reading, SharedClock, Topic, WallClock};

use crate::common::{ensure, odapipe, path_str};
use crate::Outcome;

const TARGET_RATE: f64 = 50_000.0;
const OFFERED_PER_TICK: usize = 600;
const TICK: Duration = Duration::from_millis(10);
const LOAD_SECS: u64 = 60;
const MAX_STALL: Duration = Duration::from_millis(100);

pub fn ingest_throughput() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = format!(
        "agent {{\n  listen \"127.0.0.1:0\"\n  dataDir \"{}\"\n  ttl 0\n  flush 1000\n  queue 256\n}}\n",
        dir.path().display()
    );
    let clock: SharedClock = Arc::new(WallClock);
    let agent = RunningAgent::start(&text, clock.clone()).map_err(|e| e.to_string())?;
    let mut link = TcpLink::new(agent.local_addr().to_string(), "load");
    let topics: Vec<Topic> = (0..2_000)
        .map(|i| Topic::parse(&format!("/load/n{:03}/s{:02}", i / 20, i % 20)).unwrap())
        .collect();

    let start = Instant::now();
    let mut acked = 0u64;
    let mut max_send = Duration::ZERO;
    let mut max_gap = Duration::ZERO;
    let mut last = start;
    let mut k = 0usize;
    while start.elapsed() < Duration::from_secs(LOAD_SECS) {
        let due = start + TICK * k as u32;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let ts = clock.now_ns();
        let readings: Vec<Reading> = (0..OFFERED_PER_TICK)
            .map(|j| {
                let i = (k * OFFERED_PER_TICK + j) % topics.len();
                Reading::new(topics[i].clone(), ts, (k * 7 + j) as i64)
            })
            .collect();
        for f in batch_frames(&readings) {
            let t = Instant::now();
            acked += link
                .send(&f)
                .map_err(|e| format!("send failed after {acked} readings: {e}"))?
                as u64;
            max_send = max_send.max(t.elapsed());
        }
        let now = Instant::now();
        max_gap = max_gap.max(now - last);
        last = now;
        k += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    drop(link);
    agent.shutdown().map_err(|e| e.to_string())?;

    let store = Store::open(StoreConfig::new(dir.path()), clock).map_err(|e| e.to_string())?;
    let stored: usize = store
        .topics()
        .iter()
        .map(|t| store.query_topic(t, 0, u64::MAX).len())
        .sum();
    let rate = acked as f64 / elapsed;
    let detail = format!(
        "{acked} readings in {elapsed:.1} s = {rate:.0}/s, slowest batch {:.1} ms, longest gap {:.1} ms, {stored} stored",
        max_send.as_secs_f64() * 1e3,
        max_gap.as_secs_f64() * 1e3
    );
    ensure(rate >= TARGET_RATE, || detail.clone())?;
    ensure(max_send <= MAX_STALL && max_gap <= MAX_STALL, || {
        format!("stall: {detail}")
    })?;
    ensure(stored as u64 == acked, || {
        format!("lost readings: {detail}")
    })?;
    Ok(detail)
}

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(args: &[&str]) -> Result<Daemon, String> {
    Command::new(env!("CARGO_BIN_EXE_odapipe"))
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map(Daemon)
        .map_err(|e| e.to_string())
}

fn free_port() -> Result<u16, String> {
    let l = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    Ok(l.local_addr().map_err(|e| e.to_string())?.port())
}

fn wall_ns() -> u64 {
    WallClock.now_ns()
}

/// Timestamps of the CSV rows `odapipe query` prints.
fn query_timestamps(args: &[&str]) -> Result<Vec<u64>, String> {
    let o = odapipe(args);
    if !o.status.success() {
        return Err(format!(
            "query {args:?}: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect())
}

const SAMPLE_MS: u64 = 1_000;
const FLUSH_MS: u64 = 1_000;

pub fn freshness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let data = d.join("store");
    let port = free_port()?;
    let addr = format!("127.0.0.1:{port}");
    let agent_conf = d.join("agent.conf");
    std::fs::write(
        &agent_conf,
        format!(
            "agent {{\n  listen \"{addr}\"\n  dataDir \"{}\"\n  flush {FLUSH_MS}\n}}\n",
            data.display()
        ),
    )
    .map_err(|e| e.to_string())?;
    let meminfo = d.join("meminfo");
    std::fs::write(&meminfo, "MemFree: 4096 kB\n").map_err(|e| e.to_string())?;
    let pusher_conf = d.join("pusher.conf");
    std::fs::write(
        &pusher_conf,
        format!(
            "pusher {{\n  prefix \"/fresh/n0\"\n  agent \"{addr}\"\n}}\nfile mem {{\n  path \"{}\"\n  kind meminfo\n  interval {SAMPLE_MS}\n  sensor MemFree {{\n    name mem-free\n  }}\n}}\n",
            meminfo.display()
        ),
    )
    .map_err(|e| e.to_string())?;

    let _agent = spawn(&[
        "agent",
        "--config",
        path_str(&agent_conf),
        "--duration",
        "60",
    ])?;
    let up = Instant::now();
    while TcpStream::connect(&addr).is_err() {
        ensure(up.elapsed() < Duration::from_secs(10), || {
            "agent did not start listening".into()
        })?;
        std::thread::sleep(Duration::from_millis(20));
    }
    let _pusher = spawn(&[
        "pusher",
        "--config",
        path_str(&pusher_conf),
        "--duration",
        "60",
    ])?;

    let begin = wall_ns();
    let from = begin.to_string();
    let topic = "/fresh/n0/mem-free";
    // first time each sample timestamp became visible on each path
    let mut cache: BTreeMap<u64, u64> = BTreeMap::new();
    let mut agent_store: BTreeMap<u64, u64> = BTreeMap::new();
    let mut disk: BTreeMap<u64, u64> = BTreeMap::new();
    let watch = Instant::now();
    while watch.elapsed() < Duration::from_secs(10) {
        for (map, args) in [
            (
                &mut cache,
                vec![
                    "query", topic, "--agent", &addr, "--source", "cache", "--from", &from,
                ],
            ),
            (
                &mut agent_store,
                vec![
                    "query", topic, "--agent", &addr, "--source", "store", "--from", &from,
                ],
            ),
            (
                &mut disk,
                vec!["query", topic, "--store", path_str(&data), "--from", &from],
            ),
        ] {
            let seen = match query_timestamps(&args) {
                Ok(ts) => ts,
                // the store directory appears with the first flush
                Err(_) if args.contains(&"--store") && !data.is_dir() => Vec::new(),
                Err(e) => return Err(e),
            };
            let now = wall_ns();
            for ts in seen {
                map.entry(ts).or_insert(now);
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }

    let worst = |m: &BTreeMap<u64, u64>| -> Option<f64> {
        // the last samples may not have had their full window yet
        let settled = wall_ns() - 2 * FLUSH_MS.max(SAMPLE_MS) * 1_000_000;
        m.iter()
            .filter(|(ts, _)| **ts < settled)
            .map(|(ts, seen)| (seen - ts) as f64 / 1e6)
            .reduce(f64::max)
    };
    let summary = |name: &str, m: &BTreeMap<u64, u64>| match worst(m) {
        Some(w) => format!("{name} {} samples, worst {w:.0} ms", m.len()),
        None => format!("{name} no samples"),
    };
    let detail = format!(
        "{}; {}; {}",
        summary("cache", &cache),
        summary("agent store", &agent_store),
        summary("on disk", &disk)
    );
    let settled = wall_ns() - 2 * FLUSH_MS.max(SAMPLE_MS) * 1_000_000;
    for ts in cache.keys().filter(|t| **t < settled) {
        ensure(
            agent_store.contains_key(ts) && disk.contains_key(ts),
            || format!("sample {ts} never stored: {detail}"),
        )?;
    }
    for (m, bound) in [
        (&cache, 2 * SAMPLE_MS),
        (&agent_store, 2 * FLUSH_MS),
        (&disk, 2 * FLUSH_MS),
    ] {
        ensure(m.len() >= 5, || format!("too few samples: {detail}"))?;
        let w = worst(m).ok_or_else(|| format!("no settled samples: {detail}"))?;
        ensure(w <= bound as f64, || format!("over {bound} ms: {detail}"))?;
    }
    Ok(detail)
}
