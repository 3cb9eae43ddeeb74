//! Line-oriented control endpoint.
//!
//! Each request is one line; each response is zero or more body lines
//! followed by a terminating `ok` or `error: <reason>` line.
//!
//! ```text
//! status
//! retrain <unit>
//! pause <unit>
//! resume <unit>
//! ```

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::clock::SharedClock;
use crate::operator::Scheduler;

/// Executes one command line. `Ok` carries the body lines.
pub fn execute(sched: &Scheduler, line: &str, now: u64) -> Result<Vec<String>, String> {
    let mut words = line.split_whitespace();
    let cmd = words.next().unwrap_or("");
    let arg = words.next();
    if words.next().is_some() {
        return Err("too many arguments".into());
    }
    let unit = |a: Option<&str>| {
        let name = a.ok_or_else(|| format!("{cmd} needs a unit name"))?;
        sched
            .unit(name)
            .cloned()
            .ok_or_else(|| format!("unknown unit {name:?}"))
    };
    match cmd {
        "status" => Ok(sched
            .units()
            .iter()
            .map(|u| {
                let s = u.status();
                format!(
                    "{} placement={} interval_ms={} runs={} last_run={} failures={} consecutive_failures={} skipped={} paused={}",
                    u.name(),
                    u.spec.placement,
                    u.spec.interval_ms,
                    s.runs,
                    s.last_run,
                    s.failures,
                    s.consecutive_failures,
                    s.skipped,
                    s.paused
                )
            })
            .collect()),
        "pause" | "resume" => {
            let u = unit(arg)?;
            u.set_paused(cmd == "pause");
            Ok(Vec::new())
        }
        "retrain" => {
            let u = unit(arg)?;
            sched.retrain(u.name(), now).map(|msg| vec![msg])
        }
        "" => Err("empty command".into()),
        other => Err(format!("unknown command {other:?} (expected status, retrain, pause or resume)")),
    }
}

pub struct ControlServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ControlServer {
    pub fn bind(addr: &str, sched: Arc<Scheduler>, clock: SharedClock) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept = std::thread::spawn(move || {
            while !stop2.load(Ordering::Acquire) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let sched = sched.clone();
                        let clock = clock.clone();
                        std::thread::spawn(move || {
                            if let Err(e) = serve(stream, &sched, &clock) {
                                log::debug!("control connection dropped: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => {
                        log::warn!("control accept failed: {e}");
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });
        Ok(ControlServer {
            addr: local,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, sched: &Scheduler, clock: &SharedClock) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        match execute(sched, line.trim(), clock.now_ns()) {
            Ok(body) => {
                for l in body {
                    writeln!(out, "{l}")?;
                }
                writeln!(out, "ok")?;
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
        out.flush()?;
    }
    Ok(())
}

/// Sends one command and collects the response body.
pub fn send_command(addr: &str, line: &str) -> std::io::Result<Result<Vec<String>, String>> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut w = stream.try_clone()?;
    writeln!(w, "{line}")?;
    w.flush()?;
    let mut body = Vec::new();
    for l in BufReader::new(stream).lines() {
        let l = l?;
        if l == "ok" {
            return Ok(Ok(body));
        }
        if let Some(e) = l.strip_prefix("error: ") {
            return Ok(Err(e.to_string()));
        }
        body.push(l);
    }
    Err(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        "control connection closed before the response ended",
    ))
}
