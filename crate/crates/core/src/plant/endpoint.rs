//! TCP sensor and knob endpoint of a simulated plant.
//!
//! Speaks the transport wire protocol: a QUERY returns the current
//! snapshot of every matching sensor (the time range is ignored), and a
//! KNOB frame writes a register.

use std::io::BufWriter;
use std::net::TcpStream;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::clock::SharedClock;
use crate::odac::control::Knob;
use crate::plant::model::Plant;
use crate::reading::Reading;
use crate::topic::Topic;
use crate::transport::client::{query_agent, Link, LinkError, TcpLink};
use crate::transport::frame::{batch_frames, write_frame, Frame, ProtocolError, QuerySource};
use crate::transport::server::Handler;
use crate::transport::SubscriptionPattern;

pub type SharedPlant = Arc<Mutex<Plant>>;

pub fn shared_plant(p: Plant) -> SharedPlant {
    Arc::new(Mutex::new(p))
}

pub struct PlantHandler {
    pub plant: SharedPlant,
    pub clock: SharedClock,
}

impl Handler for PlantHandler {
    fn handle(
        &self,
        frame: Frame,
        out: &mut BufWriter<TcpStream>,
        _: &TcpStream,
    ) -> Result<bool, ProtocolError> {
        match frame {
            Frame::Hello { .. } | Frame::Ping => write_frame(out, &Frame::Ack { count: 0 })?,
            Frame::Query { pattern, .. } => {
                let snap: Vec<Reading> = {
                    let p = self.plant.lock();
                    p.snapshot(self.clock.now_ns())
                };
                let hits: Vec<Reading> = snap
                    .into_iter()
                    .filter(|r| pattern.matches(&r.topic))
                    .collect();
                for f in batch_frames(&hits) {
                    write_frame(out, &f)?;
                }
                write_frame(
                    out,
                    &Frame::End {
                        ok: true,
                        message: String::new(),
                    },
                )?;
            }
            Frame::Knob { topic, value } => {
                let res = self.plant.lock().write(&topic, value);
                match res {
                    Ok(()) => {
                        log::info!("knob {topic} <- {value}");
                        write_frame(out, &Frame::Ack { count: 1 })?
                    }
                    Err(e) => write_frame(
                        out,
                        &Frame::End {
                            ok: false,
                            message: e.to_string(),
                        },
                    )?,
                }
            }
            Frame::Bye => return Ok(false),
            other => write_frame(
                out,
                &Frame::End {
                    ok: false,
                    message: format!("{:?} not accepted by the plant", other.kind()),
                },
            )?,
        }
        Ok(true)
    }
}

/// Reads the current value of every plant sensor matching `pattern`.
pub fn read_plant(addr: &str, pattern: &SubscriptionPattern) -> Result<Vec<Reading>, LinkError> {
    query_agent(addr, pattern, 0, u64::MAX, QuerySource::Any)
}

/// Knob over TCP.
pub struct TcpKnob {
    link: TcpLink,
}

impl TcpKnob {
    pub fn new(addr: &str) -> Self {
        TcpKnob {
            link: TcpLink::new(addr, "controller"),
        }
    }
}

impl Knob for TcpKnob {
    fn set(&mut self, rcu: &Topic, milli: i64) -> Result<(), String> {
        let topic = rcu
            .child(crate::plant::model::SET_TEMP)
            .map_err(|e| e.to_string())?;
        self.link
            .send(&Frame::Knob {
                topic,
                value: milli,
            })
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

/// Knob on an in-process plant.
pub struct LocalKnob(pub SharedPlant);

impl Knob for LocalKnob {
    fn set(&mut self, rcu: &Topic, milli: i64) -> Result<(), String> {
        let topic = rcu
            .child(crate::plant::model::SET_TEMP)
            .map_err(|e| e.to_string())?;
        self.0
            .lock()
            .write(&topic, milli)
            .map_err(|e| e.to_string())
    }
}
