//! TCP front-ends. One thread per connection; frames on a connection are
//! processed serially.

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::transport::broker::Agent;
use crate::transport::frame::{batch_frames, read_frame, write_frame, Frame, ProtocolError};

pub const DEFAULT_PORT: u16 = 18830;

/// Per-connection frame handler. Returning `Ok(false)` closes the
/// connection.
pub trait Handler: Send + Sync + 'static {
    fn handle(
        &self,
        frame: Frame,
        out: &mut BufWriter<TcpStream>,
        stream: &TcpStream,
    ) -> Result<bool, ProtocolError>;
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind<H: Handler>(addr: &str, handler: Arc<H>) -> std::io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept = std::thread::Builder::new()
            .name(format!("accept-{local}"))
            .spawn(move || {
                while !stop2.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            let h = handler.clone();
                            let stop3 = stop2.clone();
                            std::thread::spawn(move || {
                                if let Err(e) = serve_conn(stream, &*h, &stop3) {
                                    log::debug!("connection {peer} dropped: {e}");
                                }
                            });
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(5));
                        }
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            std::thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })?;
        Ok(Server {
            addr: local,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting. Live connections end when their peer disconnects
    /// or at their next read timeout.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn serve_conn<H: Handler + ?Sized>(
    stream: TcpStream,
    handler: &H,
    stop: &AtomicBool,
) -> Result<(), ProtocolError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true).ok();
    stream.set_read_timeout(Some(Duration::from_millis(500)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(ProtocolError::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                // idle; a timeout mid-frame would surface as UnexpectedEnd
                if stop.load(Ordering::Acquire) {
                    return Ok(());
                }
                continue;
            }
            Err(e) => {
                let _ = write_frame(
                    &mut writer,
                    &Frame::End {
                        ok: false,
                        message: e.to_string(),
                    },
                );
                let _ = writer.flush();
                return Err(e);
            }
        };
        if !handler.handle(frame, &mut writer, &stream)? {
            writer.flush()?;
            return Ok(());
        }
        writer.flush()?;
    }
}

/// Serves an [`Agent`] over TCP.
pub struct AgentHandler {
    pub agent: Arc<Agent>,
}

impl Handler for AgentHandler {
    fn handle(
        &self,
        frame: Frame,
        out: &mut BufWriter<TcpStream>,
        stream: &TcpStream,
    ) -> Result<bool, ProtocolError> {
        match frame {
            Frame::Hello { .. } => write_frame(out, &Frame::Ack { count: 0 })?,
            f @ (Frame::Publish(_) | Frame::Batch(_)) => {
                let rs = f.readings();
                match self.agent.route(&rs) {
                    Ok(_) => write_frame(
                        out,
                        &Frame::Ack {
                            count: rs.len() as u32,
                        },
                    )?,
                    Err(e) => write_frame(
                        out,
                        &Frame::End {
                            ok: false,
                            message: e.to_string(),
                        },
                    )?,
                }
            }
            Frame::Subscribe(pattern) => {
                let (id, rx) = self.agent.subscribe(pattern);
                write_frame(out, &Frame::Ack { count: 0 })?;
                out.flush()?;
                let mut push = BufWriter::new(stream.try_clone()?);
                let agent = self.agent.clone();
                std::thread::spawn(move || {
                    while let Ok(first) = rx.recv() {
                        let mut batch = vec![first];
                        batch.extend(rx.try_iter());
                        let ok = batch_frames(&batch)
                            .iter()
                            .all(|f| write_frame(&mut push, f).is_ok())
                            && push.flush().is_ok();
                        if !ok {
                            break;
                        }
                    }
                    agent.unsubscribe(id);
                });
            }
            Frame::Ping => write_frame(out, &Frame::Ping)?,
            Frame::Bye => return Ok(false),
            Frame::Query {
                pattern,
                from,
                to,
                source,
            } => match self.agent.query(&pattern, from, to, source) {
                Ok(rs) => {
                    for f in batch_frames(&rs) {
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
                Err(e) => write_frame(
                    out,
                    &Frame::End {
                        ok: false,
                        message: e.to_string(),
                    },
                )?,
            },
            other => write_frame(
                out,
                &Frame::End {
                    ok: false,
                    message: format!("{:?} not accepted by a collect agent", other.kind()),
                },
            )?,
        }
        Ok(true)
    }
}
