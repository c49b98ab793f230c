use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use log::warn;
use serde_json::Value;

use super::protocol::{read_frame, write_frame, Frame, FrameError};

const SYNC_PREFIX: &str = "_sync.";

static NEXT_SYNC: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Value,
}

/// A broker connection. Deliveries arrive on an internal channel fed by a
/// reader thread; publishing is safe from several threads.
pub struct BrokerClient {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    deliveries: Receiver<Delivery>,
    syncs: Receiver<String>,
    sync_topic: String,
}

impl BrokerClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (tx, deliveries) = unbounded();
        let (sync_tx, syncs) = unbounded();
        let mut reader = BufReader::new(stream.try_clone()?);
        thread::Builder::new()
            .name("broker-client-r".into())
            .spawn(move || loop {
                match read_frame(&mut reader) {
                    Ok(Some(Frame::Msg { topic, payload })) => {
                        if topic.starts_with(SYNC_PREFIX) {
                            let _ = sync_tx.send(payload.as_str().unwrap_or_default().to_string());
                        } else if tx.send(Delivery { topic, payload }).is_err() {
                            break;
                        }
                    }
                    Ok(Some(Frame::Error { message })) => {
                        warn!("broker closed connection: {message}");
                        break;
                    }
                    Ok(Some(other)) => {
                        warn!("unexpected frame from broker: {other:?}");
                        break;
                    }
                    Ok(None) | Err(FrameError::Io(_)) => break,
                    Err(e) => {
                        warn!("broker stream error: {e}");
                        break;
                    }
                }
            })?;
        let sync_topic = format!(
            "{SYNC_PREFIX}{}.{}",
            std::process::id(),
            NEXT_SYNC.fetch_add(1, Ordering::Relaxed)
        );
        let client = Self {
            writer: Mutex::new(BufWriter::new(stream.try_clone()?)),
            stream,
            deliveries,
            syncs,
            sync_topic,
        };
        client.send(&Frame::Sub {
            topic: client.sync_topic.clone(),
        })?;
        Ok(client)
    }

    fn send(&self, frame: &Frame) -> io::Result<()> {
        let mut w = self.writer.lock().expect("client writer lock");
        write_frame(&mut *w, frame).map_err(|e| match e {
            FrameError::Io(e) => e,
            other => io::Error::new(io::ErrorKind::InvalidData, other.to_string()),
        })
    }

    pub fn subscribe(&self, topic: &str) -> io::Result<()> {
        self.send(&Frame::Sub {
            topic: topic.to_string(),
        })
    }

    pub fn publish(&self, topic: &str, payload: Value) -> io::Result<()> {
        self.send(&Frame::Pub {
            topic: topic.to_string(),
            payload,
        })
    }

    /// Waits until the broker has processed every frame sent so far on this
    /// connection (e.g. so a subscription is known to be active).
    pub fn barrier(&self, timeout: Duration) -> io::Result<()> {
        let token = format!("{:?}", Instant::now());
        self.publish(&self.sync_topic, Value::String(token.clone()))?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.syncs.recv_timeout(left) {
                Ok(t) if t == token => return Ok(()),
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "broker barrier timed out"))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(io::ErrorKind::ConnectionAborted.into())
                }
            }
        }
    }

    /// `Ok(None)` on timeout, `Err` once the connection is gone.
    pub fn recv_timeout(&self, timeout: Duration) -> io::Result<Option<Delivery>> {
        match self.deliveries.recv_timeout(timeout) {
            Ok(d) => Ok(Some(d)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(io::ErrorKind::ConnectionAborted.into()),
        }
    }

    pub fn deliveries(&self) -> &Receiver<Delivery> {
        &self.deliveries
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Capped exponential backoff: `initial`, doubling up to `max`.
#[derive(Debug, Clone)]
pub struct Backoff {
    next: Duration,
    max: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Self {
        Self { next: initial, max }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(self.max);
        d
    }
}
