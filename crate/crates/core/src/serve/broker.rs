//! In-process topic broker over TCP, standing in for the store message bus.
//!
//! Fan-out to every current subscriber of a topic; nothing is persisted and
//! messages published to a topic without subscribers are dropped and counted.
//! Each connection gets its own writer thread, so delivery to one subscriber
//! preserves publish order.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crossbeam_channel::{unbounded, Sender};
use log::{debug, warn};

use super::protocol::{encode_frame, read_frame, write_frame, Frame, FrameError};

type ConnId = u64;

#[derive(Default)]
struct BrokerState {
    topics: Mutex<HashMap<String, Vec<(ConnId, Sender<Arc<Vec<u8>>>)>>>,
    connections: Mutex<HashMap<ConnId, TcpStream>>,
    published: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
    stopping: AtomicBool,
}

impl BrokerState {
    fn publish(&self, topic: String, payload: serde_json::Value) {
        self.published.fetch_add(1, Ordering::Relaxed);
        let topics = self.topics.lock().expect("broker lock");
        let subs = match topics.get(&topic) {
            Some(s) if !s.is_empty() => s,
            _ => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                return;
            }
        };
        let frame = match encode_frame(&Frame::Msg { topic, payload }) {
            Ok(f) => Arc::new(f),
            Err(e) => {
                warn!("dropping undeliverable message: {e}");
                self.dropped.fetch_add(1, Ordering::Relaxed);
                return;
            }
        };
        for (_, tx) in subs {
            if tx.send(frame.clone()).is_ok() {
                self.delivered.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    fn forget(&self, conn: ConnId) {
        let mut topics = self.topics.lock().expect("broker lock");
        for subs in topics.values_mut() {
            subs.retain(|(id, _)| *id != conn);
        }
        self.connections.lock().expect("broker lock").remove(&conn);
    }
}

/// A running broker. Dropping the handle stops it.
pub struct BrokerHandle {
    addr: SocketAddr,
    state: Arc<BrokerState>,
    accept: Option<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Messages published to a topic that had no subscribers.
    pub fn dropped(&self) -> u64 {
        self.state.dropped.load(Ordering::Relaxed)
    }

    pub fn published(&self) -> u64 {
        self.state.published.load(Ordering::Relaxed)
    }

    pub fn delivered(&self) -> u64 {
        self.state.delivered.load(Ordering::Relaxed)
    }

    /// Blocks until the broker is stopped from another handle clone or the process ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.state.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.state.connections.lock().expect("broker lock").drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `listen_addr` and starts serving in background threads.
pub fn broker_sim(listen_addr: impl ToSocketAddrs) -> io::Result<BrokerHandle> {
    let listener = TcpListener::bind(listen_addr)?;
    let addr = listener.local_addr()?;
    let state = Arc::new(BrokerState::default());
    let accept_state = state.clone();
    let accept = thread::Builder::new()
        .name("broker-accept".into())
        .spawn(move || {
            let mut next_id: ConnId = 0;
            for stream in listener.incoming() {
                if accept_state.stopping.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(s) => {
                        next_id += 1;
                        if let Err(e) = spawn_connection(next_id, s, accept_state.clone()) {
                            warn!("broker: connection setup failed: {e}");
                        }
                    }
                    Err(e) => warn!("broker: accept failed: {e}"),
                }
            }
        })?;
    Ok(BrokerHandle {
        addr,
        state,
        accept: Some(accept),
    })
}

fn spawn_connection(id: ConnId, stream: TcpStream, state: Arc<BrokerState>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let write_half = stream.try_clone()?;
    state
        .connections
        .lock()
        .expect("broker lock")
        .insert(id, stream.try_clone()?);
    let (tx, rx) = unbounded::<Arc<Vec<u8>>>();

    thread::Builder::new()
        .name(format!("broker-w{id}"))
        .spawn(move || {
            use std::io::Write;
            let mut w = BufWriter::new(write_half);
            while let Ok(frame) = rx.recv() {
                if w.write_all(&frame).is_err() {
                    break;
                }
                // batch whatever is already queued before flushing
                while let Ok(more) = rx.try_recv() {
                    if w.write_all(&more).is_err() {
                        return;
                    }
                }
                if w.flush().is_err() {
                    break;
                }
            }
        })?;

    thread::Builder::new()
        .name(format!("broker-r{id}"))
        .spawn(move || {
            let mut r = BufReader::new(stream);
            loop {
                match read_frame(&mut r) {
                    Ok(Some(Frame::Sub { topic })) => {
                        debug!("broker: conn {id} subscribed to {topic}");
                        state
                            .topics
                            .lock()
                            .expect("broker lock")
                            .entry(topic)
                            .or_default()
                            .push((id, tx.clone()));
                    }
                    Ok(Some(Frame::Pub { topic, payload })) => state.publish(topic, payload),
                    Ok(Some(other)) => {
                        reject(&tx, format!("unexpected frame from client: {other:?}"));
                        break;
                    }
                    Ok(None) => break,
                    Err(FrameError::Io(_)) => break,
                    Err(e) => {
                        reject(&tx, e.to_string());
                        break;
                    }
                }
            }
            state.forget(id);
            // closing the sender lets the writer drain and exit
            drop(tx);
            let _ = r.get_ref().shutdown(Shutdown::Read);
        })?;
    Ok(())
}

fn reject(tx: &Sender<Arc<Vec<u8>>>, message: String) {
    let mut buf = Vec::new();
    if write_frame(&mut buf, &Frame::Error { message }).is_ok() {
        let _ = tx.send(Arc::new(buf));
    }
}
