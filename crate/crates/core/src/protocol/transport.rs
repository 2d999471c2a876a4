//! Frame transports. A connection carries whole frames, length prefix
//! included, with at-most-once delivery; failures surface as errors and
//! nothing is retried here.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use super::message::{DecodeError, PeerMessage};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot reach {0}")]
    Unreachable(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for a reply")]
    Timeout,
    #[error("frame authentication failed")]
    BadMac,
    #[error("malformed frame: {0}")]
    Malformed(#[from] DecodeError),
    #[error("unexpected reply {0}")]
    UnexpectedReply(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Connection: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn receive(&mut self) -> Result<Vec<u8>, TransportError>;
    fn close(&mut self);
}

pub trait Transport: Send + Sync {
    fn connect(&self, addr: &str) -> Result<Box<dyn Connection>, TransportError>;
}

/// Server-side logic: one reply per request.
pub trait FrameHandler: Send + Sync {
    fn handle(&self, msg: PeerMessage) -> PeerMessage;
}

/// Sends `msg` and waits for one reply.
pub fn request(conn: &mut dyn Connection, msg: &PeerMessage) -> Result<PeerMessage, TransportError> {
    conn.send(&msg.encode())?;
    Ok(PeerMessage::decode(&conn.receive()?)?)
}

/// Connects, exchanges one message and closes.
pub fn call(transport: &dyn Transport, addr: &str, msg: &PeerMessage) -> Result<PeerMessage, TransportError> {
    let mut conn = transport.connect(addr)?;
    let reply = request(conn.as_mut(), msg);
    conn.close();
    reply
}

type ReplyFilter = Box<dyn Fn(&mut PeerMessage) + Send + Sync>;

#[derive(Default)]
struct SimState {
    nodes: HashMap<String, Arc<dyn FrameHandler>>,
    down: HashSet<String>,
    /// Remaining frames a node accepts before its connections fail.
    frame_budget: HashMap<String, usize>,
    filters: HashMap<String, ReplyFilter>,
    bytes_sent: u64,
    bytes_received: u64,
    frames: u64,
    trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub addr: String,
    pub request: &'static str,
    pub reply: Option<&'static str>,
}

/// In-process network. Requests are handled synchronously on the caller's
/// thread, which makes every run deterministic.
#[derive(Clone, Default)]
pub struct SimNetwork {
    state: Arc<Mutex<SimState>>,
}

impl SimNetwork {
    pub fn new() -> SimNetwork {
        SimNetwork::default()
    }

    pub fn register(&self, addr: &str, handler: Arc<dyn FrameHandler>) {
        self.state.lock().nodes.insert(addr.to_string(), handler);
    }

    pub fn set_down(&self, addr: &str, down: bool) {
        let mut s = self.state.lock();
        if down {
            s.down.insert(addr.to_string());
        } else {
            s.down.remove(addr);
        }
    }

    /// After `frames` more requests to `addr`, its connections fail.
    pub fn fail_after(&self, addr: &str, frames: usize) {
        self.state.lock().frame_budget.insert(addr.to_string(), frames);
    }

    pub fn clear_faults(&self, addr: &str) {
        let mut s = self.state.lock();
        s.frame_budget.remove(addr);
        s.filters.remove(addr);
        s.down.remove(addr);
    }

    /// Rewrites every reply coming from `addr`.
    pub fn set_reply_filter(&self, addr: &str, filter: impl Fn(&mut PeerMessage) + Send + Sync + 'static) {
        self.state.lock().filters.insert(addr.to_string(), Box::new(filter));
    }

    /// Octets sent by clients, octets returned by servers, request count.
    pub fn counters(&self) -> (u64, u64, u64) {
        let s = self.state.lock();
        (s.bytes_sent, s.bytes_received, s.frames)
    }

    pub fn reset_counters(&self) {
        let mut s = self.state.lock();
        s.bytes_sent = 0;
        s.bytes_received = 0;
        s.frames = 0;
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.state.lock().trace)
    }
}

impl Transport for SimNetwork {
    fn connect(&self, addr: &str) -> Result<Box<dyn Connection>, TransportError> {
        let s = self.state.lock();
        if s.down.contains(addr) || !s.nodes.contains_key(addr) {
            return Err(TransportError::Unreachable(addr.to_string()));
        }
        Ok(Box::new(SimConnection { net: self.clone(), addr: addr.to_string(), inbox: VecDeque::new(), open: true }))
    }
}

struct SimConnection {
    net: SimNetwork,
    addr: String,
    inbox: VecDeque<Vec<u8>>,
    open: bool,
}

impl Connection for SimConnection {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        if !self.open {
            return Err(TransportError::Closed);
        }
        let handler = {
            let mut s = self.net.state.lock();
            if s.down.contains(&self.addr) {
                self.open = false;
                return Err(TransportError::Closed);
            }
            if let Some(budget) = s.frame_budget.get_mut(&self.addr) {
                if *budget == 0 {
                    self.open = false;
                    return Err(TransportError::Closed);
                }
                *budget -= 1;
            }
            s.bytes_sent += frame.len() as u64;
            s.frames += 1;
            s.nodes.get(&self.addr).cloned().ok_or(TransportError::Closed)?
        };
        let msg = PeerMessage::decode(frame)?;
        let request = msg.body.name();
        // The lock is released while the handler runs, so handlers may use
        // the network themselves.
        let mut reply = handler.handle(msg);
        let mut s = self.net.state.lock();
        if let Some(f) = s.filters.get(&self.addr) {
            f(&mut reply);
        }
        let bytes = reply.encode();
        s.bytes_received += bytes.len() as u64;
        s.trace.push(TraceEvent { addr: self.addr.clone(), request, reply: Some(reply.body.name()) });
        self.inbox.push_back(bytes);
        Ok(())
    }

    fn receive(&mut self) -> Result<Vec<u8>, TransportError> {
        self.inbox.pop_front().ok_or(TransportError::Closed)
    }

    fn close(&mut self) {
        self.open = false;
        self.inbox.clear();
    }
}

/// Records request/reply names seen through any transport.
pub struct TracingTransport<T> {
    inner: T,
    trace: Arc<Mutex<Vec<TraceEvent>>>,
}

impl<T: Transport> TracingTransport<T> {
    pub fn new(inner: T) -> TracingTransport<T> {
        TracingTransport { inner, trace: Arc::default() }
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace.lock())
    }
}

impl<T: Transport> Transport for TracingTransport<T> {
    fn connect(&self, addr: &str) -> Result<Box<dyn Connection>, TransportError> {
        let inner = self.inner.connect(addr)?;
        Ok(Box::new(TracingConnection { inner, addr: addr.to_string(), trace: self.trace.clone(), pending: None }))
    }
}

struct TracingConnection {
    inner: Box<dyn Connection>,
    addr: String,
    trace: Arc<Mutex<Vec<TraceEvent>>>,
    pending: Option<&'static str>,
}

fn frame_name(frame: &[u8]) -> &'static str {
    frame.get(4).map_or("Unknown", |&t| super::message::tag_name(t))
}

impl Connection for TracingConnection {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.pending = Some(frame_name(frame));
        self.inner.send(frame)
    }

    fn receive(&mut self) -> Result<Vec<u8>, TransportError> {
        let r = self.inner.receive();
        let request = self.pending.take().unwrap_or("Unknown");
        let reply = r.as_ref().ok().map(|f| frame_name(f));
        self.trace.lock().push(TraceEvent { addr: self.addr.clone(), request, reply });
        r
    }

    fn close(&mut self) {
        self.inner.close()
    }
}
