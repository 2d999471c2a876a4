//! TCP transport and server. With a pre-shared key every frame carries a
//! trailing HMAC-SHA256 over everything after the length prefix, and the
//! length prefix covers the MAC.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use super::message::PeerMessage;
use super::transport::{Connection, FrameHandler, Transport, TransportError};

const MAC_LEN: usize = 32;
/// Largest frame accepted: a 32 KiB page plus headers, with headroom.
const MAX_FRAME: usize = 64 * 1024;

fn mac(psk: &[u8], data: &[u8]) -> [u8; MAC_LEN] {
    let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(psk).expect("HMAC takes any key length");
    m.update(data);
    m.finalize().into_bytes().into()
}

fn write_frame(stream: &mut TcpStream, frame: &[u8], psk: Option<&[u8]>) -> Result<(), TransportError> {
    match psk {
        None => stream.write_all(frame)?,
        Some(key) => {
            let body = &frame[4..];
            let mut out = Vec::with_capacity(frame.len() + MAC_LEN);
            out.extend_from_slice(&((body.len() + MAC_LEN) as u32).to_be_bytes());
            out.extend_from_slice(body);
            out.extend_from_slice(&mac(key, body));
            stream.write_all(&out)?;
        }
    }
    stream.flush()?;
    Ok(())
}

fn read_frame(stream: &mut TcpStream, psk: Option<&[u8]>) -> Result<Vec<u8>, TransportError> {
    let map = |e: io::Error| match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
        io::ErrorKind::UnexpectedEof => TransportError::Closed,
        _ => TransportError::Io(e),
    };
    let mut len = [0u8; 4];
    stream.read_exact(&mut len).map_err(map)?;
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(TransportError::Io(io::Error::new(io::ErrorKind::InvalidData, "oversized frame")));
    }
    let mut body = vec![0u8; n];
    stream.read_exact(&mut body).map_err(map)?;
    if let Some(key) = psk {
        if body.len() < MAC_LEN {
            return Err(TransportError::BadMac);
        }
        let (data, tag) = body.split_at(body.len() - MAC_LEN);
        let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("HMAC takes any key length");
        m.update(data);
        m.verify_slice(tag).map_err(|_| TransportError::BadMac)?;
        body.truncate(body.len() - MAC_LEN);
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

#[derive(Clone, Debug)]
pub struct TcpTransport {
    pub timeout: Duration,
    pub psk: Option<Vec<u8>>,
}

impl TcpTransport {
    pub fn new(timeout: Duration, psk: Option<Vec<u8>>) -> TcpTransport {
        TcpTransport { timeout, psk }
    }
}

struct TcpConnection {
    stream: TcpStream,
    psk: Option<Vec<u8>>,
}

impl Transport for TcpTransport {
    fn connect(&self, addr: &str) -> Result<Box<dyn Connection>, TransportError> {
        let target = addr
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| TransportError::Unreachable(addr.to_string()))?;
        let stream = TcpStream::connect_timeout(&target, self.timeout)
            .map_err(|_| TransportError::Unreachable(addr.to_string()))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        Ok(Box::new(TcpConnection { stream, psk: self.psk.clone() }))
    }
}

impl Connection for TcpConnection {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        write_frame(&mut self.stream, frame, self.psk.as_deref())
    }

    fn receive(&mut self) -> Result<Vec<u8>, TransportError> {
        read_frame(&mut self.stream, self.psk.as_deref())
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Accept loop running on its own thread, one thread per connection.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn spawn(
        listen: &str,
        handler: Arc<dyn FrameHandler>,
        psk: Option<Vec<u8>>,
        idle_timeout: Duration,
    ) -> io::Result<TcpServer> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                let psk = psk.clone();
                std::thread::spawn(move || serve_connection(stream, handler.as_ref(), psk.as_deref(), idle_timeout));
            }
        });
        Ok(TcpServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends; it never does on its own.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

fn serve_connection(mut stream: TcpStream, handler: &dyn FrameHandler, psk: Option<&[u8]>, idle: Duration) {
    let _ = stream.set_read_timeout(Some(idle));
    let _ = stream.set_nodelay(true);
    loop {
        let frame = match read_frame(&mut stream, psk) {
            Ok(f) => f,
            Err(TransportError::Closed) | Err(TransportError::Timeout) => return,
            Err(e) => {
                log::warn!("dropping connection: {e}");
                return;
            }
        };
        let msg = match PeerMessage::decode(&frame) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("malformed frame: {e}");
                return;
            }
        };
        let reply = handler.handle(msg);
        if write_frame(&mut stream, &reply.encode(), psk).is_err() {
            return;
        }
    }
}
