//! Long-running peer daemons behind `icat serve`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use icat_core::pad::TreapPad;
use icat_core::protocol::{
    Body, FrameHandler, NodeId, OriginService, PeerMessage, Preserver, TcpServer, TcpTransport, Verifier,
};
use parking_lot::{Mutex, RwLock};

const IDLE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Verifier,
    Preserver,
    Origin,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Pad(#[from] icat_core::pad::PadError),
}

/// One allowlist line: `<origin-id> [update-address]`. Blank lines and
/// `#` comments are skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowedOrigin {
    pub id: NodeId,
    pub address: Option<String>,
}

pub fn parse_allowlist(text: &str) -> Result<Vec<AllowedOrigin>, ServeError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().map(NodeId::from_name).unwrap();
        let address = fields.next().map(str::to_string);
        if fields.next().is_some() {
            return Err(ServeError::Invalid(format!("allowlist line {}: expected `<id> [address]`", n + 1)));
        }
        out.push(AllowedOrigin { id, address });
    }
    Ok(out)
}

pub fn read_allowlist(path: &Path) -> Result<Vec<AllowedOrigin>, ServeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServeError::Invalid(format!("cannot read allowlist {}: {e}", path.display())))?;
    parse_allowlist(&text)
}

pub struct ServeOptions {
    pub role: Role,
    pub id: NodeId,
    pub listen: String,
    pub data_dir: PathBuf,
    pub allowlist: Option<Vec<AllowedOrigin>>,
    pub psk: Option<Vec<u8>>,
    pub reply_timeout: Duration,
    /// Origin role: the catalog to serve.
    pub catalog: Option<PathBuf>,
    /// Origin role: nodes allowed to pull snapshots.
    pub preservers: Option<HashSet<NodeId>>,
}

/// Serves an origin's catalog while other processes append to it. The file
/// is reopened at the start of every transfer, so each preservation round
/// sees the latest sealed state.
struct ReloadingOrigin {
    path: PathBuf,
    pad: Arc<RwLock<TreapPad>>,
    service: OriginService,
    reload: Mutex<()>,
}

impl FrameHandler for ReloadingOrigin {
    fn handle(&self, msg: PeerMessage) -> PeerMessage {
        if let Body::UpdateBegin { .. } = msg.body {
            let _one = self.reload.lock();
            match TreapPad::open(&self.path) {
                Ok(pad) => *self.pad.write() = pad,
                Err(e) => log::error!("cannot reopen {}: {e}; serving the previous image", self.path.display()),
            }
        }
        self.service.handle(msg)
    }
}

pub struct Daemon {
    server: TcpServer,
    preserver: Option<(Arc<Preserver>, JoinHandle<()>)>,
}

impl Daemon {
    pub fn start(opts: ServeOptions) -> Result<Daemon, ServeError> {
        let allow_ids = opts.allowlist.as_ref().map(|l| l.iter().map(|o| o.id).collect::<HashSet<_>>());
        let mut preserver = None;
        let handler: Arc<dyn FrameHandler> = match opts.role {
            Role::Verifier => {
                std::fs::create_dir_all(&opts.data_dir)?;
                let v = Verifier::with_state_file(opts.id, allow_ids, opts.data_dir.join("tokens.json"))?;
                Arc::new(v)
            }
            Role::Preserver => {
                let list = opts
                    .allowlist
                    .ok_or_else(|| ServeError::Invalid("a preserver needs --origin-allowlist".into()))?;
                let mut origins = HashMap::new();
                for o in list {
                    let addr = o.address.ok_or_else(|| {
                        ServeError::Invalid(format!("allowlist entry {} has no update address", o.id))
                    })?;
                    origins.insert(o.id, addr);
                }
                let transport = Arc::new(TcpTransport::new(opts.reply_timeout, opts.psk.clone()));
                let p = Arc::new(Preserver::new(opts.id, &opts.data_dir, origins, transport)?);
                let worker = p.spawn_sync_worker();
                preserver = Some((p.clone(), worker));
                p
            }
            Role::Origin => {
                let path = opts.catalog.ok_or_else(|| ServeError::Invalid("origin role needs a catalog".into()))?;
                let pad = Arc::new(RwLock::new(TreapPad::open(&path)?));
                let service = OriginService::new(opts.id, pad.clone(), opts.preservers);
                Arc::new(ReloadingOrigin { path, pad, service, reload: Mutex::new(()) })
            }
        };
        let server = TcpServer::spawn(&opts.listen, handler, opts.psk, IDLE_TIMEOUT)?;
        Ok(Daemon { server, preserver })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.server.local_addr()
    }

    pub fn wait(self) {
        self.server.join();
    }

    pub fn shutdown(self) {
        if let Some((p, worker)) = self.preserver {
            p.stop_sync_worker();
            let _ = worker.join();
        }
        self.server.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowlist_lines() {
        let l = parse_allowlist("# origins\norigin-1 127.0.0.1:7000\n\n  origin-2  # no address\n").unwrap();
        assert_eq!(
            l,
            vec![
                AllowedOrigin { id: NodeId::from_name("origin-1"), address: Some("127.0.0.1:7000".into()) },
                AllowedOrigin { id: NodeId::from_name("origin-2"), address: None },
            ]
        );
        assert!(parse_allowlist("a b c").is_err());
    }
}
