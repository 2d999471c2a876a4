//! Preserver role: a verifier that also keeps a replica of each origin's
//! pad, pulled block by block after every accepted token, and serves it back
//! when the origin has to recover.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use super::message::{Body, CatalogToken, NodeId, PeerMessage, Status};
use super::transport::{request, Connection, FrameHandler, Transport, TransportError};
use super::verifier::{protocol_error, Verifier};
use crate::pad::{PadError, TreapPad};
use crate::store::BlockImage;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("no address known for origin {0}")]
    NoAddress(NodeId),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Pad(#[from] PadError),
    #[error("origin answered {0:?}")]
    Refused(Status),
    #[error("unexpected {0} during transfer")]
    Unexpected(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Preserver pulling from its origin.
    Update,
    /// Origin pulling back from a preserver.
    Recover,
}

impl Stream {
    fn begin(self, snapshot_id: u64) -> Body {
        match self {
            Stream::Update => Body::UpdateBegin { snapshot_id },
            Stream::Recover => Body::RecoverBegin { snapshot_id },
        }
    }

    fn next(self, snapshot_id: u64, after_block: u64) -> Body {
        match self {
            Stream::Update => Body::UpdateGetNext { snapshot_id, after_block },
            Stream::Recover => Body::RecoverGetNext { snapshot_id, after_block },
        }
    }
}

/// Pulls snapshots `from..=to.snapshot_id` into `slot`, creating the pad at
/// `path` once the first page reveals the page size. Everything is staged
/// and committed at the end against `to`'s list authenticator. On error the
/// pad keeps whatever it held before; the caller must not reuse a partly
/// filled slot without `binary_update_abort`.
pub fn pull_snapshots(
    conn: &mut dyn Connection,
    me: NodeId,
    stream: Stream,
    slot: &mut Option<TreapPad>,
    path: &Path,
    from: u64,
    to: CatalogToken,
) -> Result<(), SyncError> {
    // Snapshots whose blocks were all rewritten later arrive empty; with no
    // pad yet they wait for the first page.
    let mut deferred = Vec::new();
    for s in from..=to.snapshot_id {
        let mut reply = request(conn, &PeerMessage::new(me, stream.begin(s)))?;
        let mut begun = false;
        loop {
            let (block_no, page) = match (stream, reply.body) {
                (Stream::Update, Body::UpdateData { snapshot_id, block_no, page })
                | (Stream::Recover, Body::RecoverData { snapshot_id, block_no, page })
                    if snapshot_id == s =>
                {
                    (block_no, page)
                }
                (Stream::Update, Body::UpdateEndOfData { status, snapshot_id })
                | (Stream::Recover, Body::RecoverEndOfData { status, snapshot_id })
                    if snapshot_id == s =>
                {
                    if status != Status::Ok {
                        return Err(SyncError::Refused(status));
                    }
                    break;
                }
                (_, other) => return Err(SyncError::Unexpected(other.name())),
            };
            if slot.is_none() {
                let mut pad = TreapPad::create_replica(path, page.len())?;
                for &e in &deferred {
                    pad.binary_update_begin(e)?;
                    pad.binary_update_stage(e)?;
                }
                deferred.clear();
                *slot = Some(pad);
            }
            let pad = slot.as_mut().expect("replica exists");
            if !begun {
                pad.binary_update_begin(s)?;
                begun = true;
            }
            pad.binary_update_block(s, &BlockImage::from_payload(block_no, page))?;
            reply = request(conn, &PeerMessage::new(me, stream.next(s, block_no)))?;
        }
        let Some(pad) = slot.as_mut() else {
            deferred.push(s);
            continue;
        };
        if !begun {
            pad.binary_update_begin(s)?;
        }
        if s < to.snapshot_id {
            pad.binary_update_stage(s)?;
        } else {
            pad.binary_update_commit(s, Some(to.authenticator))?;
        }
    }
    if slot.is_none() && from <= to.snapshot_id {
        return Err(SyncError::Unexpected("stream without pages"));
    }
    Ok(())
}

type Replica = Arc<Mutex<Option<TreapPad>>>;

pub struct Preserver {
    verifier: Verifier,
    data_dir: PathBuf,
    origins: HashMap<NodeId, String>,
    transport: Arc<dyn Transport>,
    replicas: Mutex<HashMap<NodeId, Replica>>,
    queue: Mutex<VecDeque<NodeId>>,
    wake: Condvar,
    stop: AtomicBool,
}

impl Preserver {
    /// `origins` maps each origin this preserver follows to the address its
    /// update service listens on. Only those origins may store tokens.
    pub fn new(
        id: NodeId,
        data_dir: impl Into<PathBuf>,
        origins: HashMap<NodeId, String>,
        transport: Arc<dyn Transport>,
    ) -> std::io::Result<Preserver> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(&data_dir)?;
        let allow: HashSet<NodeId> = origins.keys().copied().collect();
        let verifier = Verifier::with_state_file(id, Some(allow), data_dir.join("tokens.json"))?;
        Ok(Preserver {
            verifier,
            data_dir,
            origins,
            transport,
            replicas: Mutex::default(),
            queue: Mutex::default(),
            wake: Condvar::new(),
            stop: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> NodeId {
        self.verifier.id()
    }

    pub fn verifier(&self) -> &Verifier {
        &self.verifier
    }

    pub fn replica_path(&self, origin: &NodeId) -> PathBuf {
        self.data_dir.join(format!("{}.icat", origin.to_hex()))
    }

    fn replica(&self, origin: &NodeId) -> Result<Replica, PadError> {
        let mut map = self.replicas.lock();
        if let Some(r) = map.get(origin) {
            return Ok(r.clone());
        }
        let path = self.replica_path(origin);
        let pad = if path.exists() { Some(TreapPad::open(&path)?) } else { None };
        let r: Replica = Arc::new(Mutex::new(pad));
        map.insert(*origin, r.clone());
        Ok(r)
    }

    /// `<latest snapshot, list authenticator>` of the replica, if any.
    pub fn replica_token(&self, origin: &NodeId) -> Option<CatalogToken> {
        let r = self.replica(origin).ok()?;
        let guard = r.lock();
        let pad = guard.as_ref()?;
        if pad.latest_sealed() == 0 {
            return None;
        }
        Some(CatalogToken { snapshot_id: pad.latest_sealed(), authenticator: pad.list_authenticator().ok()? })
    }

    fn enqueue(&self, origin: NodeId) {
        let mut q = self.queue.lock();
        if !q.contains(&origin) {
            q.push_back(origin);
        }
        self.wake.notify_one();
    }

    pub fn pending_syncs(&self) -> usize {
        self.queue.lock().len()
    }

    /// Runs every queued sync on the calling thread. Returns how many
    /// succeeded; failures are logged and dropped until the next token.
    pub fn run_pending_syncs(&self) -> usize {
        let mut ok = 0;
        loop {
            let Some(origin) = self.queue.lock().pop_front() else { return ok };
            match self.sync_origin(&origin) {
                Ok(s) => {
                    log::debug!("replica of {origin} at snapshot {s}");
                    ok += 1;
                }
                Err(e) => log::warn!("sync of {origin} failed: {e}"),
            }
        }
    }

    /// Starts a thread that drains the sync queue as tokens arrive. It
    /// exits once `stop_sync_worker` is called or the preserver is dropped.
    pub fn spawn_sync_worker(self: &Arc<Self>) -> JoinHandle<()> {
        let weak: Weak<Preserver> = Arc::downgrade(self);
        std::thread::spawn(move || loop {
            let Some(p) = weak.upgrade() else { return };
            if p.stop.load(Ordering::SeqCst) {
                return;
            }
            {
                let mut q = p.queue.lock();
                if q.is_empty() {
                    p.wake.wait_for(&mut q, Duration::from_millis(200));
                }
            }
            p.run_pending_syncs();
        })
    }

    pub fn stop_sync_worker(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.wake.notify_all();
    }

    /// Brings the replica of `origin` up to the latest accepted token.
    pub fn sync_origin(&self, origin: &NodeId) -> Result<u64, SyncError> {
        let Some(token) = self.verifier.latest(origin) else { return Ok(0) };
        let replica = self.replica(origin)?;
        let mut guard = replica.lock();
        if let Some(pad) = guard.as_ref() {
            let current = pad.latest_sealed();
            if current == token.snapshot_id && pad.list_authenticator().ok() == Some(token.authenticator) {
                return Ok(current);
            }
            if current >= token.snapshot_id {
                // The origin was reset to a state this replica is not a
                // prefix of. Start over.
                log::warn!("replica of {origin} diverged from its token; rebuilding");
                *guard = None;
                remove_replica(&self.replica_path(origin));
            }
        }
        let addr = self.origins.get(origin).ok_or(SyncError::NoAddress(*origin))?;
        let mut conn = self.transport.connect(addr)?;
        let from = guard.as_ref().map_or(0, |p| p.latest_sealed()) + 1;
        let path = self.replica_path(origin);
        let result = pull_snapshots(conn.as_mut(), self.id(), Stream::Update, &mut guard, &path, from, token)
            .map(|()| token.snapshot_id);
        conn.close();
        if result.is_err() {
            if let Some(pad) = guard.as_mut() {
                pad.binary_update_abort()?;
            }
        }
        result
    }

    fn serve_block(&self, origin: &NodeId, s: u64, after: Option<u64>) -> Body {
        let end = |status| Body::RecoverEndOfData { status, snapshot_id: s };
        let Ok(replica) = self.replica(origin) else { return end(Status::NoReplica) };
        let guard = replica.lock();
        let Some(pad) = guard.as_ref() else { return end(Status::NoReplica) };
        let found = match after {
            None => pad.first_block_of_snapshot(s),
            Some(b) => pad.next_block_of_snapshot(s, b),
        };
        match found {
            Ok(Some(img)) => Body::RecoverData { snapshot_id: s, block_no: img.block_no, page: img.payload },
            Ok(None) => end(Status::Ok),
            Err(PadError::UnknownSnapshot(_)) => end(Status::UnknownSnapshot),
            Err(e) => {
                log::error!("replica of {origin}: {e}");
                end(Status::NoReplica)
            }
        }
    }

    pub fn handle(&self, msg: PeerMessage) -> PeerMessage {
        let origin = msg.sender;
        let reply = |body| PeerMessage::new(self.id(), body);
        match msg.body {
            Body::Store { .. } | Body::VersionReset { .. } => {
                let r = self.verifier.handle(msg);
                if matches!(r.body, Body::StoreReply { status: Status::Ok, .. }) {
                    self.enqueue(origin);
                }
                r
            }
            Body::StoredVersionRequest => self.verifier.handle(msg),
            _ if !self.verifier.is_allowed(&origin) => match msg.body {
                Body::RecoverVersionRequest => {
                    reply(Body::RecoverVersionReply { status: Status::Unauthorized, token: None })
                }
                Body::RecoverBegin { snapshot_id } | Body::RecoverGetNext { snapshot_id, .. } => {
                    reply(Body::RecoverEndOfData { status: Status::Unauthorized, snapshot_id })
                }
                _ => protocol_error(self.id()),
            },
            Body::RecoverVersionRequest => {
                let token = self.replica_token(&origin);
                let status = if token.is_some() { Status::Ok } else { Status::NoReplica };
                reply(Body::RecoverVersionReply { status, token })
            }
            Body::RecoverBegin { snapshot_id } => reply(self.serve_block(&origin, snapshot_id, None)),
            Body::RecoverGetNext { snapshot_id, after_block } => {
                reply(self.serve_block(&origin, snapshot_id, Some(after_block)))
            }
            _ => protocol_error(self.id()),
        }
    }
}

fn remove_replica(path: &Path) {
    for p in [path.to_path_buf(), crate::store::journal_path(path)] {
        if let Err(e) = std::fs::remove_file(&p) {
            if e.kind() != std::io::ErrorKind::NotFound {
                log::error!("cannot remove {}: {e}", p.display());
            }
        }
    }
}

impl FrameHandler for Preserver {
    fn handle(&self, msg: PeerMessage) -> PeerMessage {
        Preserver::handle(self, msg)
    }
}
