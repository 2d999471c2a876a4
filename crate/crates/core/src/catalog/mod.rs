//! The catalog: a pad whose contents are trusted only after the network
//! attests to its list authenticator.
//!
//! Writes go straight to the local pad. Reads that matter go through a
//! [`VerifiedContext`], obtained from [`Catalog::verify`] or
//! [`Catalog::seal`], and every value they return is extracted from a
//! proof checked against that context. Disk state is never trusted on its
//! own: a corrupt page surfaces as [`CatalogError::IntegrityViolation`].

pub mod clock;
pub mod config;
pub mod pending;
pub mod policy;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aasl::{verify_list_proof, SnapshotRecord};
use crate::digest::{Digest, HashAlg};
use crate::pad::{verify_absence, verify_proof, LookupProof, PadConfig, PadError, TreapPad};
use crate::protocol::{
    call, pull_snapshots, Body, CatalogToken, NodeId, OriginService, PeerMessage, Status, Stream, SyncError,
    Transport, TransportError,
};
use crate::store::{journal_path, RecordId, StoreError};

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{CatalogSettings, ConfigError, NodeConfig, Peer};
pub use pending::{PendingLog, PendingOp};
pub use policy::{DecisionPolicy, DefaultPolicy, Fraction, PolicyConfig, VerifyDecision, VoteTally};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error(transparent)]
    Pad(#[from] PadError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("local list authenticator cannot be proven: {0}")]
    ListProofFailed(String),
    #[error("local token {local:?} lost the vote (network majority: {winner:?})")]
    VerifyMismatch { local: Option<CatalogToken>, winner: Option<CatalogToken> },
    #[error("seal of snapshot {} reached {acks} of {verifiers} verifiers", token.snapshot_id)]
    SealQuorumFailed { token: CatalogToken, acks: u64, verifiers: u64 },
    #[error("only {participants} of {verifiers} verifiers answered")]
    VerifyQuorumFailed { participants: u64, verifiers: u64 },
    #[error("no version won among {participants} of {preservers} preservers")]
    RecoverQuorumFailed { participants: u64, preservers: u64 },
    #[error("transfer failed from every holder: {0}")]
    RecoverTransferFailed(String),
    #[error("rebuilt catalog did not match the chosen token: {0}")]
    RecoverVerifyFailed(String),
    #[error("no verifiers configured")]
    NoVerifiers,
    #[error("no preservers configured")]
    NoPreservers,
    #[error("catalog has no sealed snapshot")]
    NothingSealed,
    #[error("key not found")]
    KeyNotFound,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl CatalogError {
    /// Process exit status: 2 integrity, 3 quorum, 4 i/o, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CatalogError::IntegrityViolation(_)
            | CatalogError::ListProofFailed(_)
            | CatalogError::VerifyMismatch { .. }
            | CatalogError::RecoverVerifyFailed(_) => 2,
            CatalogError::Pad(e) if e.is_integrity() => 2,
            CatalogError::SealQuorumFailed { .. }
            | CatalogError::VerifyQuorumFailed { .. }
            | CatalogError::RecoverQuorumFailed { .. } => 3,
            CatalogError::Io(_)
            | CatalogError::Transport(_)
            | CatalogError::RecoverTransferFailed(_)
            | CatalogError::Pad(PadError::Store(StoreError::Io(_))) => 4,
            CatalogError::Config(ConfigError::Read { .. }) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

fn integrity(e: impl std::fmt::Display) -> CatalogError {
    CatalogError::IntegrityViolation(e.to_string())
}

/// A snapshot whose authenticators the network vouched for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifiedContext {
    pub snapshot_id: u64,
    pub la: Digest,
    pub pra: Digest,
    pub root: Option<RecordId>,
    pub timestamp: u64,
    alg: HashAlg,
}

impl VerifiedContext {
    pub fn token(&self) -> CatalogToken {
        CatalogToken { snapshot_id: self.snapshot_id, authenticator: self.la }
    }

    pub fn hash_alg(&self) -> HashAlg {
        self.alg
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub snapshot_id: u64,
    pub value: Vec<u8>,
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct SealReceipt {
    pub token: CatalogToken,
    pub acks: u64,
    pub verifiers: u64,
    pub context: VerifiedContext,
}

#[derive(Debug, Clone)]
pub struct RecoverReport {
    pub token: CatalogToken,
    pub holder: NodeId,
    /// Holders tried before `holder`, with the reason each failed.
    pub failed: Vec<(NodeId, String)>,
    /// Unsealed operations carried over from before the recovery.
    pub replayed: usize,
    pub resets_acked: u64,
    pub context: VerifiedContext,
}

pub struct Catalog {
    path: PathBuf,
    pad: Arc<RwLock<TreapPad>>,
    /// Held by every mutation, which serializes them.
    writer: Mutex<PendingLog>,
    settings: CatalogSettings,
    transport: Arc<dyn Transport>,
    policy: Box<dyn DecisionPolicy>,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha8Rng>,
}

/// Re-applies logged operations and rewrites the log with those that
/// succeeded. An operation rejected because the pad is damaged stops the
/// replay, leaving the log as it was for a replay after recovery.
fn replay(pad: &mut TreapPad, log: &mut PendingLog, ops: Vec<PendingOp>) -> Result<usize> {
    let epoch = pad.open_epoch();
    let mut kept = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        let r = match op {
            PendingOp::Put { key, value } => pad.insert(key, value),
            PendingOp::Amend { key, suffix } => pad.amend(key, suffix),
        };
        match r {
            Ok(()) => kept.push(op),
            Err(e) if e.is_integrity() || matches!(e, PadError::Store(_)) => {
                log.reset(epoch)?;
                for op in kept.into_iter().chain(&ops[i..]) {
                    log.append(op)?;
                }
                return Err(e.into());
            }
            Err(e) => log::warn!("dropping logged operation: {e}"),
        }
    }
    log.reset(epoch)?;
    for op in &kept {
        log.append(op)?;
    }
    Ok(kept.len())
}

fn remove_if_exists(path: &Path) -> std::io::Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

impl Catalog {
    fn assemble(path: &Path, pad: TreapPad, log: PendingLog, settings: CatalogSettings, transport: Arc<dyn Transport>) -> Catalog {
        Catalog {
            path: path.to_path_buf(),
            pad: Arc::new(RwLock::new(pad)),
            writer: Mutex::new(log),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(settings.seed)),
            policy: Box::new(DefaultPolicy::new(settings.policy)),
            settings,
            transport,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn create(
        path: impl AsRef<Path>,
        config: PadConfig,
        settings: CatalogSettings,
        transport: Arc<dyn Transport>,
    ) -> Result<Catalog> {
        let path = path.as_ref();
        settings.validate()?;
        let pad = TreapPad::create(path, config)?;
        let (log, _) = PendingLog::open(path, pad.open_epoch())?;
        Ok(Catalog::assemble(path, pad, log, settings, transport))
    }

    /// Opens an existing catalog, re-applying operations made after the
    /// last seal.
    pub fn open(path: impl AsRef<Path>, settings: CatalogSettings, transport: Arc<dyn Transport>) -> Result<Catalog> {
        let path = path.as_ref();
        settings.validate()?;
        let mut pad = TreapPad::open(path)?;
        let (mut log, ops) = PendingLog::open(path, pad.open_epoch())?;
        if !ops.is_empty() {
            let n = replay(&mut pad, &mut log, ops)?;
            log::info!("re-applied {n} unsealed operations");
        }
        Ok(Catalog::assemble(path, pad, log, settings, transport))
    }

    /// Opens a catalog that may be too damaged to open. A file that fails
    /// to open is moved to `<path>.corrupt` and replaced by an empty pad,
    /// ready for [`Catalog::recover`].
    pub fn open_for_recovery(
        path: impl AsRef<Path>,
        settings: CatalogSettings,
        transport: Arc<dyn Transport>,
    ) -> Result<Catalog> {
        let path = path.as_ref();
        match Catalog::open(path, settings.clone(), transport.clone()) {
            Ok(c) => Ok(c),
            Err(e) => {
                log::warn!("cannot open {}: {e}; starting from an empty catalog", path.display());
                if path.exists() {
                    let mut aside = path.as_os_str().to_os_string();
                    aside.push(".corrupt");
                    std::fs::rename(path, &aside)?;
                }
                remove_if_exists(&journal_path(path))?;
                let pad = TreapPad::create_replica(path, crate::store::DEFAULT_PAGE_SIZE)?;
                // Unsealed operations wait for the recovered catalog.
                let log = PendingLog::attach(path)?;
                Ok(Catalog::assemble(path, pad, log, settings, transport))
            }
        }
    }

    pub fn with_policy(mut self, policy: Box<dyn DecisionPolicy>) -> Catalog {
        self.policy = policy;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Catalog {
        self.clock = clock;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn settings(&self) -> &CatalogSettings {
        &self.settings
    }

    pub fn node_id(&self) -> NodeId {
        self.settings.node_id
    }

    /// Read access to the underlying pad. Nothing read through it is
    /// verified.
    pub fn pad(&self) -> RwLockReadGuard<'_, TreapPad> {
        self.pad.read()
    }

    /// Service that streams sealed snapshots to the configured preservers.
    pub fn origin_service(&self) -> OriginService {
        let preservers = self.settings.preservers.iter().map(|p| p.id).collect();
        OriginService::new(self.settings.node_id, self.pad.clone(), Some(preservers))
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        let mut log = self.writer.lock();
        self.pad.write().insert(key, value)?;
        log.append(&PendingOp::Put { key: key.to_vec(), value: value.to_vec() })?;
        Ok(())
    }

    pub fn amend(&self, key: &[u8], suffix: &[u8]) -> Result<()> {
        let mut log = self.writer.lock();
        self.pad.write().amend(key, suffix)?;
        log.append(&PendingOp::Amend { key: key.to_vec(), suffix: suffix.to_vec() })?;
        Ok(())
    }

    fn broadcast(&self, peers: &[Peer], body: Body) -> Vec<Option<Body>> {
        let msg = PeerMessage::new(self.settings.node_id, body);
        let transport = self.transport.as_ref();
        std::thread::scope(|scope| {
            let handles: Vec<_> = peers
                .iter()
                .map(|peer| {
                    let msg = &msg;
                    scope.spawn(move || match call(transport, &peer.address, msg) {
                        Ok(r) if r.sender == peer.id => Some(r.body),
                        Ok(r) => {
                            log::warn!("{} answered as {}", peer.address, r.sender);
                            None
                        }
                        Err(e) => {
                            log::debug!("{}: {e}", peer.address);
                            None
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or(None)).collect()
        })
    }

    /// Closes the open epoch and publishes the new token. The snapshot
    /// stays sealed locally even when too few verifiers acknowledge it; the
    /// next seal publishes a newer token that supersedes it.
    pub fn seal(&self) -> Result<SealReceipt> {
        if self.settings.verifiers.is_empty() {
            return Err(CatalogError::NoVerifiers);
        }
        let (token, context) = {
            let mut log = self.writer.lock();
            let mut pad = self.pad.write();
            let view = match pad.snapshot(self.clock.now_secs()) {
                Ok(v) => v,
                Err(e) => {
                    // The pad dropped the open epoch; restore it from the log.
                    let (mut fresh, ops) = PendingLog::open(&self.path, pad.open_epoch())?;
                    replay(&mut pad, &mut fresh, ops)?;
                    *log = fresh;
                    return Err(e.into());
                }
            };
            log.reset(pad.open_epoch())?;
            let record = pad.snapshot_record(view.snapshot_id)?;
            let la = pad.list_authenticator()?;
            let context = VerifiedContext {
                snapshot_id: view.snapshot_id,
                la,
                pra: view.pra,
                root: view.root,
                timestamp: record.timestamp,
                alg: pad.hash_alg(),
            };
            (context.token(), context)
        };
        let replies = self.broadcast(&self.settings.verifiers, Body::Store { token });
        let acks = replies
            .iter()
            .filter(|r| matches!(r, Some(Body::StoreReply { status: Status::Ok, snapshot_id }) if *snapshot_id == token.snapshot_id))
            .count() as u64;
        let verifiers = self.settings.verifiers.len() as u64;
        if !self.policy.seal_accepted(acks, verifiers) {
            return Err(CatalogError::SealQuorumFailed { token, acks, verifiers });
        }
        Ok(SealReceipt { token, acks, verifiers, context })
    }

    /// `<latest sealed snapshot, LA>` as read from disk, unverified.
    pub fn local_token(&self) -> Result<Option<CatalogToken>> {
        let pad = self.pad.read();
        match pad.latest_sealed() {
            0 => Ok(None),
            s => Ok(Some(CatalogToken { snapshot_id: s, authenticator: pad.list_authenticator()? })),
        }
    }

    /// Asks every verifier for its latest token and, when the local token
    /// wins the vote, proves the local snapshot record against it.
    pub fn verify(&self) -> Result<VerifiedContext> {
        if self.settings.verifiers.is_empty() {
            return Err(CatalogError::NoVerifiers);
        }
        let replies = self.broadcast(&self.settings.verifiers, Body::StoredVersionRequest);
        let tally = VoteTally::from_replies(replies.into_iter().map(|r| match r {
            Some(Body::StoredVersionReply { status: Status::Ok, token: Some(t) }) => Some(Some(t)),
            Some(Body::StoredVersionReply { status: Status::NoToken, .. }) => Some(None),
            _ => None,
        }));
        let local = self.local_token().map_err(|e| CatalogError::ListProofFailed(e.to_string()))?;
        match self.policy.verify(&tally, local) {
            VerifyDecision::QuorumFailed => Err(CatalogError::VerifyQuorumFailed {
                participants: tally.participants(),
                verifiers: tally.peer_count(),
            }),
            VerifyDecision::Mismatch { winner } => Err(CatalogError::VerifyMismatch { local, winner }),
            VerifyDecision::Accept => {
                let token = local.ok_or(CatalogError::NothingSealed)?;
                let pad = self.pad.read();
                let record = Self::prove_record(&pad, token.authenticator, token.snapshot_id)
                    .map_err(|e| CatalogError::ListProofFailed(e.to_string()))?;
                Ok(VerifiedContext {
                    snapshot_id: token.snapshot_id,
                    la: token.authenticator,
                    pra: record.pra,
                    root: record.root,
                    timestamp: record.timestamp,
                    alg: pad.hash_alg(),
                })
            }
        }
    }

    fn prove_record(pad: &TreapPad, la: Digest, snapshot_id: u64) -> Result<SnapshotRecord> {
        let proof = pad.list_proof(snapshot_id).map_err(integrity)?;
        let record = verify_list_proof(pad.hash_alg(), &proof, &la).map_err(integrity)?;
        if record.snapshot_id != snapshot_id {
            return Err(integrity(format!("list proof for snapshot {} instead of {snapshot_id}", record.snapshot_id)));
        }
        Ok(record)
    }

    fn verified_lookup(
        &self,
        pad: &TreapPad,
        alg: HashAlg,
        snapshot_id: u64,
        pra: &Digest,
        key: &[u8],
    ) -> Result<Option<(Vec<u8>, u64)>> {
        match pad.lookup_proof(key, snapshot_id).map_err(integrity)? {
            LookupProof::Present(p) => {
                if p.snapshot_id != snapshot_id || p.key_digest != alg.hash(key) {
                    return Err(integrity("proof is for another key or snapshot"));
                }
                let e = verify_proof(alg, &p, pra).map_err(integrity)?;
                Ok(Some((e.value, e.value_snapshot_id)))
            }
            LookupProof::Absent(a) => {
                if a.snapshot_id != snapshot_id {
                    return Err(integrity("proof is for another snapshot"));
                }
                verify_absence(alg, &a, key, pra).map_err(integrity)?;
                Ok(None)
            }
        }
    }

    /// Value of `key` at the context's snapshot and the snapshot that set
    /// it, taken from a proof verified against the context. No network.
    pub fn verified_get(&self, ctx: &VerifiedContext, key: &[u8]) -> Result<Option<(Vec<u8>, u64)>> {
        let pad = self.pad.read();
        let r = self.verified_lookup(&pad, ctx.alg, ctx.snapshot_id, &ctx.pra, key)?;
        if let Some((_, vs)) = &r {
            if *vs == 0 {
                return Err(integrity("value without a snapshot"));
            }
        }
        Ok(r)
    }

    /// Every version of `key` up to the context's snapshot, newest first.
    /// The authenticators of earlier snapshots come from list proofs
    /// against the context's LA.
    pub fn history(&self, ctx: &VerifiedContext, key: &[u8]) -> Result<Vec<HistoryEntry>> {
        let pad = self.pad.read();
        let mut out = Vec::new();
        let (mut at, mut pra) = (ctx.snapshot_id, ctx.pra);
        while at > 0 {
            let Some((value, set_at)) = self.verified_lookup(&pad, ctx.alg, at, &pra, key)? else { break };
            if set_at == 0 || set_at > at {
                return Err(integrity(format!("value stamped {set_at} at snapshot {at}")));
            }
            let record = Self::prove_record(&pad, ctx.la, set_at)?;
            out.push(HistoryEntry { snapshot_id: set_at, value, timestamp: record.timestamp });
            at = set_at - 1;
            if at > 0 {
                pra = Self::prove_record(&pad, ctx.la, at)?.pra;
            }
        }
        if out.is_empty() {
            return Err(CatalogError::KeyNotFound);
        }
        Ok(out)
    }

    /// Restores the catalog from the preservers. Picks the version most
    /// preservers hold, rebuilds the local file from one randomly chosen
    /// holder, checks it against that version and makes every verifier
    /// adopt it as the latest.
    pub fn recover(&self) -> Result<RecoverReport> {
        let preservers = &self.settings.preservers;
        if preservers.is_empty() {
            return Err(CatalogError::NoPreservers);
        }
        let mut log = self.writer.lock();

        let replies: Vec<Option<Option<CatalogToken>>> = self
            .broadcast(preservers, Body::RecoverVersionRequest)
            .into_iter()
            .map(|r| match r {
                Some(Body::RecoverVersionReply { status: Status::Ok, token: Some(t) }) => Some(Some(t)),
                Some(Body::RecoverVersionReply { status: Status::NoReplica, .. }) => Some(None),
                _ => None,
            })
            .collect();
        let tally = VoteTally::from_replies(replies.iter().copied());
        let token = self.policy.recover(&tally).ok_or(CatalogError::RecoverQuorumFailed {
            participants: tally.participants(),
            preservers: tally.peer_count(),
        })?;
        let mut holders: Vec<&Peer> =
            preservers.iter().zip(&replies).filter(|(_, r)| **r == Some(Some(token))).map(|(p, _)| p).collect();
        holders.shuffle(&mut *self.rng.lock());

        let mut rebuild = self.path.as_os_str().to_os_string();
        rebuild.push(".rebuild");
        let rebuild = PathBuf::from(rebuild);
        let mut failed = Vec::new();
        let mut last_was_verify = false;
        let mut chosen = None;
        for holder in holders {
            remove_if_exists(&rebuild)?;
            remove_if_exists(&journal_path(&rebuild))?;
            match self.fetch_from(holder, token, &rebuild) {
                Ok(pad) => {
                    chosen = Some((holder.id, pad));
                    break;
                }
                Err(e) => {
                    last_was_verify = matches!(e, SyncError::Pad(ref p) if p.is_integrity());
                    log::warn!("recovery from {} failed: {e}", holder.id);
                    failed.push((holder.id, e.to_string()));
                }
            }
        }
        let Some((holder, rebuilt)) = chosen else {
            remove_if_exists(&rebuild)?;
            let summary = failed.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; ");
            return Err(if last_was_verify {
                CatalogError::RecoverVerifyFailed(summary)
            } else {
                CatalogError::RecoverTransferFailed(summary)
            });
        };
        // Close the rebuilt file before it replaces the damaged one.
        drop(rebuilt);

        let (replayed, context) = {
            let mut pad = self.pad.write();
            remove_if_exists(&journal_path(&self.path))?;
            std::fs::rename(&rebuild, &self.path)?;
            let mut fresh = TreapPad::open(&self.path)?;
            let (mut new_log, ops) = PendingLog::open(&self.path, fresh.open_epoch())?;
            let replayed = replay(&mut fresh, &mut new_log, ops)?;
            *pad = fresh;
            *log = new_log;
            let record = Self::prove_record(&pad, token.authenticator, token.snapshot_id)
                .map_err(|e| CatalogError::RecoverVerifyFailed(e.to_string()))?;
            let context = VerifiedContext {
                snapshot_id: token.snapshot_id,
                la: token.authenticator,
                pra: record.pra,
                root: record.root,
                timestamp: record.timestamp,
                alg: pad.hash_alg(),
            };
            (replayed, context)
        };
        drop(log);

        let counter = self.clock.now_micros();
        let resets_acked = self
            .broadcast(&self.settings.verifiers, Body::VersionReset { token, counter })
            .iter()
            .filter(|r| matches!(r, Some(Body::StoreReply { status: Status::Ok, .. })))
            .count() as u64;
        if resets_acked < self.settings.verifiers.len() as u64 {
            log::warn!("{resets_acked} of {} verifiers accepted the reset", self.settings.verifiers.len());
        }
        Ok(RecoverReport { token, holder, failed, replayed, resets_acked, context })
    }

    fn fetch_from(&self, holder: &Peer, token: CatalogToken, rebuild: &Path) -> Result<TreapPad, SyncError> {
        let mut conn = self.transport.connect(&holder.address)?;
        let mut slot = None;
        let r = pull_snapshots(conn.as_mut(), self.settings.node_id, Stream::Recover, &mut slot, rebuild, 1, token);
        conn.close();
        r?;
        let pad = slot.ok_or(SyncError::Unexpected("empty recovery"))?;
        if pad.list_authenticator()? != token.authenticator {
            return Err(SyncError::Pad(PadError::CommitRejected("list authenticator mismatch".into())));
        }
        Ok(pad)
    }
}
