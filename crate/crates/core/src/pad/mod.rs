//! Persistent authenticated dictionary over a deterministic treap.
//!
//! Nodes are fat: each record keeps a log of version entries, one per epoch
//! in which the node or anything below it changed. Every node on an update
//! path receives an entry for the open epoch, so the entry in force at a
//! snapshot also names the epoch in which that subtree last changed; cached
//! authenticators are keyed by that epoch.
//!
//! Record `(0, 0)` of the store is a fixed-size meta record holding the
//! latest sealed snapshot, the current root and the list head.

mod node;
mod proof;
mod sync;
#[cfg(test)]
mod tests;

use std::cmp::Ordering;
use std::path::Path;

use thiserror::Error;

use crate::aasl::{AuthList, ListError, ListHead, ListProof, SnapshotRecord};
use crate::digest::{Digest, HashAlg};
use crate::store::{RecordId, Store, StoreError, DEFAULT_PAGE_SIZE};

pub use node::{NodeRecord, NodeState, VersionEntry};
pub use proof::{
    verify_absence, verify_proof, AbsenceProof, AbsenceStep, LookupProof, MembershipProof, PathStep, ProvenEntry,
    Side,
};

#[derive(Debug, Error)]
pub enum PadError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("key already present")]
    KeyExists,
    #[error("key not found")]
    KeyNotFound,
    #[error("key of {len} octets exceeds the {max} a node can hold")]
    KeyTooLarge { len: usize, max: usize },
    #[error("value of {len} octets exceeds the {max} a node can hold")]
    ValueTooLarge { len: usize, max: usize },
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("proof does not match the authenticator")]
    ProofMismatch,
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(u64),
    #[error("snapshot {got} does not follow the latest ({expected} expected)")]
    SnapshotGap { expected: u64, got: u64 },
    #[error("no binary update session for this snapshot")]
    NotInUpdateSession,
    #[error("binary update rejected: {0}")]
    CommitRejected(String),
    #[error("open epoch has unsealed changes")]
    PendingWrites,
    #[error("a binary update is in progress")]
    UpdateInProgress,
}

impl PadError {
    /// True when the error means stored or received data failed a check.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            PadError::CorruptData(_)
                | PadError::ProofMismatch
                | PadError::CommitRejected(_)
                | PadError::Store(StoreError::CorruptBlock { .. } | StoreError::CorruptHeader(_))
        )
    }
}

impl From<ListError> for PadError {
    fn from(e: ListError) -> PadError {
        match e {
            ListError::Store(e) => PadError::Store(e),
            ListError::UnknownSnapshot(s) => PadError::UnknownSnapshot(s),
            ListError::ProofMismatch => PadError::ProofMismatch,
            ListError::CorruptData(m) => PadError::CorruptData(m),
            e @ ListError::NonSequentialAppend { .. } => PadError::CorruptData(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, PadError>;

/// Caching schedule: with skip number `k > 0`, snapshot `s` caches
/// authenticators at depths congruent to `s - 1` modulo `k`.
pub fn should_cache(depth: u32, snapshot: u64, skip_no: u32) -> bool {
    skip_no == 0 || u64::from(depth % skip_no) == (snapshot - 1) % u64::from(skip_no)
}

/// Authenticator of one node given its children's authenticators.
pub fn node_authenticator(
    alg: HashAlg,
    key: &[u8],
    value: &[u8],
    value_snapshot: u64,
    left: &Digest,
    right: &Digest,
) -> Digest {
    node_authenticator_from_digests(alg, &alg.hash(key), &alg.hash(value), value_snapshot, left, right)
}

pub fn node_authenticator_from_digests(
    alg: HashAlg,
    key_digest: &Digest,
    value_digest: &Digest,
    value_snapshot: u64,
    left: &Digest,
    right: &Digest,
) -> Digest {
    alg.hash_parts(&[
        b"N",
        key_digest.as_bytes(),
        value_digest.as_bytes(),
        &value_snapshot.to_le_bytes(),
        left.as_bytes(),
        right.as_bytes(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadConfig {
    pub hash: HashAlg,
    pub skip_no: u32,
    pub page_size: usize,
}

impl Default for PadConfig {
    fn default() -> PadConfig {
        PadConfig { hash: HashAlg::Sha256, skip_no: 0, page_size: DEFAULT_PAGE_SIZE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotView {
    pub snapshot_id: u64,
    pub root: Option<RecordId>,
    pub pra: Digest,
}

const META_ID: RecordId = RecordId { block: 0, slot: 0 };
const META_MAGIC: [u8; 4] = *b"ICMT";
const META_LEN: usize = 4 + 1 + 1 + 4 + 8 + 9 + 9 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Meta {
    alg: HashAlg,
    skip_no: u32,
    latest_sealed: u64,
    root: Option<RecordId>,
    list: Option<ListHead>,
}

fn put_opt_id(out: &mut Vec<u8>, id: Option<RecordId>) {
    match id {
        None => out.extend_from_slice(&[0; 9]),
        Some(id) => {
            out.push(1);
            out.extend_from_slice(&id.encode());
        }
    }
}

fn get_opt_id(raw: &[u8]) -> Option<Option<RecordId>> {
    match raw[0] {
        0 => Some(None),
        1 => RecordId::decode(&raw[1..9]).map(Some),
        _ => None,
    }
}

impl Meta {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(META_LEN);
        out.extend_from_slice(&META_MAGIC);
        out.push(1);
        out.push(self.alg.id());
        out.extend_from_slice(&self.skip_no.to_le_bytes());
        out.extend_from_slice(&self.latest_sealed.to_le_bytes());
        put_opt_id(&mut out, self.root);
        put_opt_id(&mut out, self.list.map(|h| h.id));
        out.extend_from_slice(&self.list.map_or(0, |h| h.len).to_le_bytes());
        out
    }

    fn decode(raw: &[u8]) -> Result<Meta> {
        let bad = |m: &str| PadError::CorruptData(format!("meta record: {m}"));
        if raw.len() != META_LEN || raw[0..4] != META_MAGIC || raw[4] != 1 {
            return Err(bad("bad magic or length"));
        }
        let alg = HashAlg::from_id(raw[5]).ok_or_else(|| bad("unknown hash"))?;
        let skip_no = u32::from_le_bytes(raw[6..10].try_into().unwrap());
        let latest_sealed = u64::from_le_bytes(raw[10..18].try_into().unwrap());
        let root = get_opt_id(&raw[18..27]).ok_or_else(|| bad("root pointer"))?;
        let head = get_opt_id(&raw[27..36]).ok_or_else(|| bad("list pointer"))?;
        let len = u64::from_le_bytes(raw[36..44].try_into().unwrap());
        let list = match head {
            Some(id) => Some(ListHead { id, len }),
            None if len == 0 => None,
            None => return Err(bad("list length without head")),
        };
        if len != latest_sealed {
            return Err(bad("list length disagrees with latest snapshot"));
        }
        Ok(Meta { alg, skip_no, latest_sealed, root, list })
    }
}

pub struct TreapPad {
    store: Store,
    meta: Meta,
    /// Latest snapshot present in the synced image.
    durable_sealed: u64,
    /// Snapshot currently being received block by block.
    session: Option<u64>,
    /// Latest snapshot received but not yet committed.
    staged: Option<u64>,
    open_dirty: bool,
}

impl TreapPad {
    pub fn create(path: impl AsRef<Path>, config: PadConfig) -> Result<TreapPad> {
        let mut store = Store::create(path, config.page_size)?;
        store.set_current_epoch(1)?;
        let meta = Meta { alg: config.hash, skip_no: config.skip_no, latest_sealed: 0, root: None, list: None };
        let id = store.insert_record(&meta.encode())?;
        debug_assert_eq!(id, META_ID);
        store.sync()?;
        Ok(TreapPad { store, meta, durable_sealed: 0, session: None, staged: None, open_dirty: false })
    }

    /// An empty pad that will be populated only through binary updates;
    /// its hash and skip number arrive with the first replicated snapshot.
    pub fn create_replica(path: impl AsRef<Path>, page_size: usize) -> Result<TreapPad> {
        let mut store = Store::create(path, page_size)?;
        store.set_current_epoch(1)?;
        store.sync()?;
        Ok(TreapPad { store, meta: Self::empty_meta(), durable_sealed: 0, session: None, staged: None, open_dirty: false })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<TreapPad> {
        let mut store = Store::open(path)?;
        let meta = if store.block_count() == 0 { Self::empty_meta() } else { Self::read_meta(&store)? };
        if store.current_epoch() <= meta.latest_sealed {
            store.set_current_epoch(meta.latest_sealed + 1)?;
        }
        Ok(TreapPad { store, meta, durable_sealed: meta.latest_sealed, session: None, staged: None, open_dirty: false })
    }

    fn empty_meta() -> Meta {
        Meta { alg: HashAlg::Sha256, skip_no: 0, latest_sealed: 0, root: None, list: None }
    }

    fn read_meta(store: &Store) -> Result<Meta> {
        Meta::decode(&store.read_record(META_ID)?)
    }

    fn write_meta(&mut self) -> Result<()> {
        let bytes = self.meta.encode();
        if self.store.block_count() == 0 {
            let id = self.store.insert_record(&bytes)?;
            debug_assert_eq!(id, META_ID);
        } else {
            self.store.update_record(META_ID, &bytes)?;
        }
        Ok(())
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn hash_alg(&self) -> HashAlg {
        self.meta.alg
    }

    pub fn skip_no(&self) -> u32 {
        self.meta.skip_no
    }

    pub fn latest_sealed(&self) -> u64 {
        self.meta.latest_sealed
    }

    pub fn open_epoch(&self) -> u64 {
        self.meta.latest_sealed + 1
    }

    pub fn has_unsealed_changes(&self) -> bool {
        self.open_dirty
    }

    fn list(&self) -> AuthList {
        AuthList::new(self.meta.alg, self.meta.list)
    }

    /// Authenticator of the list head; nil before the first snapshot.
    pub fn list_authenticator(&self) -> Result<Digest> {
        Ok(self.list().la(&self.store)?)
    }

    pub fn snapshot_record(&self, snapshot_id: u64) -> Result<SnapshotRecord> {
        Ok(self.list().get(&self.store, snapshot_id)?)
    }

    pub fn snapshot_view(&self, snapshot_id: u64) -> Result<SnapshotView> {
        let r = self.snapshot_record(snapshot_id)?;
        Ok(SnapshotView { snapshot_id, root: r.root, pra: r.pra })
    }

    pub fn list_proof(&self, snapshot_id: u64) -> Result<ListProof> {
        Ok(self.list().prove(&self.store, snapshot_id)?)
    }

    /// Largest value a node with a key of `key_len` may hold. Leaves room
    /// for the node copy's worst case: two entries, both children and one
    /// cached authenticator.
    pub fn max_value_len(&self, key_len: usize) -> usize {
        self.store.max_record_size().saturating_sub(NodeRecord::copy_len(key_len, 0))
    }

    pub(crate) fn load_node(&self, id: RecordId) -> Result<NodeRecord> {
        let raw = self.store.read_record(id)?;
        NodeRecord::decode(&raw).map_err(|e| PadError::CorruptData(format!("node {id:?}: {}", e.0)))
    }

    /// Writes a node back, copying it to a fresh record with only its latest
    /// state once its history no longer fits a page.
    fn write_node(&mut self, id: Option<RecordId>, node: &mut NodeRecord) -> Result<RecordId> {
        let max = self.store.max_record_size();
        let Some(id) = id else {
            return Ok(self.store.insert_record(&node.encode())?);
        };
        if node.encoded_len() > max {
            *node = node.condensed();
            if node.encoded_len() > max {
                return Err(PadError::ValueTooLarge { len: node.latest().value.len(), max: self.max_value_len(node.key.len()) });
            }
            log::debug!("node copy of {id:?}");
            return Ok(self.store.insert_record(&node.encode())?);
        }
        Ok(self.store.update_record(id, &node.encode())?)
    }

    fn priority_gt(&self, a: &[u8], b: &[u8]) -> bool {
        let (pa, pb) = (self.meta.alg.hash(a), self.meta.alg.hash(b));
        (pa.0, a) > (pb.0, b)
    }

    fn check_sizes(&self, key: &[u8], value_len: usize) -> Result<()> {
        let max = self.store.max_record_size();
        if NodeRecord::copy_len(key.len(), 0) > max {
            return Err(PadError::KeyTooLarge { len: key.len(), max: max - NodeRecord::copy_len(0, 0) });
        }
        if NodeRecord::copy_len(key.len(), value_len) > max {
            return Err(PadError::ValueTooLarge { len: value_len, max: self.max_value_len(key.len()) });
        }
        Ok(())
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.session.is_some() || self.staged.is_some() {
            return Err(PadError::UpdateInProgress);
        }
        Ok(())
    }

    pub fn insert(&mut self, key: &[u8], value: &[u8]) -> Result<()> {
        self.ensure_mutable()?;
        self.check_sizes(key, value.len())?;
        let epoch = self.open_epoch();
        let (root, _) = self.insert_at(self.meta.root, key, value, epoch)?;
        self.meta.root = Some(root);
        self.open_dirty = true;
        Ok(())
    }

    fn insert_at(
        &mut self,
        at: Option<RecordId>,
        key: &[u8],
        value: &[u8],
        epoch: u64,
    ) -> Result<(RecordId, NodeRecord)> {
        let Some(id) = at else {
            let mut node = NodeRecord::new(key.to_vec(), epoch, value.to_vec());
            let id = self.write_node(None, &mut node)?;
            return Ok((id, node));
        };
        let mut node = self.load_node(id)?;
        let (left, right) = {
            let s = node.latest();
            (s.left, s.right)
        };
        match key.cmp(&node.key) {
            Ordering::Equal => Err(PadError::KeyExists),
            Ordering::Less => {
                let (cid, mut child) = self.insert_at(left, key, value, epoch)?;
                if self.priority_gt(&child.key, &node.key) {
                    let (cl, cr) = {
                        let s = child.latest();
                        (s.left, s.right)
                    };
                    node.set_children(epoch, cr, right);
                    let nid = self.write_node(Some(id), &mut node)?;
                    child.set_children(epoch, cl, Some(nid));
                    let cid = self.write_node(Some(cid), &mut child)?;
                    Ok((cid, child))
                } else {
                    node.set_children(epoch, Some(cid), right);
                    let id = self.write_node(Some(id), &mut node)?;
                    Ok((id, node))
                }
            }
            Ordering::Greater => {
                let (cid, mut child) = self.insert_at(right, key, value, epoch)?;
                if self.priority_gt(&child.key, &node.key) {
                    let (cl, cr) = {
                        let s = child.latest();
                        (s.left, s.right)
                    };
                    node.set_children(epoch, left, cl);
                    let nid = self.write_node(Some(id), &mut node)?;
                    child.set_children(epoch, Some(nid), cr);
                    let cid = self.write_node(Some(cid), &mut child)?;
                    Ok((cid, child))
                } else {
                    node.set_children(epoch, left, Some(cid));
                    let id = self.write_node(Some(id), &mut node)?;
                    Ok((id, node))
                }
            }
        }
    }

    /// Appends `suffix` to the value stored under `key`.
    pub fn amend(&mut self, key: &[u8], suffix: &[u8]) -> Result<()> {
        self.ensure_mutable()?;
        let epoch = self.open_epoch();
        let root = self.amend_at(self.meta.root, key, suffix, epoch)?;
        self.meta.root = Some(root);
        self.open_dirty = true;
        Ok(())
    }

    fn amend_at(&mut self, at: Option<RecordId>, key: &[u8], suffix: &[u8], epoch: u64) -> Result<RecordId> {
        let id = at.ok_or(PadError::KeyNotFound)?;
        let mut node = self.load_node(id)?;
        let (left, right) = {
            let s = node.latest();
            (s.left, s.right)
        };
        match key.cmp(&node.key) {
            Ordering::Equal => {
                let mut value = node.latest().value.to_vec();
                value.extend_from_slice(suffix);
                self.check_sizes(key, value.len())?;
                node.set_value(epoch, value);
            }
            Ordering::Less => {
                let c = self.amend_at(left, key, suffix, epoch)?;
                node.set_children(epoch, Some(c), right);
            }
            Ordering::Greater => {
                let c = self.amend_at(right, key, suffix, epoch)?;
                node.set_children(epoch, left, Some(c));
            }
        }
        self.write_node(Some(id), &mut node)
    }

    /// Root of the tree as of `snapshot_id`; the open epoch is allowed.
    fn root_at(&self, snapshot_id: u64) -> Result<Option<RecordId>> {
        if snapshot_id == self.open_epoch() {
            Ok(self.meta.root)
        } else if snapshot_id == 0 {
            Ok(None)
        } else if snapshot_id <= self.meta.latest_sealed {
            Ok(self.snapshot_record(snapshot_id)?.root)
        } else {
            Err(PadError::UnknownSnapshot(snapshot_id))
        }
    }

    /// Value of `key` at `snapshot_id` with the snapshot in which that value
    /// was stored. Unverified; pass the open epoch to see unsealed changes.
    pub fn get(&self, key: &[u8], snapshot_id: u64) -> Result<Option<(Vec<u8>, u64)>> {
        let mut at = self.root_at(snapshot_id)?;
        while let Some(id) = at {
            let node = self.load_node(id)?;
            let state = node.state_at(snapshot_id).ok_or_else(|| Self::dangling(id, snapshot_id))?;
            at = match key.cmp(&node.key) {
                Ordering::Equal => return Ok(Some((state.value.to_vec(), state.value_snapshot))),
                Ordering::Less => state.left,
                Ordering::Greater => state.right,
            };
        }
        Ok(None)
    }

    fn dangling(id: RecordId, snapshot_id: u64) -> PadError {
        PadError::CorruptData(format!("node {id:?} has no version at snapshot {snapshot_id}"))
    }

    /// Authenticator of a node at `snapshot_id`, taken from the cache when
    /// the cache holds the entry in force and recomputed otherwise.
    pub(crate) fn auth_of(&self, node: &NodeRecord, snapshot_id: u64, use_cache: bool) -> Result<Digest> {
        let state = node.state_at(snapshot_id).ok_or_else(|| PadError::CorruptData("node from the future".into()))?;
        if use_cache {
            if let Some(d) = node.cached_auth(state.changed_at) {
                return Ok(d);
            }
        }
        let child = |c: Option<RecordId>| -> Result<Digest> {
            match c {
                None => Ok(Digest::NIL),
                Some(id) => self.auth_of(&self.load_node(id)?, snapshot_id, use_cache),
            }
        };
        let (l, r) = (child(state.left)?, child(state.right)?);
        Ok(node_authenticator(self.meta.alg, &node.key, state.value, state.value_snapshot, &l, &r))
    }

    pub(crate) fn auth_of_id(&self, id: Option<RecordId>, snapshot_id: u64, use_cache: bool) -> Result<Digest> {
        match id {
            None => Ok(Digest::NIL),
            Some(id) => self.auth_of(&self.load_node(id)?, snapshot_id, use_cache),
        }
    }

    /// Recomputes the root authenticator of a sealed snapshot from scratch,
    /// ignoring every cached value.
    pub fn recompute_pra(&self, snapshot_id: u64) -> Result<Digest> {
        let root = self.root_at(snapshot_id)?;
        self.auth_of_id(root, snapshot_id, false)
    }

    /// Seals the open epoch.
    pub fn snapshot(&mut self, timestamp: u64) -> Result<SnapshotView> {
        self.ensure_mutable()?;
        match self.seal(timestamp) {
            Ok(v) => Ok(v),
            Err(e) => {
                // Unsealed changes are lost with the rollback; callers that
                // need them keep their own log.
                self.store.rollback();
                self.meta = Self::read_meta(&self.store)?;
                self.open_dirty = false;
                Err(e)
            }
        }
    }

    fn seal(&mut self, timestamp: u64) -> Result<SnapshotView> {
        let epoch = self.open_epoch();
        let (root, pra) = match self.meta.root {
            None => (None, Digest::NIL),
            Some(r) => {
                let (id, a) = self.seal_node(r, 0, epoch)?;
                (Some(id), a)
            }
        };
        let mut list = self.list();
        list.append(&mut self.store, SnapshotRecord { snapshot_id: epoch, root, pra, timestamp })?;
        self.meta.latest_sealed = epoch;
        self.meta.root = root;
        self.meta.list = list.head();
        self.write_meta()?;
        self.store.set_current_epoch(epoch + 1)?;
        self.store.sync()?;
        self.durable_sealed = epoch;
        self.open_dirty = false;
        Ok(SnapshotView { snapshot_id: epoch, root, pra })
    }

    fn seal_node(&mut self, id: RecordId, depth: u32, epoch: u64) -> Result<(RecordId, Digest)> {
        let mut node = self.load_node(id)?;
        if !node.has_entry(epoch) {
            return Ok((id, self.auth_of(&node, epoch, true)?));
        }
        let (left, right) = {
            let s = node.latest();
            (s.left, s.right)
        };
        let mut seal_child = |c: Option<RecordId>| -> Result<(Option<RecordId>, Digest)> {
            match c {
                None => Ok((None, Digest::NIL)),
                Some(c) => self.seal_node(c, depth + 1, epoch).map(|(id, a)| (Some(id), a)),
            }
        };
        let (nl, al) = seal_child(left)?;
        let (nr, ar) = seal_child(right)?;
        let state = node.latest();
        let auth = node_authenticator(self.meta.alg, &node.key, state.value, state.value_snapshot, &al, &ar);
        let mut changed = (nl, nr) != (left, right);
        if changed {
            node.set_children(epoch, nl, nr);
        }
        if should_cache(depth, epoch, self.meta.skip_no) {
            node.push_auth(epoch, auth);
            changed = true;
        }
        let id = if changed { self.write_node(Some(id), &mut node)? } else { id };
        Ok((id, auth))
    }

    /// Visits every node reachable at `snapshot_id` in key order.
    pub fn for_each_at(
        &self,
        snapshot_id: u64,
        mut f: impl FnMut(u32, &NodeRecord, &NodeState<'_>),
    ) -> Result<()> {
        fn walk(
            pad: &TreapPad,
            id: Option<RecordId>,
            depth: u32,
            s: u64,
            f: &mut dyn FnMut(u32, &NodeRecord, &NodeState<'_>),
        ) -> Result<()> {
            let Some(id) = id else { return Ok(()) };
            let node = pad.load_node(id)?;
            let state = node.state_at(s).ok_or_else(|| TreapPad::dangling(id, s))?;
            walk(pad, state.left, depth + 1, s, f)?;
            f(depth, &node, &state);
            walk(pad, state.right, depth + 1, s, f)
        }
        walk(self, self.root_at(snapshot_id)?, 0, snapshot_id, &mut f)
    }
}
