//! On-disk layout of a treap node and its version history.
//!
//! ```text
//! key_len u16 | key | entry_count u16 | entries | auth_count u16 | auths
//! entry = snapshot u64 | flags u8 | [left id] | [right id] | [value_len u16 | value]
//! auth  = snapshot u64 | digest (32)
//! ```
//!
//! All integers little-endian; ids are eight octets (u48 block, u16 slot).
//! Optional fields are present only when their flag bit is set.

use crate::digest::{Digest, DIGEST_LEN};
use crate::store::RecordId;

const HAS_LEFT: u8 = 0b001;
const HAS_RIGHT: u8 = 0b010;
const HAS_VALUE: u8 = 0b100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionEntry {
    pub snapshot: u64,
    pub left: Option<RecordId>,
    pub right: Option<RecordId>,
    /// `None` means the value is unchanged from the previous entry.
    pub value: Option<Vec<u8>>,
}

/// Node contents as seen from one snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeState<'a> {
    pub left: Option<RecordId>,
    pub right: Option<RecordId>,
    pub value: &'a [u8],
    pub value_snapshot: u64,
    /// Snapshot of the entry in force, i.e. when this subtree last changed.
    pub changed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub key: Vec<u8>,
    pub entries: Vec<VersionEntry>,
    pub auths: Vec<(u64, Digest)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub &'static str);

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.at.checked_add(n).ok_or(DecodeError("length overflow"))?;
        let out = self.buf.get(self.at..end).ok_or(DecodeError("truncated node"))?;
        self.at = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn id(&mut self) -> Result<RecordId, DecodeError> {
        Ok(RecordId::decode(self.take(RecordId::ENCODED_LEN)?).unwrap())
    }
}

impl NodeRecord {
    pub fn new(key: Vec<u8>, snapshot: u64, value: Vec<u8>) -> NodeRecord {
        NodeRecord {
            key,
            entries: vec![VersionEntry { snapshot, left: None, right: None, value: Some(value) }],
            auths: Vec::new(),
        }
    }

    /// Serialized size of a fresh node holding `key` and `value`.
    pub fn minimal_len(key_len: usize, value_len: usize) -> usize {
        2 + key_len + 2 + (8 + 1 + 2 + value_len) + 2
    }

    /// Upper bound on the size of [`NodeRecord::condensed`] for this key and
    /// value length.
    pub fn copy_len(key_len: usize, value_len: usize) -> usize {
        Self::minimal_len(key_len, value_len) + 2 * RecordId::ENCODED_LEN + 9 + 2 * RecordId::ENCODED_LEN + 8 + DIGEST_LEN
    }

    pub fn encoded_len(&self) -> usize {
        let entries: usize = self
            .entries
            .iter()
            .map(|e| {
                9 + e.left.map_or(0, |_| RecordId::ENCODED_LEN)
                    + e.right.map_or(0, |_| RecordId::ENCODED_LEN)
                    + e.value.as_ref().map_or(0, |v| 2 + v.len())
            })
            .sum();
        2 + self.key.len() + 2 + entries + 2 + self.auths.len() * (8 + DIGEST_LEN)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.key.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&(self.entries.len() as u16).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.snapshot.to_le_bytes());
            let flags = e.left.map_or(0, |_| HAS_LEFT)
                | e.right.map_or(0, |_| HAS_RIGHT)
                | e.value.as_ref().map_or(0, |_| HAS_VALUE);
            out.push(flags);
            if let Some(l) = e.left {
                out.extend_from_slice(&l.encode());
            }
            if let Some(r) = e.right {
                out.extend_from_slice(&r.encode());
            }
            if let Some(v) = &e.value {
                out.extend_from_slice(&(v.len() as u16).to_le_bytes());
                out.extend_from_slice(v);
            }
        }
        out.extend_from_slice(&(self.auths.len() as u16).to_le_bytes());
        for (snap, d) in &self.auths {
            out.extend_from_slice(&snap.to_le_bytes());
            out.extend_from_slice(d.as_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<NodeRecord, DecodeError> {
        let mut r = Reader { buf, at: 0 };
        let key_len = r.u16()? as usize;
        let key = r.take(key_len)?.to_vec();
        let count = r.u16()? as usize;
        if count == 0 {
            return Err(DecodeError("node without versions"));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let snapshot = r.u64()?;
            let flags = r.u8()?;
            if flags & !(HAS_LEFT | HAS_RIGHT | HAS_VALUE) != 0 {
                return Err(DecodeError("unknown entry flags"));
            }
            let left = if flags & HAS_LEFT != 0 { Some(r.id()?) } else { None };
            let right = if flags & HAS_RIGHT != 0 { Some(r.id()?) } else { None };
            let value = if flags & HAS_VALUE != 0 {
                let len = r.u16()? as usize;
                Some(r.take(len)?.to_vec())
            } else {
                None
            };
            if let Some(prev) = entries.last().map(|e: &VersionEntry| e.snapshot) {
                if snapshot <= prev {
                    return Err(DecodeError("version snapshots not increasing"));
                }
            } else if value.is_none() {
                return Err(DecodeError("first version lacks a value"));
            }
            entries.push(VersionEntry { snapshot, left, right, value });
        }
        let auth_count = r.u16()? as usize;
        let mut auths = Vec::with_capacity(auth_count);
        for _ in 0..auth_count {
            let snap = r.u64()?;
            let d = Digest::from_slice(r.take(DIGEST_LEN)?).unwrap();
            auths.push((snap, d));
        }
        if r.at != buf.len() {
            return Err(DecodeError("trailing octets after node"));
        }
        Ok(NodeRecord { key, entries, auths })
    }

    /// State in force at `snapshot`, or `None` if the node did not exist yet.
    pub fn state_at(&self, snapshot: u64) -> Option<NodeState<'_>> {
        let idx = self.entries.iter().rposition(|e| e.snapshot <= snapshot)?;
        let entry = &self.entries[idx];
        let (value, value_snapshot) = self.entries[..=idx]
            .iter()
            .rev()
            .find_map(|e| e.value.as_deref().map(|v| (v, e.snapshot)))?;
        Some(NodeState {
            left: entry.left,
            right: entry.right,
            value,
            value_snapshot,
            changed_at: entry.snapshot,
        })
    }

    pub fn latest(&self) -> NodeState<'_> {
        self.state_at(u64::MAX).expect("decoded nodes always have a valued first entry")
    }

    pub fn has_entry(&self, snapshot: u64) -> bool {
        self.entries.last().is_some_and(|e| e.snapshot == snapshot)
    }

    /// Sets the child pointers in force at `snapshot`, adding a version entry
    /// when the node has none for that snapshot yet.
    pub fn set_children(&mut self, snapshot: u64, left: Option<RecordId>, right: Option<RecordId>) {
        match self.entries.last_mut() {
            Some(e) if e.snapshot == snapshot => {
                e.left = left;
                e.right = right;
            }
            _ => self.entries.push(VersionEntry { snapshot, left, right, value: None }),
        }
    }

    /// Replaces the value at `snapshot`; earlier versions stay intact.
    pub fn set_value(&mut self, snapshot: u64, value: Vec<u8>) {
        let latest = self.latest();
        let (left, right) = (latest.left, latest.right);
        self.set_children(snapshot, left, right);
        self.entries.last_mut().unwrap().value = Some(value);
    }

    pub fn cached_auth(&self, snapshot: u64) -> Option<Digest> {
        self.auths.iter().rev().find(|(s, _)| *s == snapshot).map(|(_, d)| *d)
    }

    pub fn push_auth(&mut self, snapshot: u64, digest: Digest) {
        match self.auths.last_mut() {
            Some((s, d)) if *s == snapshot => *d = digest,
            _ => self.auths.push((snapshot, digest)),
        }
    }

    /// The node copy written when the record outgrows its page: only the
    /// latest state, with the value kept at the version that introduced it.
    pub fn condensed(&self) -> NodeRecord {
        let latest = self.latest();
        let mut entries = Vec::with_capacity(2);
        entries.push(VersionEntry {
            snapshot: latest.value_snapshot,
            left: latest.left,
            right: latest.right,
            value: Some(latest.value.to_vec()),
        });
        if latest.changed_at != latest.value_snapshot {
            entries.push(VersionEntry {
                snapshot: latest.changed_at,
                left: latest.left,
                right: latest.right,
                value: None,
            });
        }
        let auths = self
            .auths
            .last()
            .filter(|(s, _)| *s == latest.changed_at)
            .map(|a| vec![*a])
            .unwrap_or_default();
        NodeRecord { key: self.key.clone(), entries, auths }
    }
}
