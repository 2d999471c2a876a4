//! Authenticated append-only skip list of snapshot records.
//!
//! Element `i` links to `i - 2^l` for every `l` with `2^l | i`; a link that
//! would reach index 0 or below is the nil digest. The element authenticator
//! folds the record digest with the authenticators of all linked
//! predecessors, so the head authenticator (LA) commits to the whole list.
//!
//! Elements live in the same record store as the treap so that block
//! replication carries both.

use thiserror::Error;

use crate::digest::{Digest, HashAlg, DIGEST_LEN};
use crate::store::{RecordId, Store, StoreError};

#[derive(Debug, Error)]
pub enum ListError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("append of snapshot {got} to a list expecting {expected}")]
    NonSequentialAppend { expected: u64, got: u64 },
    #[error("snapshot {0} is not in the list")]
    UnknownSnapshot(u64),
    #[error("list element unreadable: {0}")]
    CorruptData(String),
    #[error("list proof does not match the authenticator")]
    ProofMismatch,
}

pub type Result<T> = std::result::Result<T, ListError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotRecord {
    pub snapshot_id: u64,
    pub root: Option<RecordId>,
    pub pra: Digest,
    pub timestamp: u64,
}

impl SnapshotRecord {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.snapshot_id.to_le_bytes());
        match self.root {
            None => out.push(0),
            Some(id) => {
                out.push(1);
                out.extend_from_slice(&id.encode());
            }
        }
        out.extend_from_slice(self.pra.as_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(57);
        self.encode_into(&mut out);
        out
    }

    pub fn digest(&self, alg: HashAlg) -> Digest {
        alg.hash_parts(&[b"S", &self.encode()])
    }
}

/// Number of skip links carried by element `index` (1-based).
pub fn level_count(index: u64) -> usize {
    index.trailing_zeros() as usize + 1
}

/// Predecessor reached by link `level` of element `index`, if any.
fn predecessor(index: u64, level: usize) -> Option<u64> {
    index.checked_sub(1u64 << level).filter(|&p| p > 0)
}

pub fn element_digest(alg: HashAlg, index: u64, record_digest: &Digest, links: &[Digest]) -> Digest {
    let idx = index.to_le_bytes();
    let mut parts: Vec<&[u8]> = Vec::with_capacity(3 + links.len());
    parts.push(b"E");
    parts.push(&idx);
    parts.push(record_digest.as_bytes());
    parts.extend(links.iter().map(|d| &d.as_bytes()[..]));
    alg.hash_parts(&parts)
}

/// An element as stored: the record, its authenticator, and one
/// `(predecessor id, predecessor authenticator)` pair per level.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Element {
    record: SnapshotRecord,
    digest: Digest,
    links: Vec<(Option<RecordId>, Digest)>,
}

impl Element {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + self.links.len() * 41);
        self.record.encode_into(&mut out);
        out.extend_from_slice(self.digest.as_bytes());
        out.push(self.links.len() as u8);
        for (pred, d) in &self.links {
            match pred {
                None => out.extend_from_slice(&[0; 9]),
                Some(id) => {
                    out.push(1);
                    out.extend_from_slice(&id.encode());
                }
            }
            out.extend_from_slice(d.as_bytes());
        }
        out
    }

    fn decode(buf: &[u8]) -> std::result::Result<Element, &'static str> {
        let take = |at: &mut usize, n: usize| -> std::result::Result<&[u8], &'static str> {
            let s = buf.get(*at..*at + n).ok_or("truncated list element")?;
            *at += n;
            Ok(s)
        };
        let opt_id = |flag: u8, raw: &[u8]| -> std::result::Result<Option<RecordId>, &'static str> {
            match flag {
                0 => Ok(None),
                1 => Ok(RecordId::decode(raw)),
                _ => Err("bad pointer flag"),
            }
        };
        let mut at = 0;
        let snapshot_id = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let flag = take(&mut at, 1)?[0];
        let root = match flag {
            0 => None,
            _ => opt_id(flag, take(&mut at, 8)?)?,
        };
        let pra = Digest::from_slice(take(&mut at, DIGEST_LEN)?).unwrap();
        let timestamp = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let digest = Digest::from_slice(take(&mut at, DIGEST_LEN)?).unwrap();
        let count = take(&mut at, 1)?[0] as usize;
        if snapshot_id == 0 || count != level_count(snapshot_id) {
            return Err("link count disagrees with index");
        }
        let mut links = Vec::with_capacity(count);
        for _ in 0..count {
            let flag = take(&mut at, 1)?[0];
            let pred = opt_id(flag, take(&mut at, 8)?)?;
            let d = Digest::from_slice(take(&mut at, DIGEST_LEN)?).unwrap();
            links.push((pred, d));
        }
        if at != buf.len() {
            return Err("trailing octets after list element");
        }
        Ok(Element { record: SnapshotRecord { snapshot_id, root, pra, timestamp }, digest, links })
    }

    fn link_digests(&self) -> Vec<Digest> {
        self.links.iter().map(|(_, d)| *d).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListHead {
    pub id: RecordId,
    pub len: u64,
}

/// One element of a proof chain above the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainLink {
    pub index: u64,
    pub record_digest: Digest,
    pub links: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListProof {
    pub record: SnapshotRecord,
    /// Predecessor authenticators of the target element.
    pub links: Vec<Digest>,
    /// Elements from just above the target up to the head.
    pub chain: Vec<ChainLink>,
}

impl ListProof {
    /// Elements covered, counting the target.
    pub fn chain_len(&self) -> usize {
        1 + self.chain.len()
    }

    pub fn head_index(&self) -> u64 {
        self.chain.last().map_or(self.record.snapshot_id, |c| c.index)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.record.encode();
        let put_links = |out: &mut Vec<u8>, links: &[Digest]| {
            out.push(links.len() as u8);
            for d in links {
                out.extend_from_slice(d.as_bytes());
            }
        };
        put_links(&mut out, &self.links);
        out.extend_from_slice(&(self.chain.len() as u16).to_le_bytes());
        for c in &self.chain {
            out.extend_from_slice(&c.index.to_le_bytes());
            out.extend_from_slice(c.record_digest.as_bytes());
            put_links(&mut out, &c.links);
        }
        out
    }
}

/// Checks a list proof without touching any store.
pub fn verify_list_proof(alg: HashAlg, proof: &ListProof, expected_la: &Digest) -> Result<SnapshotRecord> {
    let target = proof.record.snapshot_id;
    if target == 0 || proof.links.len() != level_count(target) {
        return Err(ListError::ProofMismatch);
    }
    let mut acc = element_digest(alg, target, &proof.record.digest(alg), &proof.links);
    let mut prev = target;
    for c in &proof.chain {
        let gap = c.index.checked_sub(prev).filter(|g| g.is_power_of_two()).ok_or(ListError::ProofMismatch)?;
        let level = gap.trailing_zeros() as usize;
        if c.links.len() != level_count(c.index) || c.links.get(level) != Some(&acc) {
            return Err(ListError::ProofMismatch);
        }
        acc = element_digest(alg, c.index, &c.record_digest, &c.links);
        prev = c.index;
    }
    if acc == *expected_la {
        Ok(proof.record)
    } else {
        Err(ListError::ProofMismatch)
    }
}

/// The list as seen through its head pointer.
#[derive(Debug, Clone, Copy)]
pub struct AuthList {
    alg: HashAlg,
    head: Option<ListHead>,
}

impl AuthList {
    pub fn new(alg: HashAlg, head: Option<ListHead>) -> AuthList {
        AuthList { alg, head }
    }

    pub fn head(&self) -> Option<ListHead> {
        self.head
    }

    pub fn len(&self) -> u64 {
        self.head.map_or(0, |h| h.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load(&self, store: &Store, id: RecordId) -> Result<Element> {
        let raw = store.read_record(id)?;
        Element::decode(&raw).map_err(|e| ListError::CorruptData(format!("{e} at {id:?}")))
    }

    /// The list authenticator; nil for an empty list.
    pub fn la(&self, store: &Store) -> Result<Digest> {
        match self.head {
            None => Ok(Digest::NIL),
            Some(h) => Ok(self.load(store, h.id)?.digest),
        }
    }

    /// Walks from the head to `target`, returning every element visited
    /// (head first, target last).
    fn walk(&self, store: &Store, target: u64) -> Result<Vec<(RecordId, Element)>> {
        let head = self.head.filter(|h| target >= 1 && target <= h.len).ok_or(ListError::UnknownSnapshot(target))?;
        let mut id = head.id;
        let mut index = head.len;
        let mut out = Vec::new();
        loop {
            let e = self.load(store, id)?;
            if e.record.snapshot_id != index {
                return Err(ListError::CorruptData(format!("element {id:?} claims index {}", e.record.snapshot_id)));
            }
            let level = (0..e.links.len())
                .rev()
                .find(|&l| predecessor(index, l).is_some_and(|p| p >= target));
            out.push((id, e));
            if index == target {
                return Ok(out);
            }
            let level = level.ok_or_else(|| ListError::CorruptData("no link toward target".into()))?;
            let next = out.last().unwrap().1.links[level].0;
            id = next.ok_or_else(|| ListError::CorruptData(format!("missing link at element {index}")))?;
            index -= 1 << level;
        }
    }

    pub fn get(&self, store: &Store, snapshot_id: u64) -> Result<SnapshotRecord> {
        Ok(self.walk(store, snapshot_id)?.pop().unwrap().1.record)
    }

    pub fn append(&mut self, store: &mut Store, record: SnapshotRecord) -> Result<Digest> {
        let index = self.len() + 1;
        if record.snapshot_id != index {
            return Err(ListError::NonSequentialAppend { expected: index, got: record.snapshot_id });
        }
        let mut links = Vec::with_capacity(level_count(index));
        for level in 0..level_count(index) {
            match predecessor(index, level) {
                None => links.push((None, Digest::NIL)),
                Some(p) => {
                    let (id, e) = self.walk(store, p)?.pop().unwrap();
                    links.push((Some(id), e.digest));
                }
            }
        }
        let digests: Vec<Digest> = links.iter().map(|(_, d)| *d).collect();
        let digest = element_digest(self.alg, index, &record.digest(self.alg), &digests);
        let id = store.insert_record(&Element { record, digest, links }.encode())?;
        self.head = Some(ListHead { id, len: index });
        Ok(digest)
    }

    pub fn prove(&self, store: &Store, snapshot_id: u64) -> Result<ListProof> {
        let mut path = self.walk(store, snapshot_id)?;
        let (_, target) = path.pop().unwrap();
        let chain = path
            .into_iter()
            .rev()
            .map(|(_, e)| ChainLink {
                index: e.record.snapshot_id,
                record_digest: e.record.digest(self.alg),
                links: e.link_digests(),
            })
            .collect();
        Ok(ListProof { links: target.link_digests(), record: target.record, chain })
    }

    /// Recomputes every element authenticator from the stored records and
    /// checks each stored digest and link against it. Returns the LA.
    pub fn refold(&self, store: &Store) -> Result<Digest> {
        let Some(head) = self.head else {
            return Ok(Digest::NIL);
        };
        // Collect elements by following level-0 links from the head.
        let mut elements = Vec::with_capacity(head.len as usize);
        let mut next = Some(head.id);
        while let Some(id) = next {
            let e = self.load(store, id)?;
            next = e.links[0].0;
            elements.push(e);
            if elements.len() as u64 > head.len {
                return Err(ListError::CorruptData("list longer than its head claims".into()));
            }
        }
        elements.reverse();
        if elements.len() as u64 != head.len {
            return Err(ListError::CorruptData("list shorter than its head claims".into()));
        }
        let mut computed: Vec<Digest> = Vec::with_capacity(elements.len());
        for (i, e) in elements.iter().enumerate() {
            let index = i as u64 + 1;
            if e.record.snapshot_id != index {
                return Err(ListError::CorruptData(format!("element {index} claims index {}", e.record.snapshot_id)));
            }
            for (level, (_, d)) in e.links.iter().enumerate() {
                let expect = predecessor(index, level).map_or(Digest::NIL, |p| computed[p as usize - 1]);
                if *d != expect {
                    return Err(ListError::CorruptData(format!("element {index} link {level} mismatch")));
                }
            }
            let digest = element_digest(self.alg, index, &e.record.digest(self.alg), &e.link_digests());
            if digest != e.digest {
                return Err(ListError::CorruptData(format!("element {index} authenticator mismatch")));
            }
            computed.push(digest);
        }
        Ok(*computed.last().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn record(i: u64) -> SnapshotRecord {
        SnapshotRecord {
            snapshot_id: i,
            root: Some(RecordId::new(i, (i % 7) as u16)),
            pra: HashAlg::Sha256.hash(&i.to_le_bytes()),
            timestamp: 1_700_000_000 + i * 86_400,
        }
    }

    fn build(dir: &TempDir, name: &str, n: u64) -> (Store, AuthList, Vec<Digest>) {
        let mut store = Store::create(dir.path().join(name), 4096).unwrap();
        let mut list = AuthList::new(HashAlg::Sha256, None);
        let mut las = Vec::new();
        for i in 1..=n {
            las.push(list.append(&mut store, record(i)).unwrap());
        }
        (store, list, las)
    }

    /// Independent recomputation: E_i straight from the definition, with
    /// every predecessor digest taken from a flat array.
    fn oracle_la(records: &[SnapshotRecord]) -> Digest {
        use sha2::{Digest as _, Sha256};
        let mut e: Vec<[u8; 32]> = Vec::new();
        for (k, r) in records.iter().enumerate() {
            let i = k as u64 + 1;
            let mut rec = Sha256::new();
            rec.update(b"S");
            rec.update(r.snapshot_id.to_le_bytes());
            match r.root {
                None => rec.update([0u8]),
                Some(id) => {
                    rec.update([1u8]);
                    rec.update(id.encode());
                }
            }
            rec.update(r.pra.0);
            rec.update(r.timestamp.to_le_bytes());
            let mut h = Sha256::new();
            h.update(b"E");
            h.update(i.to_le_bytes());
            h.update(rec.finalize());
            let mut l = 0;
            while i.is_multiple_of(1 << l) {
                let p = i as i64 - (1i64 << l);
                if p >= 1 {
                    h.update(e[p as usize - 1]);
                } else {
                    h.update([0u8; 32]);
                }
                l += 1;
            }
            e.push(h.finalize().into());
        }
        Digest(*e.last().unwrap())
    }

    #[test]
    fn first_append_uses_nil_links() {
        let dir = TempDir::new().unwrap();
        let (_, _, las) = build(&dir, "l", 1);
        let r = record(1);
        let expect = element_digest(HashAlg::Sha256, 1, &r.digest(HashAlg::Sha256), &[Digest::NIL]);
        assert_eq!(las[0], expect);
        assert_eq!(las[0], oracle_la(&[r]));
    }

    #[test]
    fn deterministic_across_lists() {
        let dir = TempDir::new().unwrap();
        let (_, _, a) = build(&dir, "a", 20);
        let (_, _, b) = build(&dir, "b", 20);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_sequential_append() {
        let dir = TempDir::new().unwrap();
        let (mut store, mut list, _) = build(&dir, "l", 3);
        let err = list.append(&mut store, record(5)).unwrap_err();
        assert!(matches!(err, ListError::NonSequentialAppend { expected: 4, got: 5 }));
    }

    #[test]
    fn latest_has_chain_of_one() {
        let dir = TempDir::new().unwrap();
        let (store, list, las) = build(&dir, "l", 9);
        let p = list.prove(&store, 9).unwrap();
        assert_eq!(p.chain_len(), 1);
        assert_eq!(verify_list_proof(HashAlg::Sha256, &p, &las[8]).unwrap(), record(9));
    }

    #[test]
    fn long_list_proofs_and_refold() {
        let dir = TempDir::new().unwrap();
        let (store, list, las) = build(&dir, "l", 365);
        let records: Vec<_> = (1..=365).map(record).collect();
        let la = oracle_la(&records);
        assert_eq!(las[364], la);
        assert_eq!(list.refold(&store).unwrap(), la);
        let p = list.prove(&store, 1).unwrap();
        // Two passes over the binary digits of 365 bound the walk.
        assert!(p.chain_len() <= 2 * 9 + 1, "chain {}", p.chain_len());
        assert_eq!(verify_list_proof(HashAlg::Sha256, &p, &la).unwrap(), record(1));
        for i in 1..=365 {
            let p = list.prove(&store, i).unwrap();
            assert_eq!(p.head_index(), 365);
            assert_eq!(verify_list_proof(HashAlg::Sha256, &p, &la).unwrap(), record(i));
        }
    }

    #[test]
    fn every_prefix_la_matches_oracle() {
        let dir = TempDir::new().unwrap();
        let (_, _, las) = build(&dir, "l", 40);
        let records: Vec<_> = (1..=40).map(record).collect();
        for n in 1..=40 {
            assert_eq!(las[n - 1], oracle_la(&records[..n]), "prefix {n}");
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = TempDir::new().unwrap();
        let (store, list, las) = build(&dir, "l", 12);
        let la = las[11];
        let good = list.prove(&store, 3).unwrap();

        let mut p = good.clone();
        p.chain[0].links[0].0[5] ^= 1;
        assert!(matches!(verify_list_proof(HashAlg::Sha256, &p, &la), Err(ListError::ProofMismatch)));

        let mut p = good.clone();
        p.record.timestamp += 1;
        assert!(verify_list_proof(HashAlg::Sha256, &p, &la).is_err());

        let mut p = good.clone();
        p.links[0].0[0] ^= 0x80;
        assert!(verify_list_proof(HashAlg::Sha256, &p, &la).is_err());
    }

    #[test]
    fn proof_against_truncated_list_fails() {
        let dir = TempDir::new().unwrap();
        let (store, list, las) = build(&dir, "l", 3);
        let p = list.prove(&store, 3).unwrap();
        assert!(verify_list_proof(HashAlg::Sha256, &p, &las[1]).is_err());
        assert!(verify_list_proof(HashAlg::Sha256, &p, &las[2]).is_ok());
    }

    #[test]
    fn unknown_snapshot() {
        let dir = TempDir::new().unwrap();
        let (store, list, _) = build(&dir, "l", 3);
        assert!(matches!(list.prove(&store, 4), Err(ListError::UnknownSnapshot(4))));
        assert!(matches!(list.prove(&store, 0), Err(ListError::UnknownSnapshot(0))));
    }
}
