//! Membership and absence proofs over one sealed snapshot.
//!
//! Verification is a pure fold over the proof contents; it never reads the
//! store.

use std::cmp::Ordering;

use super::{node_authenticator_from_digests, PadError, Result, TreapPad};
use crate::digest::{Digest, HashAlg};
use crate::store::RecordId;

/// Which child of an ancestor the path to the target passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn octet(self) -> u8 {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathStep {
    pub key_digest: Digest,
    pub value_digest: Digest,
    pub value_snapshot: u64,
    pub side: Side,
    pub sibling: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipProof {
    pub snapshot_id: u64,
    pub key_digest: Digest,
    pub target_value: Vec<u8>,
    pub value_snapshot_id: u64,
    pub left: Digest,
    pub right: Digest,
    /// Ancestors ordered from the target's parent up to the root.
    pub ancestors: Vec<PathStep>,
}

impl MembershipProof {
    /// Number of nodes on the path, target included.
    pub fn path_len(&self) -> usize {
        1 + self.ancestors.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + self.target_value.len() + self.ancestors.len() * 105);
        out.extend_from_slice(&self.snapshot_id.to_le_bytes());
        out.extend_from_slice(self.key_digest.as_bytes());
        out.extend_from_slice(&(self.target_value.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.target_value);
        out.extend_from_slice(&self.value_snapshot_id.to_le_bytes());
        out.extend_from_slice(self.left.as_bytes());
        out.extend_from_slice(self.right.as_bytes());
        out.extend_from_slice(&(self.ancestors.len() as u16).to_le_bytes());
        for s in &self.ancestors {
            out.extend_from_slice(s.key_digest.as_bytes());
            out.extend_from_slice(s.value_digest.as_bytes());
            out.extend_from_slice(&s.value_snapshot.to_le_bytes());
            out.push(s.side.octet());
            out.extend_from_slice(s.sibling.as_bytes());
        }
        out
    }
}

/// One node on the search path of an absent key, root first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbsenceStep {
    pub key: Vec<u8>,
    pub value_digest: Digest,
    pub value_snapshot: u64,
    pub side: Side,
    pub sibling: Digest,
}

/// Shows a key is absent: the search path ends at an empty child, and the
/// path folds to the snapshot's root authenticator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbsenceProof {
    pub snapshot_id: u64,
    pub path: Vec<AbsenceStep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupProof {
    Present(MembershipProof),
    Absent(AbsenceProof),
}

/// Contents authenticated by a membership proof.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenEntry {
    pub key_digest: Digest,
    pub value: Vec<u8>,
    pub value_snapshot_id: u64,
}

fn fold_step(alg: HashAlg, acc: &Digest, kd: &Digest, vd: &Digest, vs: u64, side: Side, sibling: &Digest) -> Digest {
    match side {
        Side::Left => node_authenticator_from_digests(alg, kd, vd, vs, acc, sibling),
        Side::Right => node_authenticator_from_digests(alg, kd, vd, vs, sibling, acc),
    }
}

pub fn verify_proof(alg: HashAlg, proof: &MembershipProof, expected_pra: &Digest) -> Result<ProvenEntry> {
    let mut acc = node_authenticator_from_digests(
        alg,
        &proof.key_digest,
        &alg.hash(&proof.target_value),
        proof.value_snapshot_id,
        &proof.left,
        &proof.right,
    );
    for s in &proof.ancestors {
        acc = fold_step(alg, &acc, &s.key_digest, &s.value_digest, s.value_snapshot, s.side, &s.sibling);
    }
    if acc != *expected_pra || proof.value_snapshot_id > proof.snapshot_id {
        return Err(PadError::ProofMismatch);
    }
    Ok(ProvenEntry {
        key_digest: proof.key_digest,
        value: proof.target_value.clone(),
        value_snapshot_id: proof.value_snapshot_id,
    })
}

/// Checks that `key` is absent from the tree whose root authenticator is
/// `expected_pra`. Besides the fold, every step must send `key` the way the
/// search order demands.
pub fn verify_absence(alg: HashAlg, proof: &AbsenceProof, key: &[u8], expected_pra: &Digest) -> Result<()> {
    for s in &proof.path {
        let want = match key.cmp(&s.key) {
            Ordering::Less => Side::Left,
            Ordering::Greater => Side::Right,
            Ordering::Equal => return Err(PadError::ProofMismatch),
        };
        if s.side != want {
            return Err(PadError::ProofMismatch);
        }
    }
    let mut acc = Digest::NIL;
    for s in proof.path.iter().rev() {
        acc = fold_step(alg, &acc, &alg.hash(&s.key), &s.value_digest, s.value_snapshot, s.side, &s.sibling);
    }
    if acc == *expected_pra {
        Ok(())
    } else {
        Err(PadError::ProofMismatch)
    }
}

impl TreapPad {
    /// Proof that `key` is present or absent at sealed snapshot `snapshot_id`.
    pub fn lookup_proof(&self, key: &[u8], snapshot_id: u64) -> Result<LookupProof> {
        if snapshot_id == 0 || snapshot_id > self.latest_sealed() {
            return Err(PadError::UnknownSnapshot(snapshot_id));
        }
        let alg = self.hash_alg();
        let mut at: Option<RecordId> = self.root_at(snapshot_id)?;
        let mut path: Vec<AbsenceStep> = Vec::new();
        while let Some(id) = at {
            let node = self.load_node(id)?;
            let state = node.state_at(snapshot_id).ok_or_else(|| TreapPad::dangling(id, snapshot_id))?;
            let (side, next, other) = match key.cmp(&node.key) {
                Ordering::Equal => {
                    let ancestors = path
                        .into_iter()
                        .rev()
                        .map(|s| PathStep {
                            key_digest: alg.hash(&s.key),
                            value_digest: s.value_digest,
                            value_snapshot: s.value_snapshot,
                            side: s.side,
                            sibling: s.sibling,
                        })
                        .collect();
                    return Ok(LookupProof::Present(MembershipProof {
                        snapshot_id,
                        key_digest: alg.hash(&node.key),
                        target_value: state.value.to_vec(),
                        value_snapshot_id: state.value_snapshot,
                        left: self.auth_of_id(state.left, snapshot_id, true)?,
                        right: self.auth_of_id(state.right, snapshot_id, true)?,
                        ancestors,
                    }));
                }
                Ordering::Less => (Side::Left, state.left, state.right),
                Ordering::Greater => (Side::Right, state.right, state.left),
            };
            path.push(AbsenceStep {
                key: node.key.clone(),
                value_digest: alg.hash(state.value),
                value_snapshot: state.value_snapshot,
                side,
                sibling: self.auth_of_id(other, snapshot_id, true)?,
            });
            at = next;
        }
        Ok(LookupProof::Absent(AbsenceProof { snapshot_id, path }))
    }

    /// Membership proof for `key` at sealed snapshot `snapshot_id`.
    pub fn prove(&self, key: &[u8], snapshot_id: u64) -> Result<MembershipProof> {
        match self.lookup_proof(key, snapshot_id)? {
            LookupProof::Present(p) => Ok(p),
            LookupProof::Absent(_) => Err(PadError::KeyNotFound),
        }
    }
}
