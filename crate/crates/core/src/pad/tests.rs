use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use tempfile::TempDir;

use super::*;

fn sha(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Root authenticator of the unique treap over `entries`, computed straight
/// from the definition: the highest-priority key is the root, the rest
/// split by key order.
fn oracle_pra(entries: &[(Vec<u8>, Vec<u8>, u64)]) -> [u8; 32] {
    if entries.is_empty() {
        return [0; 32];
    }
    let top = (0..entries.len()).max_by_key(|&i| (sha(&entries[i].0), entries[i].0.clone())).unwrap();
    let (k, v, vs) = &entries[top];
    let mut h = Sha256::new();
    h.update(b"N");
    h.update(sha(k));
    h.update(sha(v));
    h.update(vs.to_le_bytes());
    h.update(oracle_pra(&entries[..top]));
    h.update(oracle_pra(&entries[top + 1..]));
    h.finalize().into()
}

fn oracle_depth(entries: &[(Vec<u8>, Vec<u8>, u64)], key: &[u8]) -> usize {
    let top = (0..entries.len()).max_by_key(|&i| (sha(&entries[i].0), entries[i].0.clone())).unwrap();
    match key.cmp(&entries[top].0) {
        Ordering::Equal => 0,
        Ordering::Less => 1 + oracle_depth(&entries[..top], key),
        Ordering::Greater => 1 + oracle_depth(&entries[top + 1..], key),
    }
}

fn pad(dir: &TempDir, name: &str, skip_no: u32) -> TreapPad {
    TreapPad::create(dir.path().join(name), PadConfig { skip_no, ..PadConfig::default() }).unwrap()
}

fn key(i: u32) -> Vec<u8> {
    format!("urn:obj/{i:06}").into_bytes()
}

fn value(i: u32) -> Vec<u8> {
    format!("sha-256:{}", hex::encode(sha(&key(i)))).into_bytes()
}

fn root_key(p: &TreapPad, s: u64) -> Option<Vec<u8>> {
    p.root_at(s).unwrap().map(|id| p.load_node(id).unwrap().key)
}

#[test]
fn should_cache_schedule() {
    assert!(should_cache(0, 1, 3));
    assert!(should_cache(3, 1, 3));
    assert!(should_cache(6, 1, 3));
    assert!(!should_cache(1, 1, 3));
    assert!(should_cache(1, 2, 3));
    assert!(should_cache(4, 2, 3));
    assert!(!should_cache(0, 2, 3));
    for d in 0..10 {
        assert!(should_cache(d, 17, 0));
    }
}

#[test]
fn first_insert_is_root() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"only", b"v").unwrap();
    assert_eq!(root_key(&p, 1), Some(b"only".to_vec()));
}

#[test]
fn root_has_highest_priority() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    for k in ["a", "b", "c"] {
        p.insert(k.as_bytes(), b"v").unwrap();
    }
    let top = ["a", "b", "c"].into_iter().max_by_key(|k| sha(k.as_bytes())).unwrap();
    assert_eq!(root_key(&p, 1), Some(top.as_bytes().to_vec()));
}

#[test]
fn duplicate_insert_fails() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"k", b"v").unwrap();
    assert!(matches!(p.insert(b"k", b"w"), Err(PadError::KeyExists)));
    p.snapshot(0).unwrap();
    assert!(matches!(p.insert(b"k", b"w"), Err(PadError::KeyExists)));
}

#[test]
fn amend_concatenates() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"doc", b"md5:X").unwrap();
    p.snapshot(0).unwrap();
    p.amend(b"doc", b"/sha-1:Y").unwrap();
    p.snapshot(0).unwrap();
    assert_eq!(p.get(b"doc", 2).unwrap(), Some((b"md5:X/sha-1:Y".to_vec(), 2)));
    assert_eq!(p.get(b"doc", 1).unwrap(), Some((b"md5:X".to_vec(), 1)));
}

#[test]
fn empty_amend_records_a_version() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"doc", b"v").unwrap();
    p.snapshot(0).unwrap();
    p.amend(b"doc", b"").unwrap();
    p.snapshot(0).unwrap();
    assert_eq!(p.get(b"doc", 2).unwrap(), Some((b"v".to_vec(), 2)));
}

#[test]
fn amend_missing_key() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    assert!(matches!(p.amend(b"nope", b"x"), Err(PadError::KeyNotFound)));
    p.insert(b"a", b"x").unwrap();
    assert!(matches!(p.amend(b"nope", b"x"), Err(PadError::KeyNotFound)));
}

#[test]
fn oversized_key_and_value() {
    let dir = TempDir::new().unwrap();
    let mut p = TreapPad::create(dir.path().join("p"), PadConfig { page_size: 4096, ..PadConfig::default() }).unwrap();
    assert!(matches!(p.insert(&[1; 5000], b""), Err(PadError::KeyTooLarge { .. })));
    assert!(matches!(p.insert(b"k", &[1; 5000]), Err(PadError::ValueTooLarge { .. })));
    let max = p.max_value_len(1);
    p.insert(b"k", &vec![2; max]).unwrap();
    assert!(matches!(p.amend(b"k", b"x"), Err(PadError::ValueTooLarge { .. })));
    p.snapshot(0).unwrap();
    assert_eq!(p.get(b"k", 1).unwrap().unwrap().0.len(), max);
}

#[test]
fn empty_snapshot_has_nil_root() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    let v = p.snapshot(0).unwrap();
    assert_eq!((v.snapshot_id, v.root, v.pra), (1, None, Digest::NIL));
}

#[test]
fn single_node_pra_by_hand() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"k", b"v").unwrap();
    let v = p.snapshot(0).unwrap();
    let mut h = Sha256::new();
    h.update(b"N");
    h.update(sha(b"k"));
    h.update(sha(b"v"));
    h.update(1u64.to_le_bytes());
    h.update([0u8; 64]);
    assert_eq!(v.pra.0, <[u8; 32]>::from(h.finalize()));
}

#[test]
fn get_at_snapshot_zero_and_before_insert() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.snapshot(0).unwrap();
    p.snapshot(0).unwrap();
    p.insert(b"k", b"v").unwrap();
    p.snapshot(0).unwrap();
    assert_eq!(p.get(b"k", 0).unwrap(), None);
    assert_eq!(p.get(b"k", 2).unwrap(), None);
    assert_eq!(p.get(b"k", 3).unwrap(), Some((b"v".to_vec(), 3)));
    assert!(matches!(p.get(b"k", 9), Err(PadError::UnknownSnapshot(9))));
}

#[test]
fn scripted_history() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    for s in 1..=10u64 {
        match s {
            3 => p.insert(b"k", b"orig").unwrap(),
            7 => p.amend(b"k", b"+more").unwrap(),
            _ => p.insert(format!("filler{s}").as_bytes(), b"f").unwrap(),
        }
        p.snapshot(s).unwrap();
    }
    assert_eq!(p.get(b"k", 5).unwrap(), Some((b"orig".to_vec(), 3)));
    assert_eq!(p.get(b"k", 9).unwrap(), Some((b"orig+more".to_vec(), 7)));
}

/// Replay oracle: random inserts and amends over many epochs, checked
/// against a plain map of per-key histories at every sealed snapshot.
fn replay(skip_no: u32, page_size: usize, seed: u64, epochs: u64) {
    let dir = TempDir::new().unwrap();
    let mut p = TreapPad::create(dir.path().join("p"), PadConfig { skip_no, page_size, ..PadConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: BTreeMap<Vec<u8>, Vec<(u64, Vec<u8>)>> = BTreeMap::new();
    let mut pras = Vec::new();
    for s in 1..=epochs {
        for _ in 0..rng.random_range(0..12) {
            let k = key(rng.random_range(0..60));
            match model.get_mut(&k) {
                Some(h) if rng.random_bool(0.7) => {
                    let suffix = format!("/{s}").into_bytes();
                    p.amend(&k, &suffix).unwrap();
                    let mut v = h.last().unwrap().1.clone();
                    v.extend_from_slice(&suffix);
                    if h.last().unwrap().0 == s {
                        h.last_mut().unwrap().1 = v;
                    } else {
                        h.push((s, v));
                    }
                }
                Some(_) => assert!(matches!(p.insert(&k, b"x"), Err(PadError::KeyExists))),
                None => {
                    p.insert(&k, &k).unwrap();
                    model.insert(k.clone(), vec![(s, k.clone())]);
                }
            }
        }
        let v = p.snapshot(s).unwrap();
        let entries: Vec<_> = model
            .iter()
            .map(|(k, h)| {
                let (vs, val) = h.last().unwrap();
                (k.clone(), val.clone(), *vs)
            })
            .collect();
        assert_eq!(v.pra.0, oracle_pra(&entries), "snapshot {s}");
        pras.push(v.pra);
    }
    for s in 0..=epochs {
        for i in 0..60 {
            let k = key(i);
            let want = model.get(&k).and_then(|h| h.iter().rev().find(|(e, _)| *e <= s)).map(|(e, v)| (v.clone(), *e));
            assert_eq!(p.get(&k, s).unwrap(), want, "key {i} at {s}");
        }
        if s > 0 {
            assert_eq!(p.snapshot_view(s).unwrap().pra, pras[s as usize - 1]);
            assert_eq!(p.recompute_pra(s).unwrap(), pras[s as usize - 1]);
        }
    }
    check_cached_auths(&p);
}

/// Every cached authenticator equals a from-scratch recomputation.
fn check_cached_auths(p: &TreapPad) {
    for s in 1..=p.latest_sealed() {
        p.for_each_at(s, |_, node, state| {
            if let Some(d) = node.cached_auth(state.changed_at) {
                assert_eq!(d, p.auth_of(node, s, false).unwrap());
            }
        })
        .unwrap();
    }
}

#[test]
fn replay_matches_model() {
    replay(0, 16384, 1, 30);
    replay(3, 16384, 2, 30);
}

#[test]
fn replay_with_node_copies() {
    // Small pages and many epochs force fat nodes past the page bound.
    replay(0, 4096, 3, 160);
}

#[test]
fn node_copy_preserves_history() {
    let dir = TempDir::new().unwrap();
    let mut p = TreapPad::create(dir.path().join("p"), PadConfig { page_size: 4096, ..PadConfig::default() }).unwrap();
    p.insert(b"root", b"0").unwrap();
    let mut expect = vec![b"0".to_vec()];
    p.snapshot(0).unwrap();
    // Each epoch adds a version entry and a cached authenticator.
    for s in 2..=200u64 {
        p.amend(b"root", b".").unwrap();
        let mut v = expect.last().unwrap().clone();
        v.push(b'.');
        expect.push(v);
        p.snapshot(s).unwrap();
    }
    let root = p.root_at(200).unwrap().unwrap();
    assert_ne!(root, p.root_at(1).unwrap().unwrap(), "root should have been copied");
    for s in 1..=200u64 {
        assert_eq!(p.get(b"root", s).unwrap(), Some((expect[s as usize - 1].clone(), s)));
        let proof = p.prove(b"root", s).unwrap();
        verify_proof(p.hash_alg(), &proof, &p.snapshot_view(s).unwrap().pra).unwrap();
    }
    for b in 0..p.store().block_count() {
        crate::store::page::validate(&p.store().read_block(b).unwrap().payload, u64::MAX).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn insertion_order_is_irrelevant(n in 1usize..80, seed in any::<u64>()) {
        let dir = TempDir::new().unwrap();
        let mut keys: Vec<u32> = (0..n as u32).collect();
        let mut a = pad(&dir, "a", 0);
        for &k in &keys { a.insert(&key(k), &value(k)).unwrap(); }
        keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut b = pad(&dir, "b", 2);
        for &k in &keys { b.insert(&key(k), &value(k)).unwrap(); }
        let (va, vb) = (a.snapshot(0).unwrap(), b.snapshot(0).unwrap());
        prop_assert_eq!(va.pra, vb.pra);
        let mut shape_a = Vec::new();
        a.for_each_at(1, |d, n, _| shape_a.push((d, n.key.clone()))).unwrap();
        let mut shape_b = Vec::new();
        b.for_each_at(1, |d, n, _| shape_b.push((d, n.key.clone()))).unwrap();
        prop_assert_eq!(shape_a, shape_b);
    }
}

#[test]
fn single_node_proof() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"k", b"v").unwrap();
    let v = p.snapshot(0).unwrap();
    let proof = p.prove(b"k", 1).unwrap();
    assert_eq!(proof.path_len(), 1);
    assert_eq!((proof.left, proof.right), (Digest::NIL, Digest::NIL));
    let got = verify_proof(p.hash_alg(), &proof, &v.pra).unwrap();
    assert_eq!((got.value, got.value_snapshot_id), (b"v".to_vec(), 1));
    assert_eq!(got.key_digest, p.hash_alg().hash(b"k"));
}

fn build_1000(dir: &TempDir, name: &str, skip_no: u32) -> TreapPad {
    let mut p = pad(dir, name, skip_no);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut order: Vec<u32> = (0..1000).collect();
    order.shuffle(&mut rng);
    for (round, chunk) in order.chunks(100).enumerate() {
        for &i in chunk {
            p.insert(&key(i), &value(i)).unwrap();
        }
        p.snapshot(round as u64).unwrap();
    }
    p
}

#[test]
fn thousand_key_proofs() {
    let dir = TempDir::new().unwrap();
    let p = build_1000(&dir, "p", 0);
    let entries: Vec<_> = {
        let mut m = BTreeMap::new();
        for s in 1..=10u64 {
            p.for_each_at(s, |_, n, st| {
                m.entry(n.key.clone()).or_insert((st.value.to_vec(), st.value_snapshot));
            })
            .unwrap();
        }
        m.into_iter().map(|(k, (v, s))| (k, v, s)).collect()
    };
    assert_eq!(entries.len(), 1000);
    let pra = p.snapshot_view(10).unwrap().pra;
    assert_eq!(pra.0, oracle_pra(&entries));
    for i in (0..1000).step_by(37) {
        let proof = p.prove(&key(i), 10).unwrap();
        assert_eq!(proof.path_len(), oracle_depth(&entries, &key(i)) + 1);
        let got = verify_proof(p.hash_alg(), &proof, &pra).unwrap();
        assert_eq!(got.value, value(i));
    }
}

#[test]
fn skip_number_does_not_change_answers() {
    let dir = TempDir::new().unwrap();
    let p0 = build_1000(&dir, "p0", 0);
    let p4 = build_1000(&dir, "p4", 4);
    for s in 1..=10u64 {
        assert_eq!(p0.snapshot_view(s).unwrap().pra, p4.snapshot_view(s).unwrap().pra);
        for i in (0..1000).step_by(53) {
            assert_eq!(p0.get(&key(i), s).unwrap(), p4.get(&key(i), s).unwrap());
            match (p0.lookup_proof(&key(i), s).unwrap(), p4.lookup_proof(&key(i), s).unwrap()) {
                (LookupProof::Present(a), LookupProof::Present(b)) => assert_eq!(a.to_bytes(), b.to_bytes()),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
    assert!(p4.store().file_size() <= p0.store().file_size());
    check_cached_auths(&p4);
}

#[test]
fn tampered_proofs_fail() {
    let dir = TempDir::new().unwrap();
    let p = build_1000(&dir, "p", 2);
    let pra = p.snapshot_view(10).unwrap().pra;
    let good = p.prove(&key(5), 10).unwrap();
    for i in 0..good.target_value.len() {
        let mut bad = good.clone();
        bad.target_value[i] ^= 1;
        assert!(matches!(verify_proof(p.hash_alg(), &bad, &pra), Err(PadError::ProofMismatch)));
    }
    let mut bad = good.clone();
    bad.value_snapshot_id += 1;
    assert!(verify_proof(p.hash_alg(), &bad, &pra).is_err());
    let mut bad = good.clone();
    bad.ancestors[0].sibling.0[31] ^= 1;
    assert!(verify_proof(p.hash_alg(), &bad, &pra).is_err());
}

#[test]
fn proof_against_other_snapshot_fails() {
    let dir = TempDir::new().unwrap();
    let p = build_1000(&dir, "p", 0);
    let k = (0..1000).map(key).find(|k| p.get(k, 3).unwrap().is_some()).unwrap();
    let proof = p.prove(&k, 3).unwrap();
    verify_proof(p.hash_alg(), &proof, &p.snapshot_view(3).unwrap().pra).unwrap();
    assert!(verify_proof(p.hash_alg(), &proof, &p.snapshot_view(4).unwrap().pra).is_err());
}

#[test]
fn absence_proofs() {
    let dir = TempDir::new().unwrap();
    let p = build_1000(&dir, "p", 3);
    let alg = p.hash_alg();
    let pra = p.snapshot_view(10).unwrap().pra;
    let missing = b"urn:obj/000500x".to_vec();
    let LookupProof::Absent(proof) = p.lookup_proof(&missing, 10).unwrap() else { panic!() };
    verify_absence(alg, &proof, &missing, &pra).unwrap();
    // The same path cannot vouch for a present neighbour.
    assert!(verify_absence(alg, &proof, &key(500), &pra).is_err());
    assert!(verify_absence(alg, &proof, &missing, &p.snapshot_view(9).unwrap().pra).is_err());
    // A key present at 10 but absent at 1.
    let late = (0..1000).map(key).find(|k| p.get(k, 1).unwrap().is_none()).unwrap();
    let LookupProof::Absent(proof) = p.lookup_proof(&late, 1).unwrap() else { panic!() };
    verify_absence(alg, &proof, &late, &p.snapshot_view(1).unwrap().pra).unwrap();
    assert!(matches!(p.prove(&late, 1), Err(PadError::KeyNotFound)));
    // Empty tree.
    let mut e = pad(&dir, "e", 0);
    e.snapshot(0).unwrap();
    let LookupProof::Absent(proof) = e.lookup_proof(b"x", 1).unwrap() else { panic!() };
    verify_absence(alg, &proof, b"x", &Digest::NIL).unwrap();
}

#[test]
fn enumeration_follows_epoch_stamps() {
    let dir = TempDir::new().unwrap();
    let p = build_1000(&dir, "p", 0);
    let mut seen = HashSet::new();
    for s in 1..=10u64 {
        let mut blocks = Vec::new();
        let mut next = p.first_block_of_snapshot(s).unwrap();
        while let Some(img) = next {
            assert_eq!(img.epoch_stamp, s);
            assert!(seen.insert(img.block_no));
            blocks.push(img.block_no);
            next = p.next_block_of_snapshot(s, img.block_no).unwrap();
        }
        assert_eq!(blocks, p.store().durable_blocks_of_epoch(s));
    }
    assert_eq!(seen.len() as u64, p.store().block_count());
    assert!(matches!(p.first_block_of_snapshot(11), Err(PadError::UnknownSnapshot(11))));
    assert!(matches!(p.first_block_of_snapshot(0), Err(PadError::UnknownSnapshot(0))));
}

fn replicate(from: &TreapPad, to: &mut TreapPad, s: u64, skip_block: Option<usize>) -> Vec<BlockImage> {
    to.binary_update_begin(s).unwrap();
    let mut imgs = Vec::new();
    let mut next = from.first_block_of_snapshot(s).unwrap();
    while let Some(img) = next {
        next = from.next_block_of_snapshot(s, img.block_no).unwrap();
        imgs.push(img);
    }
    for (i, img) in imgs.iter().enumerate() {
        if Some(i) != skip_block {
            to.binary_update_block(s, img).unwrap();
        }
    }
    imgs
}

use crate::store::BlockImage;

#[test]
fn replicate_into_empty_pad() {
    let dir = TempDir::new().unwrap();
    let mut origin = pad(&dir, "o", 2);
    let mut replica = TreapPad::create_replica(dir.path().join("r"), DEFAULT_PAGE_SIZE).unwrap();
    for s in 1..=5u64 {
        for i in 0..50 {
            origin.insert(&key(s as u32 * 100 + i), &value(i)).unwrap();
        }
        if s > 1 {
            origin.amend(&key(100), format!("/{s}").as_bytes()).unwrap();
        }
        origin.snapshot(s).unwrap();
        replicate(&origin, &mut replica, s, None);
        replica.binary_update_commit(s, Some(origin.list_authenticator().unwrap())).unwrap();
    }
    for s in 1..=5u64 {
        assert_eq!(replica.snapshot_view(s).unwrap(), origin.snapshot_view(s).unwrap());
        assert_eq!(replica.get(&key(100), s).unwrap(), origin.get(&key(100), s).unwrap());
    }
    assert_eq!(replica.skip_no(), 2);
    for b in 0..origin.store().block_count() {
        assert_eq!(replica.store().read_block(b).unwrap(), origin.store().read_block(b).unwrap());
    }
    // Survives a reopen.
    drop(replica);
    let replica = TreapPad::open(dir.path().join("r")).unwrap();
    assert_eq!(replica.latest_sealed(), 5);
    assert_eq!(replica.list_authenticator().unwrap(), origin.list_authenticator().unwrap());
}

#[test]
fn staged_catch_up_then_single_commit() {
    let dir = TempDir::new().unwrap();
    let mut origin = pad(&dir, "o", 0);
    for s in 1..=6u64 {
        for i in 0..30 {
            origin.insert(&key(s as u32 * 100 + i), b"v").unwrap();
        }
        origin.snapshot(s).unwrap();
    }
    let mut replica = TreapPad::create_replica(dir.path().join("r"), DEFAULT_PAGE_SIZE).unwrap();
    for s in 1..=6u64 {
        replicate(&origin, &mut replica, s, None);
        if s < 6 {
            replica.binary_update_stage(s).unwrap();
        } else {
            replica.binary_update_commit(s, Some(origin.list_authenticator().unwrap())).unwrap();
        }
    }
    assert_eq!(replica.snapshot_view(6).unwrap(), origin.snapshot_view(6).unwrap());
    assert_eq!(replica.recompute_pra(3).unwrap(), origin.snapshot_view(3).unwrap().pra);
}

#[test]
fn snapshot_gap_and_session_errors() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    for s in 1..=3 {
        p.snapshot(s).unwrap();
    }
    assert!(matches!(p.binary_update_begin(7), Err(PadError::SnapshotGap { expected: 4, got: 7 })));
    assert!(matches!(p.binary_update_commit(4, None), Err(PadError::NotInUpdateSession)));
    p.insert(b"k", b"v").unwrap();
    assert!(matches!(p.binary_update_begin(4), Err(PadError::PendingWrites)));
}

#[test]
fn commit_with_missing_block_rolls_back() {
    let dir = TempDir::new().unwrap();
    let mut origin = pad(&dir, "o", 0);
    let mut replica = TreapPad::create_replica(dir.path().join("r"), DEFAULT_PAGE_SIZE).unwrap();
    for i in 0..300 {
        origin.insert(&key(i), &value(i)).unwrap();
    }
    origin.snapshot(1).unwrap();
    replicate(&origin, &mut replica, 1, None);
    replica.binary_update_commit(1, None).unwrap();
    for i in 300..2000 {
        origin.insert(&key(i), &value(i)).unwrap();
    }
    origin.snapshot(2).unwrap();
    // The highest block of the stream holds nodes created in snapshot 2.
    let n = origin.store().durable_blocks_of_epoch(2).len();
    let imgs = replicate(&origin, &mut replica, 2, Some(n - 1));
    assert!(imgs.len() > 2);
    let err = replica.binary_update_commit(2, None).unwrap_err();
    assert!(err.is_integrity(), "{err}");
    assert_eq!(replica.latest_sealed(), 1);
    assert_eq!(replica.snapshot_view(1).unwrap(), origin.snapshot_view(1).unwrap());
    assert_eq!(replica.get(&key(500), 2).unwrap(), None);
    // A clean retry succeeds.
    replicate(&origin, &mut replica, 2, None);
    replica.binary_update_commit(2, Some(origin.list_authenticator().unwrap())).unwrap();
    assert_eq!(replica.snapshot_view(2).unwrap(), origin.snapshot_view(2).unwrap());
}

#[test]
fn unsealed_changes_are_not_served() {
    let dir = TempDir::new().unwrap();
    let mut p = pad(&dir, "p", 0);
    p.insert(b"a", b"1").unwrap();
    p.snapshot(1).unwrap();
    let before: Vec<_> = p.store().durable_blocks_of_epoch(1);
    p.insert(b"b", b"2").unwrap();
    assert_eq!(p.store().durable_blocks_of_epoch(1), before);
    let img = p.first_block_of_snapshot(1).unwrap().unwrap();
    assert_eq!(img, p.store().read_durable_block(before[0]).unwrap());
    assert_eq!(p.get(b"b", 2).unwrap(), Some((b"2".to_vec(), 2)));
}

#[test]
fn reopen_keeps_state() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("p");
    let la = {
        let mut p = TreapPad::create(&path, PadConfig { skip_no: 3, ..PadConfig::default() }).unwrap();
        p.insert(b"a", b"1").unwrap();
        p.snapshot(5).unwrap();
        p.insert(b"b", b"2").unwrap();
        p.list_authenticator().unwrap()
        // Unsealed "b" is dropped with the pad.
    };
    let mut p = TreapPad::open(&path).unwrap();
    assert_eq!((p.latest_sealed(), p.open_epoch(), p.skip_no()), (1, 2, 3));
    assert_eq!(p.list_authenticator().unwrap(), la);
    assert_eq!(p.get(b"b", 2).unwrap(), None);
    assert_eq!(p.snapshot_record(1).unwrap().timestamp, 5);
    p.insert(b"b", b"2").unwrap();
    p.snapshot(6).unwrap();
    assert_eq!(p.get(b"a", 2).unwrap(), Some((b"1".to_vec(), 1)));
}

#[test]
fn page_damage_never_yields_wrong_data() {
    use std::os::unix::fs::FileExt;
    let dir = TempDir::new().unwrap();
    let p = build_1000(&dir, "p", 2);
    let path = dir.path().join("p");
    let page_size = p.store().page_size() as u64;
    let blocks = p.store().block_count();
    let la = p.list_authenticator().unwrap();
    drop(p);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let file = std::fs::OpenOptions::new().read(true).write(true).open(&path).unwrap();
    for _ in 0..40 {
        let at = crate::store::HEADER_LEN as u64 + rng.random_range(0..blocks) * page_size + rng.random_range(0..page_size);
        let mut b = [0u8];
        file.read_exact_at(&mut b, at).unwrap();
        file.write_all_at(&[b[0] ^ (1 << rng.random_range(0..8))], at).unwrap();
        let verdicts = (0..1000).step_by(97).map(|i| checked_get(&path, &la, &key(i)));
        for (n, v) in verdicts.enumerate() {
            let i = n as u32 * 97;
            if let Some(v) = v {
                assert_eq!(v, Some(value(i)), "wrong value accepted for key {i}");
            }
        }
        file.write_all_at(&b, at).unwrap();
    }
}

/// Verified lookup straight from the file; `None` means a check failed.
fn checked_get(path: &std::path::Path, la: &Digest, k: &[u8]) -> Option<Option<Vec<u8>>> {
    let p = TreapPad::open(path).ok()?;
    let alg = p.hash_alg();
    let s = p.latest_sealed();
    let lp = p.list_proof(s).ok()?;
    if lp.head_index() != s {
        return None;
    }
    let record = crate::aasl::verify_list_proof(alg, &lp, la).ok()?;
    match p.lookup_proof(k, s).ok()? {
        LookupProof::Present(m) => {
            let e = verify_proof(alg, &m, &record.pra).ok()?;
            (e.key_digest == alg.hash(k)).then_some(Some(e.value))
        }
        LookupProof::Absent(a) => verify_absence(alg, &a, k, &record.pra).ok().map(|()| None),
    }
}
