//! Fixtures shared by the benchmarks.

use icat_core::digest::HashAlg;
use icat_core::pad::{PadConfig, TreapPad};

pub fn key(i: u64) -> Vec<u8> {
    format!("https://bench.invalid/doc/{i:010}").into_bytes()
}

pub fn value(alg: HashAlg, key: &[u8]) -> Vec<u8> {
    format!("{}:{}", alg.name(), alg.hash(key).to_hex()).into_bytes()
}

/// A pad in a fresh temporary directory, with `snapshots` sealed rounds of
/// `per_snapshot` keys each.
pub fn sealed_pad(per_snapshot: u64, snapshots: u64, skip_no: u32) -> (tempfile::TempDir, TreapPad) {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut pad = TreapPad::create(dir.path().join("bench.icat"), PadConfig { skip_no, ..PadConfig::default() })
        .expect("create pad");
    let alg = pad.hash_alg();
    for s in 0..snapshots {
        for i in s * per_snapshot..(s + 1) * per_snapshot {
            let k = key(i);
            pad.insert(&k, &value(alg, &k)).expect("insert");
        }
        pad.snapshot(s).expect("seal");
    }
    (dir, pad)
}
