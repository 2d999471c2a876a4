//! Throughput harness: insert a batch, seal, then run verified searches
//! spread over every sealed snapshot. One [`BenchRow`] per snapshot.
//!
//! CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `snapshot_id` | snapshot sealed in this round |
//! | `inserts` | keys inserted before the seal |
//! | `avg_insert_us` | mean wall time per insert, µs |
//! | `avg_snapshot_us_per_elem` | seal time divided by `inserts`, µs |
//! | `searches` | verified searches run after the seal |
//! | `avg_search_us` | mean time to build and check one proof, µs |
//! | `file_size_bytes` | catalog file size after the seal |

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use icat_core::digest::{Digest, HashAlg};
use icat_core::pad::{verify_proof, LookupProof, PadConfig, PadError, TreapPad};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub keys_per_snapshot: usize,
    pub snapshot_count: u64,
    pub searches_per_snapshot: usize,
    pub skip_no: u32,
    pub page_size: usize,
    pub hash: HashAlg,
    /// Newline-delimited identifiers; synthetic ones when absent.
    pub input: Option<PathBuf>,
    pub seed: u64,
    /// Catalog file the run writes; replaced if it exists.
    pub catalog: PathBuf,
}

impl BenchConfig {
    pub fn new(catalog: impl Into<PathBuf>) -> BenchConfig {
        BenchConfig {
            keys_per_snapshot: 50_000,
            snapshot_count: 10,
            searches_per_snapshot: 10_000,
            skip_no: 0,
            page_size: icat_core::store::DEFAULT_PAGE_SIZE,
            hash: HashAlg::Sha256,
            input: None,
            seed: 1,
            catalog: catalog.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub snapshot_id: u64,
    pub inserts: u64,
    pub avg_insert_us: f64,
    pub avg_snapshot_us_per_elem: f64,
    pub searches: u64,
    pub avg_search_us: f64,
    pub file_size_bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pad(#[from] PadError),
    #[error("verified search for key {key:?} at snapshot {snapshot} failed: {reason}")]
    Search { key: String, snapshot: u64, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

enum Source {
    File(Box<std::io::Lines<BufReader<std::fs::File>>>),
    Synthetic(ChaCha8Rng),
}

impl Source {
    fn open(cfg: &BenchConfig) -> std::io::Result<Source> {
        Ok(match &cfg.input {
            Some(p) => Source::File(Box::new(BufReader::new(std::fs::File::open(p)?).lines())),
            None => Source::Synthetic(ChaCha8Rng::seed_from_u64(cfg.seed)),
        })
    }

    fn next_id(&mut self) -> std::io::Result<Option<String>> {
        match self {
            Source::Synthetic(rng) => Ok(Some(format!("https://bench.invalid/doc/{:016x}", rng.next_u64()))),
            Source::File(lines) => loop {
                match lines.next().transpose()? {
                    None => return Ok(None),
                    Some(l) if l.trim().is_empty() => continue,
                    Some(l) => return Ok(Some(l.trim().to_string())),
                }
            },
        }
    }
}

/// The value a host would store for `id`: its digest, named by algorithm.
pub fn synthetic_value(alg: HashAlg, id: &str) -> String {
    format!("{}:{}", alg.name(), alg.hash(id.as_bytes()).to_hex())
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

/// Runs the harness, calling `on_row` after every snapshot.
pub fn run(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow) -> Result<(), BenchError>) -> Result<Vec<BenchRow>, BenchError> {
    for p in [cfg.catalog.clone(), icat_core::store::journal_path(&cfg.catalog)] {
        match std::fs::remove_file(&p) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
    }
    let config = PadConfig { hash: cfg.hash, skip_no: cfg.skip_no, page_size: cfg.page_size };
    let mut pad = TreapPad::create(&cfg.catalog, config)?;
    let mut source = Source::open(cfg)?;
    // Searches draw from their own stream so the key sequence does not
    // depend on how many searches run.
    let mut search_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EA2_C4E5);
    let mut keys: Vec<String> = Vec::new();
    // keys[..known[t - 1]] were present at snapshot t.
    let mut known: Vec<usize> = Vec::new();
    let mut pras: Vec<Digest> = Vec::new();
    let mut rows = Vec::new();

    for _ in 0..cfg.snapshot_count {
        let mut inserted = 0u64;
        let start = Instant::now();
        let mut exhausted = false;
        while inserted < cfg.keys_per_snapshot as u64 {
            let Some(id) = source.next_id()? else {
                exhausted = true;
                break;
            };
            match pad.insert(id.as_bytes(), synthetic_value(cfg.hash, &id).as_bytes()) {
                Ok(()) => {
                    keys.push(id);
                    inserted += 1;
                }
                Err(PadError::KeyExists) => log::debug!("skipping repeated identifier {id}"),
                Err(e) => return Err(e.into()),
            }
        }
        if inserted == 0 && exhausted {
            break;
        }
        let insert_us = micros(start);

        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let start = Instant::now();
        let view = pad.snapshot(now)?;
        let snapshot_us = micros(start);
        known.push(keys.len());
        pras.push(view.pra);

        let mut searches = 0u64;
        let start = Instant::now();
        if !keys.is_empty() {
            for _ in 0..cfg.searches_per_snapshot {
                let t = search_rng.random_range(0..pras.len());
                if known[t] == 0 {
                    continue;
                }
                let key = &keys[search_rng.random_range(0..known[t])];
                verified_search(&pad, key, t as u64 + 1, &pras[t])?;
                searches += 1;
            }
        }
        let search_us = micros(start);

        let per = |total: f64, n: u64| if n == 0 { 0.0 } else { total / n as f64 };
        let row = BenchRow {
            snapshot_id: view.snapshot_id,
            inserts: inserted,
            avg_insert_us: per(insert_us, inserted),
            avg_snapshot_us_per_elem: per(snapshot_us, inserted),
            searches,
            avg_search_us: per(search_us, searches),
            file_size_bytes: pad.store().file_size(),
        };
        on_row(&row)?;
        rows.push(row);
        if exhausted {
            break;
        }
    }
    Ok(rows)
}

fn verified_search(pad: &TreapPad, key: &str, snapshot: u64, pra: &Digest) -> Result<(), BenchError> {
    let fail = |reason: String| BenchError::Search { key: key.to_string(), snapshot, reason };
    match pad.lookup_proof(key.as_bytes(), snapshot) {
        Ok(LookupProof::Present(proof)) => {
            let entry = verify_proof(pad.hash_alg(), &proof, pra).map_err(|e| fail(e.to_string()))?;
            if entry.value != synthetic_value(pad.hash_alg(), key).as_bytes() {
                return Err(fail("wrong value".into()));
            }
            Ok(())
        }
        Ok(LookupProof::Absent(_)) => Err(fail("key missing".into())),
        Err(e) => Err(fail(e.to_string())),
    }
}

/// Runs the harness and streams rows as CSV into `out`.
pub fn run_csv(cfg: &BenchConfig, out: impl Write) -> Result<Vec<BenchRow>, BenchError> {
    let mut w = csv::Writer::from_writer(out);
    let rows = run(cfg, |row| {
        w.serialize(row)?;
        w.flush()?;
        Ok(())
    })?;
    if rows.is_empty() {
        // Keep the header even when nothing was sealed.
        w.write_record([
            "snapshot_id",
            "inserts",
            "avg_insert_us",
            "avg_snapshot_us_per_elem",
            "searches",
            "avg_search_us",
            "file_size_bytes",
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn default_catalog(dir: &Path) -> PathBuf {
    dir.join("bench.icat")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> BenchConfig {
        BenchConfig {
            keys_per_snapshot: 300,
            snapshot_count: 4,
            searches_per_snapshot: 200,
            ..BenchConfig::new(default_catalog(dir))
        }
    }

    fn untimed(rows: &[BenchRow]) -> Vec<(u64, u64, u64, u64)> {
        rows.iter().map(|r| (r.snapshot_id, r.inserts, r.searches, r.file_size_bytes)).collect()
    }

    #[test]
    fn rows_are_deterministic_apart_from_timing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let a = run(&cfg, |_| Ok(())).unwrap();
        let b = run(&cfg, |_| Ok(())).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(untimed(&a), untimed(&b));
        assert!(a.windows(2).all(|w| w[0].file_size_bytes < w[1].file_size_bytes));
        assert!(a.iter().all(|r| r.inserts == 300 && r.searches == 200));
    }

    #[test]
    fn input_file_runs_out() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("ids.txt");
        let ids: String = (0..250).map(|i| format!("urn:x:{i}\n")).chain(["\nurn:x:3\n".into()]).collect();
        std::fs::write(&list, ids).unwrap();
        let cfg = BenchConfig { keys_per_snapshot: 100, input: Some(list), ..small(dir.path()) };
        let rows = run(&cfg, |_| Ok(())).unwrap();
        assert_eq!(rows.iter().map(|r| r.inserts).collect::<Vec<_>>(), vec![100, 100, 50]);
    }

    #[test]
    fn csv_header_matches_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig { snapshot_count: 2, ..small(dir.path()) };
        let mut out = Vec::new();
        run_csv(&cfg, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("snapshot_id,inserts,avg_insert_us,avg_snapshot_us_per_elem,searches,avg_search_us,file_size_bytes")
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn value_names_the_algorithm() {
        let v = synthetic_value(HashAlg::Sha256, "abc");
        assert_eq!(v, "sha-256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
