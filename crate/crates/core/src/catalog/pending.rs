//! Log of puts and amends made since the last seal.
//!
//! The pad keeps unsealed changes in memory only, so this log carries them
//! across process restarts. Layout: `"ICPL"`, the open epoch (u64 LE) the
//! operations belong to, then records `op u8, key_len u32, key, value_len
//! u32, value`. A torn last record is ignored; a log for another epoch is
//! stale and discarded.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"ICPL";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PendingOp {
    Put { key: Vec<u8>, value: Vec<u8> },
    Amend { key: Vec<u8>, suffix: Vec<u8> },
}

pub struct PendingLog {
    path: PathBuf,
    file: File,
}

pub fn log_path(catalog: &Path) -> PathBuf {
    let mut name = catalog.as_os_str().to_os_string();
    name.push(".pending");
    PathBuf::from(name)
}

impl PendingLog {
    /// Opens the log for `catalog` and returns the operations recorded for
    /// `epoch`. The log is reset if it belongs to any other epoch.
    pub fn open(catalog: &Path, epoch: u64) -> io::Result<(PendingLog, Vec<PendingOp>)> {
        let path = log_path(catalog);
        let ops = match fs::read(&path) {
            Ok(raw) => match parse(&raw) {
                Some((e, ops)) if e == epoch => ops,
                Some((e, ops)) => {
                    if !ops.is_empty() {
                        log::warn!("discarding {} logged operations of epoch {e}", ops.len());
                    }
                    Vec::new()
                }
                None => Vec::new(),
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut log = PendingLog::reset_file(path, epoch)?;
        for op in &ops {
            log.append(op)?;
        }
        Ok((log, ops))
    }

    fn reset_file(path: PathBuf, epoch: u64) -> io::Result<PendingLog> {
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        let mut header = [0u8; HEADER_LEN];
        header[..4].copy_from_slice(MAGIC);
        header[4..].copy_from_slice(&epoch.to_le_bytes());
        file.write_all(&header)?;
        file.sync_data()?;
        Ok(PendingLog { path, file })
    }

    /// Opens the log for appending without checking or discarding what it
    /// holds. Used while the catalog itself cannot be read.
    pub fn attach(catalog: &Path) -> io::Result<PendingLog> {
        let path = log_path(catalog);
        match fs::read(&path) {
            Ok(raw) if parse(&raw).is_some() => {
                let file = OpenOptions::new().append(true).open(&path)?;
                Ok(PendingLog { path, file })
            }
            Ok(_) => PendingLog::reset_file(path, 1),
            Err(e) if e.kind() == io::ErrorKind::NotFound => PendingLog::reset_file(path, 1),
            Err(e) => Err(e),
        }
    }

    /// Empties the log for a new open epoch.
    pub fn reset(&mut self, epoch: u64) -> io::Result<()> {
        *self = PendingLog::reset_file(self.path.clone(), epoch)?;
        Ok(())
    }

    pub fn append(&mut self, op: &PendingOp) -> io::Result<()> {
        let (tag, key, value) = match op {
            PendingOp::Put { key, value } => (1u8, key, value),
            PendingOp::Amend { key, suffix } => (2u8, key, suffix),
        };
        let mut rec = Vec::with_capacity(9 + key.len() + value.len());
        rec.push(tag);
        rec.extend_from_slice(&(key.len() as u32).to_le_bytes());
        rec.extend_from_slice(key);
        rec.extend_from_slice(&(value.len() as u32).to_le_bytes());
        rec.extend_from_slice(value);
        self.file.write_all(&rec)
    }
}

fn parse(raw: &[u8]) -> Option<(u64, Vec<PendingOp>)> {
    if raw.len() < HEADER_LEN || &raw[..4] != MAGIC {
        return None;
    }
    let epoch = u64::from_le_bytes(raw[4..12].try_into().unwrap());
    let mut ops = Vec::new();
    let mut rest = &raw[HEADER_LEN..];
    let take = |n: usize, rest: &mut &[u8]| -> Option<Vec<u8>> {
        let (a, b) = rest.split_at_checked(n)?;
        *rest = b;
        Some(a.to_vec())
    };
    while let Some((&tag, tail)) = rest.split_first() {
        let mut cur = tail;
        let Some(op) = (|| {
            let klen = u32::from_le_bytes(take(4, &mut cur)?.try_into().ok()?) as usize;
            let key = take(klen, &mut cur)?;
            let vlen = u32::from_le_bytes(take(4, &mut cur)?.try_into().ok()?) as usize;
            let value = take(vlen, &mut cur)?;
            match tag {
                1 => Some(PendingOp::Put { key, value }),
                2 => Some(PendingOp::Amend { key, suffix: value }),
                _ => None,
            }
        })() else {
            break;
        };
        ops.push(op);
        rest = cur;
    }
    Some((epoch, ops))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_epoch_check() {
        let dir = tempfile::TempDir::new().unwrap();
        let cat = dir.path().join("c.icat");
        let ops = vec![
            PendingOp::Put { key: b"k".to_vec(), value: b"v".to_vec() },
            PendingOp::Amend { key: b"k".to_vec(), suffix: b"+".to_vec() },
        ];
        {
            let (mut log, old) = PendingLog::open(&cat, 3).unwrap();
            assert!(old.is_empty());
            ops.iter().for_each(|op| log.append(op).unwrap());
        }
        let (_, again) = PendingLog::open(&cat, 3).unwrap();
        assert_eq!(again, ops);
        // Reopening rewrote the same operations.
        let (_, again) = PendingLog::open(&cat, 3).unwrap();
        assert_eq!(again, ops);
        drop(PendingLog::attach(&cat).unwrap());
        let (_, again) = PendingLog::open(&cat, 3).unwrap();
        assert_eq!(again, ops);
        let (_, other) = PendingLog::open(&cat, 4).unwrap();
        assert!(other.is_empty());
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::TempDir::new().unwrap();
        let cat = dir.path().join("c.icat");
        {
            let (mut log, _) = PendingLog::open(&cat, 1).unwrap();
            log.append(&PendingOp::Put { key: b"a".to_vec(), value: b"1".to_vec() }).unwrap();
            log.append(&PendingOp::Put { key: b"b".to_vec(), value: b"2".to_vec() }).unwrap();
        }
        let p = log_path(&cat);
        let raw = fs::read(&p).unwrap();
        fs::write(&p, &raw[..raw.len() - 1]).unwrap();
        let (_, ops) = PendingLog::open(&cat, 1).unwrap();
        assert_eq!(ops, vec![PendingOp::Put { key: b"a".to_vec(), value: b"1".to_vec() }]);
    }
}
