//! Fault injection and file inspection.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use icat_core::pad::{PadError, TreapPad};

/// Flips the bits of `mask` in the octet at `offset`; returns the old and
/// new octet.
pub fn flip_octet(path: &Path, offset: u64, mask: u8) -> std::io::Result<(u8, u8)> {
    if mask == 0 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "mask must be non-zero"));
    }
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let len = f.metadata()?.len();
    if offset >= len {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("offset {offset} is past the end of the {len}-octet file"),
        ));
    }
    let mut b = [0u8];
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(&mut b)?;
    let new = b[0] ^ mask;
    f.seek(SeekFrom::Start(offset))?;
    f.write_all(&[new])?;
    f.sync_all()?;
    Ok((b[0], new))
}

pub fn truncate(path: &Path, len: u64) -> std::io::Result<()> {
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(len)?;
    f.sync_all()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileStats {
    pub file_size: u64,
    pub page_size: usize,
    pub blocks: u64,
    pub open_epoch: u64,
    pub snapshots: u64,
    pub hash: &'static str,
    pub skip_no: u32,
    /// Blocks per epoch stamp.
    pub blocks_by_epoch: BTreeMap<u64, u64>,
}

pub fn stats(path: &Path) -> Result<FileStats, PadError> {
    let pad = TreapPad::open(path)?;
    let store = pad.store();
    let mut blocks_by_epoch = BTreeMap::new();
    for b in 0..store.block_count() {
        if let Some(e) = store.epoch_stamp(b) {
            *blocks_by_epoch.entry(e).or_insert(0) += 1;
        }
    }
    Ok(FileStats {
        file_size: store.file_size(),
        page_size: store.page_size(),
        blocks: store.block_count(),
        open_epoch: pad.open_epoch(),
        snapshots: pad.latest_sealed(),
        hash: pad.hash_alg().name(),
        skip_no: pad.skip_no(),
        blocks_by_epoch,
    })
}

impl std::fmt::Display for FileStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "file_size_bytes {}", self.file_size)?;
        writeln!(f, "page_size {}", self.page_size)?;
        writeln!(f, "blocks {}", self.blocks)?;
        writeln!(f, "snapshots {}", self.snapshots)?;
        writeln!(f, "open_epoch {}", self.open_epoch)?;
        writeln!(f, "hash {}", self.hash)?;
        writeln!(f, "skip_no {}", self.skip_no)?;
        writeln!(f, "blocks_by_epoch")?;
        for (e, n) in &self.blocks_by_epoch {
            writeln!(f, "  {e} {n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use icat_core::pad::PadConfig;

    #[test]
    fn flip_twice_restores() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        assert_eq!(flip_octet(&p, 1, 0xFF).unwrap(), (2, 0xFD));
        assert_eq!(flip_octet(&p, 1, 0xFF).unwrap(), (0xFD, 2));
        assert!(flip_octet(&p, 3, 1).is_err());
        truncate(&p, 1).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), [1]);
    }

    #[test]
    fn counts_blocks_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.icat");
        let mut pad = TreapPad::create(&p, PadConfig { page_size: 4096, ..PadConfig::default() }).unwrap();
        for s in 0..3u32 {
            for i in 0..40u32 {
                pad.insert(format!("k{s}-{i}").as_bytes(), &[7; 60]).unwrap();
            }
            pad.snapshot(u64::from(s)).unwrap();
        }
        drop(pad);
        let st = stats(&p).unwrap();
        assert_eq!(st.snapshots, 3);
        assert_eq!(st.open_epoch, 4);
        assert_eq!(st.blocks_by_epoch.values().sum::<u64>(), st.blocks);
        assert_eq!(st.file_size, 4096 + st.blocks * 4096);
        // The meta page is restamped by every seal.
        assert!(st.blocks_by_epoch.contains_key(&3));
    }
}
