//! Variable-length record manager over fixed-size blocks in one catalog file.
//!
//! Records never span blocks and are never freed. Every block carries the id
//! of the epoch that last modified it, which is what makes page-granular
//! incremental replication possible.
//!
//! Mutations are buffered in memory until [`Store::sync`], which writes them
//! through a side journal. The main file therefore only ever holds sealed
//! state; a crash loses at most the open epoch.

mod journal;
pub use journal::journal_path;
pub mod page;

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ICAT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4096;
pub const DEFAULT_PAGE_SIZE: usize = 16384;
pub const MIN_PAGE_SIZE: usize = 4096;
/// Slot offsets are 16-bit, which caps the page size.
pub const MAX_PAGE_SIZE: usize = 32768;

const DEFAULT_CACHE_PAGES: usize = 32768;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid page size {0}: must be a power of two between 4096 and 32768")]
    InvalidPageSize(usize),
    #[error("record of {len} octets exceeds maximum of {max}")]
    RecordTooLarge { len: usize, max: usize },
    #[error("no record at {0}")]
    BadRecordId(RecordId),
    #[error("no block {0}")]
    BadBlockNo(u64),
    #[error("corrupt block {block}: {reason}")]
    CorruptBlock { block: u64, reason: String },
    #[error("corrupt catalog header: {0}")]
    CorruptHeader(String),
    #[error("epoch regression: current {current}, requested {requested}")]
    EpochRegression { current: u64, requested: u64 },
    #[error("raw block writes require an open binary-update session")]
    NotInUpdateSession,
    #[error("rejected block image: {0}")]
    BadBlockImage(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Location of a record: block number (48 bits on disk) and slot.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordId {
    pub block: u64,
    pub slot: u16,
}

impl RecordId {
    pub const ENCODED_LEN: usize = 8;
    const BLOCK_MASK: u64 = (1 << 48) - 1;

    pub fn new(block: u64, slot: u16) -> RecordId {
        RecordId { block, slot }
    }

    pub fn encode(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..6].copy_from_slice(&(self.block & Self::BLOCK_MASK).to_le_bytes()[..6]);
        out[6..].copy_from_slice(&self.slot.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<RecordId> {
        if bytes.len() < Self::ENCODED_LEN {
            return None;
        }
        let mut block = [0u8; 8];
        block[..6].copy_from_slice(&bytes[..6]);
        Some(RecordId {
            block: u64::from_le_bytes(block),
            slot: u16::from_le_bytes([bytes[6], bytes[7]]),
        })
    }
}

impl fmt::Debug for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}.{}", self.block, self.slot)
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub format_version: u32,
    pub page_size: u32,
    pub block_count: u64,
    pub current_epoch: u64,
}

impl StoreHeader {
    fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.format_version.to_le_bytes());
        out[8..12].copy_from_slice(&self.page_size.to_le_bytes());
        out[12..20].copy_from_slice(&self.block_count.to_le_bytes());
        out[20..28].copy_from_slice(&self.current_epoch.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<StoreHeader> {
        if bytes.len() < 28 || bytes[0..4] != MAGIC {
            return Err(StoreError::CorruptHeader("bad magic".into()));
        }
        let header = StoreHeader {
            format_version: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            page_size: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            block_count: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            current_epoch: u64::from_le_bytes(bytes[20..28].try_into().unwrap()),
        };
        if header.format_version != FORMAT_VERSION {
            return Err(StoreError::CorruptHeader(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        check_page_size(header.page_size as usize)
            .map_err(|_| StoreError::CorruptHeader(format!("page size {}", header.page_size)))?;
        if header.current_epoch == 0 {
            return Err(StoreError::CorruptHeader("epoch 0".into()));
        }
        Ok(header)
    }
}

/// A raw page as it travels between replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockImage {
    pub block_no: u64,
    pub epoch_stamp: u64,
    pub payload: Vec<u8>,
}

impl BlockImage {
    pub fn from_payload(block_no: u64, payload: Vec<u8>) -> BlockImage {
        let epoch_stamp = if payload.len() >= 8 { page::stamp(&payload) } else { 0 };
        BlockImage { block_no, epoch_stamp, payload }
    }
}

fn check_page_size(size: usize) -> Result<()> {
    if size.is_power_of_two() && (MIN_PAGE_SIZE..=MAX_PAGE_SIZE).contains(&size) {
        Ok(())
    } else {
        Err(StoreError::InvalidPageSize(size))
    }
}

struct PageCache {
    pages: HashMap<u64, Arc<[u8]>>,
    capacity: usize,
}

impl PageCache {
    fn insert(&mut self, block: u64, page: Arc<[u8]>) {
        if self.pages.len() >= self.capacity {
            if let Some(&victim) = self.pages.keys().next() {
                self.pages.remove(&victim);
            }
        }
        self.pages.insert(block, page);
    }
}

pub struct Store {
    path: PathBuf,
    file: File,
    page_size: usize,
    header: StoreHeader,
    durable: StoreHeader,
    stamps: Vec<u64>,
    durable_stamps: Vec<u64>,
    /// Pages modified since the last sync, keyed by block number.
    dirty: HashMap<u64, Vec<u8>>,
    /// Clean copies of durable pages.
    cache: Mutex<PageCache>,
    session: bool,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("path", &self.path)
            .field("header", &self.header)
            .field("dirty", &self.dirty.len())
            .finish()
    }
}

impl Store {
    /// Creates a new, empty catalog file. Fails if the file exists.
    pub fn create(path: impl AsRef<Path>, page_size: usize) -> Result<Store> {
        check_page_size(page_size)?;
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).write(true).create_new(true).open(&path)?;
        let header = StoreHeader {
            format_version: FORMAT_VERSION,
            page_size: page_size as u32,
            block_count: 0,
            current_epoch: 1,
        };
        file.write_all_at(&header.encode(), 0)?;
        file.sync_all()?;
        Ok(Store::assemble(path, file, header, Vec::new()))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Store> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        journal::recover(&path, &file)?;
        let mut raw = vec![0u8; HEADER_LEN];
        file.read_exact_at(&mut raw, 0).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => StoreError::CorruptHeader("file shorter than header".into()),
            _ => StoreError::Io(e),
        })?;
        let header = StoreHeader::decode(&raw)?;
        let expected = HEADER_LEN as u64 + header.block_count * header.page_size as u64;
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(StoreError::CorruptHeader(format!(
                "file length {actual} does not match {} blocks",
                header.block_count
            )));
        }
        let mut stamps = Vec::with_capacity(header.block_count as usize);
        let mut buf = [0u8; 8];
        for block in 0..header.block_count {
            file.read_exact_at(&mut buf, page_offset(header.page_size as usize, block))?;
            stamps.push(u64::from_le_bytes(buf));
        }
        Ok(Store::assemble(path, file, header, stamps))
    }

    fn assemble(path: PathBuf, file: File, header: StoreHeader, stamps: Vec<u64>) -> Store {
        Store {
            path,
            file,
            page_size: header.page_size as usize,
            header,
            durable: header,
            durable_stamps: stamps.clone(),
            stamps,
            dirty: HashMap::new(),
            cache: Mutex::new(PageCache { pages: HashMap::new(), capacity: DEFAULT_CACHE_PAGES }),
            session: false,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    pub fn block_count(&self) -> u64 {
        self.header.block_count
    }

    pub fn current_epoch(&self) -> u64 {
        self.header.current_epoch
    }

    pub fn max_record_size(&self) -> usize {
        page::max_record_len(self.page_size)
    }

    /// Size of the file once the pending state is synced.
    pub fn file_size(&self) -> u64 {
        HEADER_LEN as u64 + self.header.block_count * self.page_size as u64
    }

    pub fn set_cache_capacity(&self, pages: usize) {
        let mut cache = self.cache.lock();
        cache.capacity = pages.max(1);
        cache.pages.clear();
    }

    /// Drops every cached clean page so the next read goes to disk.
    pub fn drop_caches(&self) {
        self.cache.lock().pages.clear();
    }

    pub fn has_pending_writes(&self) -> bool {
        !self.dirty.is_empty() || self.header != self.durable
    }

    fn load_durable(&self, block: u64) -> Result<Arc<[u8]>> {
        if let Some(page) = self.cache.lock().pages.get(&block) {
            return Ok(page.clone());
        }
        if block >= self.durable.block_count {
            return Err(StoreError::BadBlockNo(block));
        }
        let mut buf = vec![0u8; self.page_size];
        self.file.read_exact_at(&mut buf, page_offset(self.page_size, block))?;
        page::validate(&buf, self.durable.current_epoch)
            .map_err(|reason| StoreError::CorruptBlock { block, reason })?;
        let page: Arc<[u8]> = buf.into();
        self.cache.lock().insert(block, page.clone());
        Ok(page)
    }

    fn with_page<R>(&self, block: u64, f: impl FnOnce(&[u8]) -> R) -> Result<R> {
        if let Some(page) = self.dirty.get(&block) {
            return Ok(f(page));
        }
        if block >= self.header.block_count {
            return Err(StoreError::BadBlockNo(block));
        }
        let page = self.load_durable(block)?;
        Ok(f(&page))
    }

    /// Returns a mutable dirty copy of `block`, stamped with the open epoch.
    fn page_mut(&mut self, block: u64) -> Result<&mut Vec<u8>> {
        if !self.dirty.contains_key(&block) {
            let page = self.load_durable(block)?.to_vec();
            self.dirty.insert(block, page);
        }
        let epoch = self.header.current_epoch;
        self.stamps[block as usize] = epoch;
        let page = self.dirty.get_mut(&block).unwrap();
        page::set_stamp(page, epoch);
        Ok(page)
    }

    fn allocate_block(&mut self) -> u64 {
        let block = self.header.block_count;
        let mut page = vec![0u8; self.page_size];
        page::init(&mut page, self.header.current_epoch);
        self.dirty.insert(block, page);
        self.stamps.push(self.header.current_epoch);
        self.header.block_count += 1;
        block
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let max = self.max_record_size();
        if len > max {
            return Err(StoreError::RecordTooLarge { len, max });
        }
        Ok(())
    }

    /// Places `data` in the tail block, or a fresh block when the tail is full.
    fn place(&mut self, data: &[u8], avoid: Option<u64>) -> Result<RecordId> {
        if let Some(tail) = self.header.block_count.checked_sub(1) {
            if Some(tail) != avoid {
                let fits = self.with_page(tail, page::free_space)?
                    >= data.len().max(page::MIN_ALLOC) + page::SLOT_LEN;
                if fits {
                    let page = self.page_mut(tail)?;
                    let slot = page::insert(page, data).expect("free space checked");
                    return Ok(RecordId::new(tail, slot));
                }
            }
        }
        let block = self.allocate_block();
        let page = self.dirty.get_mut(&block).unwrap();
        let slot = page::insert(page, data).expect("empty page holds any legal record");
        Ok(RecordId::new(block, slot))
    }

    pub fn insert_record(&mut self, data: &[u8]) -> Result<RecordId> {
        self.check_len(data.len())?;
        self.place(data, None)
    }

    /// Follows forwarding tombstones to the slot that holds the data.
    fn resolve(&self, id: RecordId) -> Result<(RecordId, usize, usize)> {
        let mut at = id;
        // Records only ever move to a later block, which bounds the chain.
        loop {
            let slot = self.with_page(at.block, |p| page::slot(p, at.slot)).map_err(|e| match e {
                StoreError::BadBlockNo(_) => StoreError::BadRecordId(id),
                other => other,
            })?;
            match slot {
                Some(page::Slot::Live { offset, len }) => return Ok((at, offset, len)),
                Some(page::Slot::Moved(next)) if next.block > at.block => at = next,
                Some(page::Slot::Moved(_)) => {
                    return Err(StoreError::CorruptBlock { block: at.block, reason: "backward forwarding".into() })
                }
                None => return Err(StoreError::BadRecordId(id)),
            }
        }
    }

    pub fn read_record(&self, id: RecordId) -> Result<Vec<u8>> {
        let (at, offset, len) = self.resolve(id)?;
        self.with_page(at.block, |p| p[offset..offset + len].to_vec())
    }

    /// Rewrites a record. The returned id differs from `id` when the record
    /// had to leave its block; the old slot then forwards to the new one.
    pub fn update_record(&mut self, id: RecordId, data: &[u8]) -> Result<RecordId> {
        self.check_len(data.len())?;
        let (at, _, _) = self.resolve(id)?;
        let fits = {
            let page = self.page_mut(at.block)?;
            page::update(page, at.slot, data)
        };
        if fits {
            return Ok(at);
        }
        let moved = self.place(data, Some(at.block))?;
        let page = self.page_mut(at.block)?;
        page::mark_moved(page, at.slot, moved);
        Ok(moved)
    }

    pub fn set_current_epoch(&mut self, epoch: u64) -> Result<()> {
        if epoch < self.header.current_epoch {
            return Err(StoreError::EpochRegression {
                current: self.header.current_epoch,
                requested: epoch,
            });
        }
        self.header.current_epoch = epoch;
        Ok(())
    }

    pub fn epoch_stamp(&self, block: u64) -> Option<u64> {
        self.stamps.get(block as usize).copied()
    }

    /// Blocks whose latest stamp is `epoch`, ascending.
    pub fn blocks_of_epoch(&self, epoch: u64) -> Vec<u64> {
        filter_stamps(&self.stamps, epoch)
    }

    /// Same as [`Store::blocks_of_epoch`] but over the synced image only.
    pub fn durable_blocks_of_epoch(&self, epoch: u64) -> Vec<u64> {
        filter_stamps(&self.durable_stamps, epoch)
    }

    pub fn durable_block_after(&self, epoch: u64, after: Option<u64>) -> Option<u64> {
        let start = after.map_or(0, |b| b as usize + 1);
        self.durable_stamps
            .iter()
            .enumerate()
            .skip(start)
            .find(|(_, &s)| s == epoch)
            .map(|(i, _)| i as u64)
    }

    pub fn read_block(&self, block: u64) -> Result<BlockImage> {
        let payload = self.with_page(block, |p| p.to_vec())?;
        Ok(BlockImage::from_payload(block, payload))
    }

    /// Reads a block from the last synced image, ignoring buffered writes.
    pub fn read_durable_block(&self, block: u64) -> Result<BlockImage> {
        let payload = self.load_durable(block)?.to_vec();
        Ok(BlockImage::from_payload(block, payload))
    }

    pub fn begin_session(&mut self) {
        self.session = true;
    }

    pub fn end_session(&mut self) {
        self.session = false;
    }

    pub fn in_session(&self) -> bool {
        self.session
    }

    /// Replaces a page verbatim. Writing past the end extends the store;
    /// any skipped blocks are filled with empty pages stamped 0.
    pub fn write_block(&mut self, image: &BlockImage) -> Result<()> {
        if !self.session {
            return Err(StoreError::NotInUpdateSession);
        }
        if image.payload.len() != self.page_size {
            return Err(StoreError::BadBlockImage(format!(
                "page of {} octets, store uses {}",
                image.payload.len(),
                self.page_size
            )));
        }
        let stamp = page::stamp(&image.payload);
        if stamp != image.epoch_stamp {
            return Err(StoreError::BadBlockImage("epoch stamp disagrees with payload".into()));
        }
        page::validate(&image.payload, self.header.current_epoch).map_err(StoreError::BadBlockImage)?;
        if image.block_no >= 1 << 48 {
            return Err(StoreError::BadBlockNo(image.block_no));
        }
        while self.header.block_count < image.block_no {
            let block = self.header.block_count;
            let mut filler = vec![0u8; self.page_size];
            page::init(&mut filler, 0);
            self.dirty.insert(block, filler);
            self.stamps.push(0);
            self.header.block_count += 1;
        }
        if image.block_no == self.header.block_count {
            self.stamps.push(stamp);
            self.header.block_count += 1;
        } else {
            self.stamps[image.block_no as usize] = stamp;
        }
        self.dirty.insert(image.block_no, image.payload.clone());
        Ok(())
    }

    /// Discards every buffered write since the last sync.
    pub fn rollback(&mut self) {
        self.dirty.clear();
        self.header = self.durable;
        self.stamps = self.durable_stamps.clone();
        self.session = false;
    }

    /// Makes all buffered writes durable. The journal is written and synced
    /// first, so an interrupted sync is replayed on the next open.
    pub fn sync(&mut self) -> Result<()> {
        if !self.has_pending_writes() {
            return Ok(());
        }
        let header = self.header.encode();
        let mut blocks: Vec<u64> = self.dirty.keys().copied().collect();
        blocks.sort_unstable();
        let pages: Vec<(u64, &[u8])> = blocks.iter().map(|&b| (b, self.dirty[&b].as_slice())).collect();
        journal::write(&self.path, &header, &pages)?;
        journal::apply(&self.file, self.page_size, &header, &pages)?;
        journal::remove(&self.path)?;

        let mut cache = self.cache.lock();
        for (block, page) in self.dirty.drain() {
            cache.pages.remove(&block);
            if cache.pages.len() < cache.capacity {
                cache.pages.insert(block, page.into());
            }
        }
        drop(cache);
        self.durable = self.header;
        self.durable_stamps = self.stamps.clone();
        Ok(())
    }
}

fn page_offset(page_size: usize, block: u64) -> u64 {
    HEADER_LEN as u64 + block * page_size as u64
}

fn filter_stamps(stamps: &[u64], epoch: u64) -> Vec<u64> {
    stamps
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == epoch)
        .map(|(i, _)| i as u64)
        .collect()
}
