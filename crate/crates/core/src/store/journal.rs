//! Side journal that makes a multi-page sync atomic.
//!
//! Layout: `"ICJL"`, header image (4096 octets), page size u32, page count
//! u64, then `(block u64, page)` pairs, then a SHA-256 of everything before
//! it. A journal with a bad trailer was never completed and is discarded.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Result, HEADER_LEN};

const MAGIC: [u8; 4] = *b"ICJL";

pub fn journal_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".journal");
    PathBuf::from(name)
}

pub fn write(path: &Path, header: &[u8], pages: &[(u64, &[u8])]) -> Result<()> {
    let page_size = pages.first().map_or(0, |(_, p)| p.len());
    let mut body = Vec::with_capacity(HEADER_LEN + 16 + pages.len() * (page_size + 8) + 32);
    body.extend_from_slice(&MAGIC);
    body.extend_from_slice(header);
    body.extend_from_slice(&(page_size as u32).to_le_bytes());
    body.extend_from_slice(&(pages.len() as u64).to_le_bytes());
    for (block, page) in pages {
        body.extend_from_slice(&block.to_le_bytes());
        body.extend_from_slice(page);
    }
    let trailer = Sha256::digest(&body);
    body.extend_from_slice(&trailer);

    let mut file = OpenOptions::new().write(true).create(true).truncate(true).open(journal_path(path))?;
    file.write_all(&body)?;
    file.sync_all()?;
    Ok(())
}

pub fn apply(file: &File, page_size: usize, header: &[u8], pages: &[(u64, &[u8])]) -> Result<()> {
    for (block, page) in pages {
        file.write_all_at(page, HEADER_LEN as u64 + block * page_size as u64)?;
    }
    file.write_all_at(header, 0)?;
    let block_count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    file.set_len(HEADER_LEN as u64 + block_count * page_size as u64)?;
    file.sync_all()?;
    Ok(())
}

pub fn remove(path: &Path) -> Result<()> {
    match fs::remove_file(journal_path(path)) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e.into()),
    }
}

/// Replays a complete journal left behind by an interrupted sync.
pub fn recover(path: &Path, file: &File) -> Result<()> {
    let jpath = journal_path(path);
    let mut raw = Vec::new();
    match File::open(&jpath) {
        Ok(mut j) => {
            j.read_to_end(&mut raw)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    }
    let Some(pages) = parse(&raw) else {
        log::warn!("discarding incomplete journal {}", jpath.display());
        return remove(path);
    };
    let header = &raw[4..4 + HEADER_LEN];
    let page_size = u32::from_le_bytes(raw[4 + HEADER_LEN..8 + HEADER_LEN].try_into().unwrap()) as usize;
    // The header's own page size wins when the journal carried no pages.
    let page_size = if page_size == 0 {
        u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize
    } else {
        page_size
    };
    apply(file, page_size, header, &pages)?;
    remove(path)
}

fn parse(raw: &[u8]) -> Option<Vec<(u64, &[u8])>> {
    let fixed = 4 + HEADER_LEN + 4 + 8;
    if raw.len() < fixed + 32 || raw[0..4] != MAGIC {
        return None;
    }
    let (body, trailer) = raw.split_at(raw.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return None;
    }
    let page_size = u32::from_le_bytes(body[4 + HEADER_LEN..8 + HEADER_LEN].try_into().ok()?) as usize;
    let count = u64::from_le_bytes(body[8 + HEADER_LEN..fixed].try_into().ok()?) as usize;
    let mut pages = Vec::with_capacity(count);
    let mut at = fixed;
    for _ in 0..count {
        let block = u64::from_le_bytes(body.get(at..at + 8)?.try_into().ok()?);
        let page = body.get(at + 8..at + 8 + page_size)?;
        pages.push((block, page));
        at += 8 + page_size;
    }
    (at == body.len()).then_some(pages)
}
