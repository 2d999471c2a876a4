//! Slotted page layout.
//!
//! ```text
//! +-------------+------------+-------------+----------------+ ... +-----------+
//! | epoch (u64) | slots (u16)| free (u16)  | slot directory | --> | data heap |
//! +-------------+------------+-------------+----------------+ ... +-----------+
//! ```
//!
//! The directory grows upwards from offset 12, four octets per slot
//! (`offset u16`, `length u16`). The heap grows downwards from the end of the
//! page; `free` is the lowest heap offset in use. A slot whose length is
//! [`MOVED`] is a forwarding tombstone: its heap region holds the six-octet
//! id of the record's new home.

use super::RecordId;

pub const PAGE_HEADER_LEN: usize = 12;
pub const SLOT_LEN: usize = 4;
pub const MOVED: u16 = 0xFFFF;
/// Every heap allocation is at least this large so a forwarding id fits.
pub const MIN_ALLOC: usize = RecordId::ENCODED_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Live { offset: usize, len: usize },
    Moved(RecordId),
}

fn get_u16(page: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([page[at], page[at + 1]])
}

fn put_u16(page: &mut [u8], at: usize, v: u16) {
    page[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

pub fn init(page: &mut [u8], epoch: u64) {
    page.fill(0);
    set_stamp(page, epoch);
    // A full 32 KiB page stores its free offset as 0x8000, which fits in u16.
    let end = page.len() as u16;
    put_u16(page, 10, end);
}

pub fn stamp(page: &[u8]) -> u64 {
    u64::from_le_bytes(page[0..8].try_into().unwrap())
}

pub fn set_stamp(page: &mut [u8], epoch: u64) {
    page[0..8].copy_from_slice(&epoch.to_le_bytes());
}

pub fn slot_count(page: &[u8]) -> usize {
    get_u16(page, 8) as usize
}

fn free_offset(page: &[u8]) -> usize {
    get_u16(page, 10) as usize
}

fn directory_end(page: &[u8]) -> usize {
    PAGE_HEADER_LEN + SLOT_LEN * slot_count(page)
}

pub fn free_space(page: &[u8]) -> usize {
    free_offset(page).saturating_sub(directory_end(page))
}

/// Largest record a single empty page can hold.
pub fn max_record_len(page_size: usize) -> usize {
    page_size - PAGE_HEADER_LEN - SLOT_LEN
}

fn alloc_len(len: usize) -> usize {
    len.max(MIN_ALLOC)
}

/// Checks the directory for internal consistency. Live records must lie
/// inside the heap and must not overlap each other.
pub fn validate(page: &[u8], max_epoch: u64) -> Result<(), String> {
    let size = page.len();
    if stamp(page) > max_epoch {
        return Err(format!("epoch stamp {} beyond {}", stamp(page), max_epoch));
    }
    let dir_end = directory_end(page);
    let free = free_offset(page);
    if dir_end > free || free > size {
        return Err(format!("directory end {dir_end} / free offset {free} out of order"));
    }
    let mut extents = Vec::with_capacity(slot_count(page));
    for slot in 0..slot_count(page) {
        let at = PAGE_HEADER_LEN + SLOT_LEN * slot;
        let offset = get_u16(page, at) as usize;
        let len = get_u16(page, at + 2);
        let span = if len == MOVED { MIN_ALLOC } else { len as usize };
        if offset < free || offset + span > size {
            return Err(format!("slot {slot} extent {offset}+{span} outside heap"));
        }
        extents.push((offset, offset + span));
    }
    extents.sort_unstable();
    for pair in extents.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(format!("overlapping records at {} and {}", pair[0].0, pair[1].0));
        }
    }
    Ok(())
}

pub fn slot(page: &[u8], slot: u16) -> Option<Slot> {
    let slot = slot as usize;
    if slot >= slot_count(page) {
        return None;
    }
    let at = PAGE_HEADER_LEN + SLOT_LEN * slot;
    let offset = get_u16(page, at) as usize;
    let len = get_u16(page, at + 2);
    if len == MOVED {
        let end = offset + MIN_ALLOC;
        if end > page.len() {
            return None;
        }
        RecordId::decode(&page[offset..end]).map(Slot::Moved)
    } else {
        if offset + len as usize > page.len() {
            return None;
        }
        Some(Slot::Live { offset, len: len as usize })
    }
}

/// Appends `data` as a new slot. Returns `None` when the page lacks room.
pub fn insert(page: &mut [u8], data: &[u8]) -> Option<u16> {
    let need = alloc_len(data.len()) + SLOT_LEN;
    if free_space(page) < need || slot_count(page) >= MOVED as usize {
        return None;
    }
    let slot = slot_count(page);
    let offset = free_offset(page) - alloc_len(data.len());
    page[offset..offset + data.len()].copy_from_slice(data);
    let at = PAGE_HEADER_LEN + SLOT_LEN * slot;
    put_u16(page, at, offset as u16);
    put_u16(page, at + 2, data.len() as u16);
    put_u16(page, 8, (slot + 1) as u16);
    put_u16(page, 10, offset as u16);
    Some(slot as u16)
}

/// Rewrites a live slot within this page: in place when the new data fits
/// the old allocation, else into fresh heap space. Returns false when
/// neither is possible.
pub fn update(page: &mut [u8], slot_no: u16, data: &[u8]) -> bool {
    let Some(Slot::Live { offset, len }) = slot(page, slot_no) else {
        return false;
    };
    let at = PAGE_HEADER_LEN + SLOT_LEN * slot_no as usize;
    if data.len() <= alloc_len(len) {
        page[offset..offset + data.len()].copy_from_slice(data);
        put_u16(page, at + 2, data.len() as u16);
        return true;
    }
    let need = alloc_len(data.len());
    if free_space(page) < need {
        // Heap space left behind by earlier growth is reclaimed here.
        let used: usize =
            (0..slot_count(page)).filter(|&s| s != slot_no as usize).map(|s| extent(page, s).1).sum();
        if directory_end(page) + used + need > page.len() {
            return false;
        }
        compact(page, slot_no);
    }
    let new_offset = free_offset(page) - need;
    page[new_offset..new_offset + data.len()].copy_from_slice(data);
    put_u16(page, at, new_offset as u16);
    put_u16(page, at + 2, data.len() as u16);
    put_u16(page, 10, new_offset as u16);
    true
}

/// Heap offset and allocated length of a slot.
fn extent(page: &[u8], slot: usize) -> (usize, usize) {
    let at = PAGE_HEADER_LEN + SLOT_LEN * slot;
    let len = get_u16(page, at + 2);
    let span = if len == MOVED { MIN_ALLOC } else { alloc_len(len as usize) };
    (get_u16(page, at) as usize, span)
}

/// Repacks the heap against the page end, dropping the allocation of
/// `skip` (whose slot is about to be rewritten). Slot numbers are kept.
fn compact(page: &mut [u8], skip: u16) {
    let old = page.to_vec();
    let mut free = page.len();
    for s in 0..slot_count(&old) {
        if s == skip as usize {
            continue;
        }
        let (offset, span) = extent(&old, s);
        free -= span;
        page[free..free + span].copy_from_slice(&old[offset..offset + span]);
        put_u16(page, PAGE_HEADER_LEN + SLOT_LEN * s, free as u16);
    }
    let at = PAGE_HEADER_LEN + SLOT_LEN * skip as usize;
    put_u16(page, at, free as u16);
    put_u16(page, at + 2, 0);
    put_u16(page, 10, free as u16);
}

/// Turns a live slot into a forwarding tombstone pointing at `to`.
pub fn mark_moved(page: &mut [u8], slot_no: u16, to: RecordId) {
    let Some(Slot::Live { offset, .. }) = slot(page, slot_no) else {
        return;
    };
    page[offset..offset + MIN_ALLOC].copy_from_slice(&to.encode());
    let at = PAGE_HEADER_LEN + SLOT_LEN * slot_no as usize;
    put_u16(page, at + 2, MOVED);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(size: usize) -> Vec<u8> {
        let mut p = vec![0u8; size];
        init(&mut p, 1);
        p
    }

    #[test]
    fn insert_and_read_back() {
        let mut p = fresh(4096);
        let a = insert(&mut p, b"hello").unwrap();
        let b = insert(&mut p, b"").unwrap();
        assert_eq!((a, b), (0, 1));
        let Some(Slot::Live { offset, len }) = slot(&p, a) else { panic!() };
        assert_eq!(&p[offset..offset + len], b"hello");
        assert!(matches!(slot(&p, b), Some(Slot::Live { len: 0, .. })));
        validate(&p, 1).unwrap();
    }

    #[test]
    fn max_record_fills_page_exactly() {
        let mut p = fresh(4096);
        let data = vec![7u8; max_record_len(4096)];
        assert!(insert(&mut p, &data).is_some());
        assert_eq!(free_space(&p), 0);
        assert!(insert(&mut p, b"").is_none());
        validate(&p, 1).unwrap();
    }

    #[test]
    fn update_grows_into_free_space() {
        let mut p = fresh(4096);
        let s = insert(&mut p, &[1u8; 100]).unwrap();
        assert!(update(&mut p, s, &[2u8; 200]));
        let Some(Slot::Live { offset, len }) = slot(&p, s) else { panic!() };
        assert_eq!(&p[offset..offset + len], &[2u8; 200][..]);
        validate(&p, 1).unwrap();
    }

    #[test]
    fn update_reclaims_abandoned_space() {
        let mut p = fresh(4096);
        let a = insert(&mut p, &[1u8; 1000]).unwrap();
        let b = insert(&mut p, &[2u8; 100]).unwrap();
        let c = insert(&mut p, &[3u8; 10]).unwrap();
        // Grow b repeatedly; each step abandons its previous allocation.
        for n in 101..1500 {
            assert!(update(&mut p, b, &vec![2u8; n]), "grow to {n}");
            validate(&p, 1).unwrap();
        }
        for (s, byte, len) in [(a, 1u8, 1000), (b, 2, 1499), (c, 3, 10)] {
            let Some(Slot::Live { offset, len: l }) = slot(&p, s) else { panic!() };
            assert_eq!(l, len);
            assert!(p[offset..offset + l].iter().all(|&x| x == byte));
        }
        assert!(!update(&mut p, b, &[2u8; 4000]));
    }

    #[test]
    fn moved_slot_forwards() {
        let mut p = fresh(4096);
        let s = insert(&mut p, b"abcdefgh").unwrap();
        let to = RecordId::new(9, 3);
        mark_moved(&mut p, s, to);
        assert_eq!(slot(&p, s), Some(Slot::Moved(to)));
        validate(&p, 1).unwrap();
    }

    #[test]
    fn detects_directory_damage() {
        let mut p = fresh(4096);
        insert(&mut p, b"one").unwrap();
        insert(&mut p, b"two").unwrap();
        // Point slot 1 below the heap start.
        put_u16(&mut p, PAGE_HEADER_LEN + SLOT_LEN, 20);
        assert!(validate(&p, 1).is_err());
    }
}
