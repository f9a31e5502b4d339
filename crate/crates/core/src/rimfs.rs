//! Read-only in-memory file system and the aligned region allocator.
//!
//! An image is a flat byte blob: a 16-byte header, a table of 12-byte
//! entries, then the file payloads. Every payload starts on an alignment
//! boundary, so a lookup is just `base + entry.offset` and the address can be
//! handed straight to a DMA engine.
//!
//! ```text
//! magic u32 "RMFS" | version u16 | reserved u16 | file_count u32 | alignment u32
//! file_count x { file_id u32 | offset u32 | size u32 }
//! <pad to alignment> payload0 <pad> payload1 <pad> ...
//! ```

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub const RIMFS_MAGIC: u32 = 0x5346_4D52;
pub const RIMFS_VERSION: u16 = 1;
pub const DEFAULT_ALIGNMENT: u32 = 64;
const HEADER_LEN: usize = 16;
const ENTRY_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("duplicate file id {0}")]
    DuplicateId(u32),
    #[error("alignment {0} is not a power of two ≥ 4")]
    Alignment(u32),
    #[error("image exceeds the 4 GiB offset range")]
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MountError {
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("image truncated")]
    Truncated,
    #[error("bad alignment {0}")]
    Alignment(u32),
    #[error("entry for file {0} is misaligned or out of bounds")]
    BadEntry(u32),
    #[error("duplicate file id {0}")]
    DuplicateId(u32),
    #[error("files {0} and {1} overlap")]
    Overlap(u32, u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("file {0} not found")]
pub struct NotFound(pub u32);

fn align_up(v: usize, a: usize) -> usize {
    v.div_ceil(a) * a
}

pub fn build_image(files: &[(u32, Vec<u8>)]) -> Result<Vec<u8>, BuildError> {
    build_image_aligned(files, DEFAULT_ALIGNMENT)
}

/// Lays out `files` in the given order.
pub fn build_image_aligned(files: &[(u32, Vec<u8>)], alignment: u32) -> Result<Vec<u8>, BuildError> {
    if !alignment.is_power_of_two() || alignment < 4 {
        return Err(BuildError::Alignment(alignment));
    }
    let align = alignment as usize;
    let mut seen = std::collections::HashSet::new();
    for (id, _) in files {
        if !seen.insert(*id) {
            return Err(BuildError::DuplicateId(*id));
        }
    }

    let mut offset = align_up(HEADER_LEN + ENTRY_LEN * files.len(), align);
    let mut entries = Vec::with_capacity(files.len());
    for (id, data) in files {
        entries.push((*id, offset, data.len()));
        offset = align_up(offset + data.len(), align);
    }
    if offset > u32::MAX as usize {
        return Err(BuildError::TooLarge);
    }

    let mut out = Vec::with_capacity(offset);
    out.extend_from_slice(&RIMFS_MAGIC.to_le_bytes());
    out.extend_from_slice(&RIMFS_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(files.len() as u32).to_le_bytes());
    out.extend_from_slice(&alignment.to_le_bytes());
    for &(id, off, size) in &entries {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(off as u32).to_le_bytes());
        out.extend_from_slice(&(size as u32).to_le_bytes());
    }
    for ((_, data), &(_, off, _)) in files.iter().zip(&entries) {
        out.resize(off, 0);
        out.extend_from_slice(data);
    }
    out.resize(offset, 0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileEntry {
    pub file_id: u32,
    pub offset: u32,
    pub size: u32,
}

/// A mounted image. Borrows or owns the backing bytes; never copies them.
#[derive(Debug)]
pub struct RimfsImage<B: AsRef<[u8]> = Vec<u8>> {
    buf: B,
    base: u64,
    alignment: u32,
    entries: Vec<FileEntry>,
    index: HashMap<u32, usize>,
    copied: Cell<u64>,
}

pub fn mount<B: AsRef<[u8]>>(buf: B, base: u64) -> Result<RimfsImage<B>, MountError> {
    RimfsImage::mount(buf, base)
}

impl<B: AsRef<[u8]>> RimfsImage<B> {
    pub fn mount(buf: B, base: u64) -> Result<Self, MountError> {
        let bytes = buf.as_ref();
        if bytes.len() < HEADER_LEN {
            return Err(MountError::Truncated);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let magic = u32_at(0);
        if magic != RIMFS_MAGIC {
            return Err(MountError::Magic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RIMFS_VERSION {
            return Err(MountError::Version(version));
        }
        let count = u32_at(8) as usize;
        let alignment = u32_at(12);
        if !alignment.is_power_of_two() || alignment < 4 {
            return Err(MountError::Alignment(alignment));
        }
        let table_end = count
            .checked_mul(ENTRY_LEN)
            .and_then(|t| t.checked_add(HEADER_LEN))
            .ok_or(MountError::Truncated)?;
        if table_end > bytes.len() {
            return Err(MountError::Truncated);
        }

        let mut entries = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        for i in 0..count {
            let o = HEADER_LEN + i * ENTRY_LEN;
            let e = FileEntry {
                file_id: u32_at(o),
                offset: u32_at(o + 4),
                size: u32_at(o + 8),
            };
            let end = e.offset as usize + e.size as usize;
            if !e.offset.is_multiple_of(alignment) || (e.offset as usize) < table_end || end > bytes.len() {
                return Err(MountError::BadEntry(e.file_id));
            }
            if index.insert(e.file_id, i).is_some() {
                return Err(MountError::DuplicateId(e.file_id));
            }
            entries.push(e);
        }

        let mut by_offset: Vec<&FileEntry> = entries.iter().collect();
        by_offset.sort_by_key(|e| e.offset);
        for w in by_offset.windows(2) {
            if w[0].offset as u64 + w[0].size as u64 > w[1].offset as u64 {
                return Err(MountError::Overlap(w[0].file_id, w[1].file_id));
            }
        }

        Ok(Self {
            buf,
            base,
            alignment,
            entries,
            index,
            copied: Cell::new(0),
        })
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn alignment(&self) -> u32 {
        self.alignment
    }

    pub fn len(&self) -> usize {
        self.buf.as_ref().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FileEntry] {
        &self.entries
    }

    pub fn bytes(&self) -> &[u8] {
        self.buf.as_ref()
    }

    pub fn entry(&self, file_id: u32) -> Result<&FileEntry, NotFound> {
        self.index
            .get(&file_id)
            .map(|&i| &self.entries[i])
            .ok_or(NotFound(file_id))
    }

    /// Absolute address and size of a file.
    pub fn lookup(&self, file_id: u32) -> Result<(u64, u32), NotFound> {
        let e = self.entry(file_id)?;
        Ok((self.base + e.offset as u64, e.size))
    }

    /// Borrowed view of a payload.
    pub fn file(&self, file_id: u32) -> Result<&[u8], NotFound> {
        let e = self.entry(file_id)?;
        let start = e.offset as usize;
        Ok(&self.buf.as_ref()[start..start + e.size as usize])
    }

    /// Owned copy of a payload. This is the only path that copies, and it
    /// is counted by [`RimfsImage::copied_bytes`].
    pub fn read_to_vec(&self, file_id: u32) -> Result<Vec<u8>, NotFound> {
        let data = self.file(file_id)?.to_vec();
        self.copied.set(self.copied.get() + data.len() as u64);
        Ok(data)
    }

    pub fn copied_bytes(&self) -> u64 {
        self.copied.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Free,
    Receive,
    Compute,
    Send,
}

impl Stage {
    pub fn next(self) -> Stage {
        match self {
            Stage::Free => Stage::Receive,
            Stage::Receive => Stage::Compute,
            Stage::Compute => Stage::Send,
            Stage::Send => Stage::Free,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub id: RegionId,
    pub address: u64,
    pub size: u64,
    pub alignment: u64,
    pub stage: Stage,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.address + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("out of memory: {requested} bytes at alignment {alignment}")]
    OutOfMemory { requested: u64, alignment: u64 },
    #[error("invalid request: size {size}, alignment {alignment}")]
    InvalidRequest { size: u64, alignment: u64 },
    #[error("illegal stage transition {from:?} -> {to:?}")]
    StageError { from: Stage, to: Stage },
    #[error("unknown region {0:?}")]
    UnknownRegion(RegionId),
}

/// First-fit free-list arena over a fixed address range.
#[derive(Debug, Clone)]
pub struct RegionAllocator {
    base: u64,
    size: u64,
    /// start -> length, non-adjacent.
    free: BTreeMap<u64, u64>,
    live: BTreeMap<RegionId, Region>,
    next_id: u32,
}

impl RegionAllocator {
    pub fn new(base: u64, size: u64) -> Self {
        let mut free = BTreeMap::new();
        if size > 0 {
            free.insert(base, size);
        }
        Self {
            base,
            size,
            free,
            live: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn capacity(&self) -> u64 {
        self.size
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.values().map(|r| r.size).sum()
    }

    pub fn live(&self) -> impl Iterator<Item = &Region> {
        self.live.values()
    }

    pub fn get(&self, id: RegionId) -> Option<&Region> {
        self.live.get(&id)
    }

    pub fn alloc(&mut self, size: u64, alignment: u64) -> Result<Region, AllocError> {
        if size == 0 || !alignment.is_power_of_two() {
            return Err(AllocError::InvalidRequest { size, alignment });
        }
        let fit = self.free.iter().find_map(|(&start, &len)| {
            let addr = start.checked_add(alignment - 1)? & !(alignment - 1);
            (addr + size <= start + len).then_some((start, len, addr))
        });
        let (start, len, addr) = fit.ok_or(AllocError::OutOfMemory {
            requested: size,
            alignment,
        })?;
        self.free.remove(&start);
        if addr > start {
            self.free.insert(start, addr - start);
        }
        let end = addr + size;
        if end < start + len {
            self.free.insert(end, start + len - end);
        }
        let region = Region {
            id: RegionId(self.next_id),
            address: addr,
            size,
            alignment,
            stage: Stage::Free,
        };
        self.next_id += 1;
        self.live.insert(region.id, region);
        Ok(region)
    }

    /// Moves a region to `to`, which must be the stage immediately after its
    /// current one.
    pub fn advance_stage(&mut self, id: RegionId, to: Stage) -> Result<Region, AllocError> {
        let r = self.live.get_mut(&id).ok_or(AllocError::UnknownRegion(id))?;
        if r.stage.next() != to {
            return Err(AllocError::StageError { from: r.stage, to });
        }
        r.stage = to;
        Ok(*r)
    }

    pub fn release(&mut self, id: RegionId) -> Result<(), AllocError> {
        let r = self.live.remove(&id).ok_or(AllocError::UnknownRegion(id))?;
        let (mut start, mut len) = (r.address, r.size);
        if let Some((&ps, &pl)) = self.free.range(..start).next_back() {
            if ps + pl == start {
                self.free.remove(&ps);
                start = ps;
                len += pl;
            }
        }
        if let Some(&nl) = self.free.get(&(start + len)) {
            self.free.remove(&(start + len));
            len += nl;
        }
        self.free.insert(start, len);
        Ok(())
    }

    pub fn release_all(&mut self) {
        let ids: Vec<_> = self.live.keys().copied().collect();
        for id in ids {
            self.release(id).expect("live region");
        }
    }
}
