//! Device address map.
//!
//! ```text
//! 0x1000_0000 + tile_index * 0x2_0000   tile window
//!     +0x00 CTRL  +0x04 STATUS  +0x08 KERNEL_ID  +0x10..+0x2C PARAM0..7
//!     +0x1000                           tile-local memory
//! 0x8000_0000                           global memory (DRAM)
//! ```
//! where `tile_index = row * cols + col`.

pub const TILE_REGION_BASE: u64 = 0x1000_0000;
pub const TILE_STRIDE: u64 = 0x2_0000;
pub const GLOBAL_BASE: u64 = 0x8000_0000;

pub const REG_CTRL: u32 = 0x00;
pub const REG_STATUS: u32 = 0x04;
pub const REG_KERNEL_ID: u32 = 0x08;
pub const REG_PARAM0: u32 = 0x10;
pub const PARAM_COUNT: usize = 8;
pub const LOCAL_MEM_OFFSET: u32 = 0x1000;

pub const CTRL_START: u32 = 1 << 0;
pub const STATUS_DONE: u32 = 1 << 0;
pub const STATUS_BUSY: u32 = 1 << 1;
pub const STATUS_ERROR: u32 = 1 << 2;

/// Completion events carry `COMPLETION_EVENT_BASE + tile_index`.
pub const COMPLETION_EVENT_BASE: u32 = 0x100;

pub const fn param_offset(i: usize) -> u32 {
    REG_PARAM0 + 4 * i as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub cols: u16,
    pub rows: u16,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cols: 4, rows: 7 }
    }
}

impl GridConfig {
    pub fn tiles(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn contains(&self, col: u16, row: u16) -> bool {
        col < self.cols && row < self.rows
    }

    pub fn tile_index(&self, col: u16, row: u16) -> u32 {
        row as u32 * self.cols as u32 + col as u32
    }

    pub fn tile_base(&self, col: u16, row: u16) -> u64 {
        TILE_REGION_BASE + self.tile_index(col, row) as u64 * TILE_STRIDE
    }

    pub fn completion_event(&self, col: u16, row: u16) -> u32 {
        COMPLETION_EVENT_BASE + self.tile_index(col, row)
    }
}

/// What a device address decodes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Register { tile: u32, offset: u32 },
    Local { tile: u32, offset: u32 },
    Global { offset: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressMap {
    pub grid: GridConfig,
    pub local_mem_size: u32,
    pub global_mem_size: u64,
}

impl AddressMap {
    /// Decodes `addr`, requiring `len` bytes to stay inside a single region.
    pub fn decode(&self, addr: u64, len: u64) -> Option<Region> {
        let end = addr.checked_add(len)?;
        if addr >= GLOBAL_BASE {
            let offset = addr - GLOBAL_BASE;
            return (end - GLOBAL_BASE <= self.global_mem_size).then_some(Region::Global { offset });
        }
        if addr < TILE_REGION_BASE {
            return None;
        }
        let tile = (addr - TILE_REGION_BASE) / TILE_STRIDE;
        if tile >= self.grid.tiles() as u64 {
            return None;
        }
        let offset = ((addr - TILE_REGION_BASE) % TILE_STRIDE) as u32;
        let tile = tile as u32;
        let end_off = offset as u64 + len;
        let reg_end = param_offset(PARAM_COUNT) as u64;
        if end_off <= reg_end && offset != 0x0C && len <= 4 {
            return Some(Region::Register { tile, offset });
        }
        if offset >= LOCAL_MEM_OFFSET && end_off <= LOCAL_MEM_OFFSET as u64 + self.local_mem_size as u64 {
            return Some(Region::Local {
                tile,
                offset: offset - LOCAL_MEM_OFFSET,
            });
        }
        None
    }
}
