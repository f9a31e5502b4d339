use std::collections::BTreeMap;
use std::sync::mpsc::Sender;

use super::kernels::{self, KernelId, KernelLayout};
use super::layout::*;
use super::{DmaDescriptor, DmaDirection, DmaHandle, Event, HalDriver, HalError};

const CACHE_LINE: u64 = 64;
const REG_WORDS: usize = (param_offset(PARAM_COUNT) / 4) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheModel {
    /// Host and DMA share one view of global memory.
    #[default]
    Off,
    /// Host writes stay in a private view until flushed; DMA writes stay
    /// invisible to the host until invalidated.
    StaleUntilFlush,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub grid: GridConfig,
    pub local_mem_size: u32,
    pub global_mem_size: u64,
    pub dma_setup_ticks: u64,
    pub dma_bytes_per_tick: u64,
    pub cache_model: CacheModel,
    pub reg_access_ticks: u64,
    pub poll_interval_ticks: u64,
    pub ticks_per_us: u64,
    pub kernel_launch_ticks: u64,
    /// Scalar operations a tile retires per tick.
    pub kernel_lanes: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            local_mem_size: 65536,
            global_mem_size: 64 << 20,
            dma_setup_ticks: 100,
            dma_bytes_per_tick: 64,
            cache_model: CacheModel::Off,
            reg_access_ticks: 1,
            poll_interval_ticks: 1,
            ticks_per_us: 1,
            kernel_launch_ticks: 8,
            kernel_lanes: 16,
        }
    }
}

impl SimConfig {
    pub fn address_map(&self) -> AddressMap {
        AddressMap {
            grid: self.grid,
            local_mem_size: self.local_mem_size,
            global_mem_size: self.global_mem_size,
        }
    }

    pub fn dma_cost(&self, len: u64) -> u64 {
        self.dma_setup_ticks + len.div_ceil(self.dma_bytes_per_tick.max(1))
    }

    pub fn kernel_cost(&self, work: u64) -> u64 {
        self.kernel_launch_ticks.max(1) + work.div_ceil(self.kernel_lanes.max(1))
    }
}

struct Running {
    kernel: KernelId,
    params: [u32; PARAM_COUNT],
    layout: KernelLayout,
    done_at: u64,
}

struct Tile {
    regs: [u32; REG_WORDS],
    local: Vec<u8>,
    running: Option<Running>,
    dma: Option<DmaHandle>,
}

struct PendingDma {
    tile: u32,
    dst: u64,
    data: Vec<u8>,
    done_at: u64,
}

/// Register-mapped tile-array accelerator, stepped on a virtual clock.
///
/// All activity is synchronous: kernels complete when the clock passes
/// their completion tick, which only happens inside HAL calls. Identical call
/// sequences therefore produce identical clocks and memory contents.
pub struct SimDevice {
    config: SimConfig,
    map: AddressMap,
    tiles: Vec<Tile>,
    dram: Vec<u8>,
    /// Host-side view under [`CacheModel::StaleUntilFlush`].
    host: Option<Vec<u8>>,
    dirty: Vec<u64>,
    clock: u64,
    dmas: BTreeMap<u64, PendingDma>,
    next_handle: u64,
    sink: Option<Sender<Event>>,
    events_raised: u64,
}

impl SimDevice {
    pub fn new(config: SimConfig) -> Self {
        let map = config.address_map();
        let tiles = (0..config.grid.tiles())
            .map(|_| Tile {
                regs: [0; REG_WORDS],
                local: vec![0; config.local_mem_size as usize],
                running: None,
                dma: None,
            })
            .collect();
        let size = config.global_mem_size as usize;
        let (host, dirty) = match config.cache_model {
            CacheModel::Off => (None, Vec::new()),
            CacheModel::StaleUntilFlush => {
                let lines = config.global_mem_size.div_ceil(CACHE_LINE);
                (Some(vec![0; size]), vec![0; lines.div_ceil(64) as usize])
            }
        };
        Self {
            config,
            map,
            tiles,
            dram: vec![0; size],
            host,
            dirty,
            clock: 0,
            dmas: BTreeMap::new(),
            next_handle: 1,
            sink: None,
            events_raised: 0,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn address_map(&self) -> AddressMap {
        self.map
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Routes kernel completion events into `sink`.
    pub fn attach_event_sink(&mut self, sink: Sender<Event>) {
        self.sink = Some(sink);
    }

    pub fn events_raised(&self) -> u64 {
        self.events_raised
    }

    /// Global memory as seen by the DMA engines.
    pub fn dram(&self) -> &[u8] {
        &self.dram
    }

    pub fn tile_local(&self, tile: u32) -> &[u8] {
        &self.tiles[tile as usize].local
    }

    pub fn tile_base(&self, col: u16, row: u16) -> u64 {
        self.config.grid.tile_base(col, row)
    }

    /// Lets `ticks` pass with no host activity.
    pub fn idle(&mut self, ticks: u64) {
        self.advance_to(self.clock + ticks);
    }

    fn advance_to(&mut self, tick: u64) {
        if tick > self.clock {
            self.clock = tick;
        }
        self.retire_kernels();
    }

    fn next_kernel_completion(&self) -> Option<u64> {
        self.tiles.iter().filter_map(|t| t.running.as_ref().map(|r| r.done_at)).min()
    }

    fn retire_kernels(&mut self) {
        loop {
            let next = self
                .tiles
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.running.as_ref().map(|r| (r.done_at, i)))
                .filter(|&(done, _)| done <= self.clock)
                .min();
            let Some((done_at, idx)) = next else { break };
            let tile = &mut self.tiles[idx];
            let run = tile.running.take().unwrap();
            kernels::run(run.kernel, &run.params, &run.layout, &mut tile.local);
            tile.regs[(REG_STATUS / 4) as usize] = STATUS_DONE;
            self.events_raised += 1;
            if let Some(sink) = &self.sink {
                let _ = sink.send(Event {
                    id: COMPLETION_EVENT_BASE + idx as u32,
                    source: idx as u32,
                    tick: done_at,
                });
            }
        }
    }

    fn launch(&mut self, tile: u32) {
        let now = self.clock;
        let cost_of = |work| self.config.kernel_cost(work);
        let local_size = self.config.local_mem_size;
        let t = &mut self.tiles[tile as usize];
        const STATUS: usize = (REG_STATUS / 4) as usize;
        if t.running.is_some() {
            t.regs[STATUS] |= STATUS_ERROR;
            return;
        }
        let kid = t.regs[(REG_KERNEL_ID / 4) as usize];
        let mut params = [0u32; PARAM_COUNT];
        params.copy_from_slice(&t.regs[(REG_PARAM0 / 4) as usize..]);
        let prepared = KernelId::from_u32(kid).and_then(|kernel| {
            kernels::layout(kernel, &params[..kernel.param_count()], local_size)
                .ok()
                .map(|layout| (kernel, layout))
        });
        let Some((kernel, layout)) = prepared else {
            t.regs[STATUS] = STATUS_ERROR;
            return;
        };
        t.regs[STATUS] = STATUS_BUSY;
        let done_at = now + cost_of(layout.work);
        t.running = Some(Running {
            kernel,
            params,
            layout,
            done_at,
        });
    }

    fn host_view(&self) -> &[u8] {
        self.host.as_deref().unwrap_or(&self.dram)
    }

    fn mark_dirty(&mut self, offset: u64, len: u64) {
        if self.host.is_none() || len == 0 {
            return;
        }
        for line in offset / CACHE_LINE..=(offset + len - 1) / CACHE_LINE {
            self.dirty[(line / 64) as usize] |= 1 << (line % 64);
        }
    }

    fn host_write(&mut self, offset: u64, data: &[u8]) {
        let range = offset as usize..offset as usize + data.len();
        match &mut self.host {
            Some(h) => h[range].copy_from_slice(data),
            None => self.dram[range].copy_from_slice(data),
        }
        self.mark_dirty(offset, data.len() as u64);
    }

    fn line_span(&self, offset: u64, len: u64) -> std::ops::Range<u64> {
        if len == 0 {
            return 0..0;
        }
        let last = ((offset + len - 1) / CACHE_LINE + 1).min(self.config.global_mem_size.div_ceil(CACHE_LINE));
        offset / CACHE_LINE..last
    }

    fn line_bytes(&self, line: u64) -> std::ops::Range<usize> {
        let start = line * CACHE_LINE;
        let end = (start + CACHE_LINE).min(self.config.global_mem_size);
        start as usize..end as usize
    }

    fn global_range(&self, addr: u64, len: u64) -> Result<u64, HalError> {
        match self.map.decode(addr, len) {
            Some(Region::Global { offset }) => Ok(offset),
            _ => Err(HalError::AddressFault(addr)),
        }
    }

    fn peek32(&self, addr: u64) -> Result<u32, HalError> {
        if !addr.is_multiple_of(4) {
            return Err(HalError::Misaligned(addr));
        }
        let word = |mem: &[u8], off: usize| u32::from_le_bytes(mem[off..off + 4].try_into().unwrap());
        match self.map.decode(addr, 4) {
            Some(Region::Register { tile, offset }) => {
                Ok(self.tiles[tile as usize].regs[(offset / 4) as usize])
            }
            Some(Region::Local { tile, offset }) => {
                Ok(word(&self.tiles[tile as usize].local, offset as usize))
            }
            Some(Region::Global { offset }) => Ok(word(self.host_view(), offset as usize)),
            None => Err(HalError::AddressFault(addr)),
        }
    }

    fn dma_endpoint(&self, addr: u64, len: u64) -> Result<Region, HalError> {
        self.map.decode(addr, len).ok_or_else(|| {
            HalError::DmaFault(format!("range {addr:#x}+{len} outside global or tile-local memory"))
        })
    }

    fn read_region(&self, region: Region, len: usize) -> Vec<u8> {
        match region {
            Region::Global { offset } => self.dram[offset as usize..offset as usize + len].to_vec(),
            Region::Local { tile, offset } => {
                self.tiles[tile as usize].local[offset as usize..offset as usize + len].to_vec()
            }
            Region::Register { .. } => unreachable!("DMA endpoints are memory"),
        }
    }
}

impl HalDriver for SimDevice {
    fn write32(&mut self, addr: u64, value: u32) -> Result<(), HalError> {
        if !addr.is_multiple_of(4) {
            return Err(HalError::Misaligned(addr));
        }
        match self.map.decode(addr, 4) {
            Some(Region::Register { tile, offset }) => match offset {
                REG_STATUS => {}
                REG_CTRL => {
                    self.tiles[tile as usize].regs[0] = value & !CTRL_START;
                    if value & CTRL_START != 0 {
                        self.launch(tile);
                    }
                }
                _ => self.tiles[tile as usize].regs[(offset / 4) as usize] = value,
            },
            Some(Region::Local { tile, offset }) => {
                let o = offset as usize;
                self.tiles[tile as usize].local[o..o + 4].copy_from_slice(&value.to_le_bytes());
            }
            Some(Region::Global { offset }) => self.host_write(offset, &value.to_le_bytes()),
            None => return Err(HalError::AddressFault(addr)),
        }
        let t = self.clock + self.config.reg_access_ticks;
        self.advance_to(t);
        Ok(())
    }

    fn read32(&mut self, addr: u64) -> Result<u32, HalError> {
        let v = self.peek32(addr)?;
        let t = self.clock + self.config.reg_access_ticks;
        self.advance_to(t);
        Ok(v)
    }

    fn write_block(&mut self, addr: u64, data: &[u8]) -> Result<(), HalError> {
        let len = data.len() as u64;
        match self.map.decode(addr, len) {
            Some(Region::Global { offset }) => self.host_write(offset, data),
            Some(Region::Local { tile, offset }) => {
                let o = offset as usize;
                self.tiles[tile as usize].local[o..o + data.len()].copy_from_slice(data);
            }
            _ => {
                // Register windows take a word-aligned burst of write32s.
                if !addr.is_multiple_of(4) || !data.len().is_multiple_of(4) {
                    return Err(HalError::AddressFault(addr));
                }
                for (i, w) in data.chunks_exact(4).enumerate() {
                    let a = addr + 4 * i as u64;
                    if !matches!(self.map.decode(a, 4), Some(Region::Register { .. })) {
                        return Err(HalError::AddressFault(a));
                    }
                    self.write32(a, u32::from_le_bytes(w.try_into().unwrap()))?;
                }
                return Ok(());
            }
        }
        let t = self.clock + self.config.reg_access_ticks;
        self.advance_to(t);
        Ok(())
    }

    fn read_block(&mut self, addr: u64, out: &mut [u8]) -> Result<(), HalError> {
        let len = out.len() as u64;
        match self.map.decode(addr, len) {
            Some(Region::Global { offset }) => {
                let o = offset as usize;
                out.copy_from_slice(&self.host_view()[o..o + out.len()]);
            }
            Some(Region::Local { tile, offset }) => {
                let o = offset as usize;
                out.copy_from_slice(&self.tiles[tile as usize].local[o..o + out.len()]);
            }
            Some(Region::Register { .. }) if addr.is_multiple_of(4) && out.len() == 4 => {
                out.copy_from_slice(&self.peek32(addr)?.to_le_bytes());
            }
            _ => return Err(HalError::AddressFault(addr)),
        }
        let t = self.clock + self.config.reg_access_ticks;
        self.advance_to(t);
        Ok(())
    }

    fn initiate_dma(&mut self, desc: &DmaDescriptor) -> Result<DmaHandle, HalError> {
        let len = desc.length as u64;
        if len == 0 {
            return Err(HalError::DmaFault("zero-length transfer".into()));
        }
        let src = self.dma_endpoint(desc.src, len)?;
        let dst = self.dma_endpoint(desc.dst, len)?;
        let tile = match (desc.direction, src, dst) {
            (DmaDirection::ToDevice, Region::Global { .. }, Region::Local { tile, .. }) => tile,
            (DmaDirection::FromDevice, Region::Local { tile, .. }, Region::Global { .. }) => tile,
            _ => {
                return Err(HalError::DmaFault(format!(
                    "{:?} transfer {:#x} -> {:#x} does not connect global memory and a tile",
                    desc.direction, desc.src, desc.dst
                )))
            }
        };
        if self.tiles[tile as usize].dma.is_some() {
            return Err(HalError::DmaBusy(tile));
        }
        let data = self.read_region(src, len as usize);
        let handle = DmaHandle(self.next_handle);
        self.next_handle += 1;
        self.tiles[tile as usize].dma = Some(handle);
        self.dmas.insert(
            handle.0,
            PendingDma {
                tile,
                dst: desc.dst,
                data,
                done_at: self.clock + self.config.dma_cost(len),
            },
        );
        Ok(handle)
    }

    fn wait_dma(&mut self, handle: DmaHandle) -> Result<(), HalError> {
        let dma = self.dmas.remove(&handle.0).ok_or(HalError::HandleFault(handle.0))?;
        self.advance_to(dma.done_at);
        match self.map.decode(dma.dst, dma.data.len() as u64) {
            Some(Region::Global { offset }) => {
                let o = offset as usize;
                self.dram[o..o + dma.data.len()].copy_from_slice(&dma.data);
            }
            Some(Region::Local { tile, offset }) => {
                let o = offset as usize;
                self.tiles[tile as usize].local[o..o + dma.data.len()].copy_from_slice(&dma.data);
            }
            _ => unreachable!("validated at initiation"),
        }
        self.tiles[dma.tile as usize].dma = None;
        Ok(())
    }

    fn poll_register_masked(
        &mut self,
        addr: u64,
        mask: u32,
        expected: u32,
        timeout_us: u32,
    ) -> Result<bool, HalError> {
        let start = self.clock;
        let deadline = start + timeout_us as u64 * self.config.ticks_per_us;
        let interval = self.config.poll_interval_ticks.max(1);
        loop {
            if self.peek32(addr)? & mask == expected {
                let t = self.clock + self.config.reg_access_ticks;
                self.advance_to(t);
                return Ok(true);
            }
            // The value can only change when a kernel retires, so skip to the
            // first poll instant at or after the next completion.
            let next_poll = self.clock + interval;
            let target = match self.next_kernel_completion() {
                Some(done) if done > next_poll => {
                    start + (done - start).div_ceil(interval) * interval
                }
                Some(_) => next_poll,
                None => u64::MAX,
            };
            if target > deadline {
                self.advance_to(deadline);
                return Ok(false);
            }
            self.advance_to(target);
        }
    }

    fn flush_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError> {
        let offset = self.global_range(addr, len)?;
        if let Some(host) = &self.host {
            for line in self.line_span(offset, len) {
                let (word, bit) = ((line / 64) as usize, line % 64);
                if self.dirty[word] & (1 << bit) != 0 {
                    let r = self.line_bytes(line);
                    self.dram[r.clone()].copy_from_slice(&host[r]);
                    self.dirty[word] &= !(1 << bit);
                }
            }
        }
        let t = self.clock + self.config.reg_access_ticks;
        self.advance_to(t);
        Ok(())
    }

    fn invalidate_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError> {
        let offset = self.global_range(addr, len)?;
        let span = self.line_span(offset, len);
        let ranges: Vec<_> = span.map(|line| (line, self.line_bytes(line))).collect();
        if let Some(host) = self.host.as_mut() {
            for (line, r) in ranges {
                host[r.clone()].copy_from_slice(&self.dram[r]);
                self.dirty[(line / 64) as usize] &= !(1 << (line % 64));
            }
        }
        let t = self.clock + self.config.reg_access_ticks;
        self.advance_to(t);
        Ok(())
    }

    fn now(&self) -> u64 {
        self.clock
    }

    fn wait_for_interrupt(&mut self) -> Result<bool, HalError> {
        match self.next_kernel_completion() {
            Some(t) => {
                self.advance_to(t);
                Ok(true)
            }
            None => Ok(false),
        }
    }
}
