//! Hardware abstraction layer.
//!
//! [`HalDriver`] is the complete set of primitives the runtime needs from a
//! backend. Everything above this layer (binding, executor, service) is
//! written against the trait; [`SimDevice`] is the reference backend.

pub mod kernels;
pub mod layout;
mod sim;

use thiserror::Error;

pub use crate::rcb::DmaDirection;
pub use kernels::KernelId;
pub use layout::{AddressMap, GridConfig, Region as MemRegion};
pub use sim::{CacheModel, SimConfig, SimDevice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaDescriptor {
    pub direction: DmaDirection,
    pub src: u64,
    pub dst: u64,
    pub length: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DmaHandle(pub u64);

/// A completion notification raised by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub id: u32,
    /// Linear index of the raising tile.
    pub source: u32,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HalError {
    #[error("address fault at {0:#x}")]
    AddressFault(u64),
    #[error("misaligned access at {0:#x}")]
    Misaligned(u64),
    #[error("DMA fault: {0}")]
    DmaFault(String),
    #[error("DMA queue busy on tile {0}")]
    DmaBusy(u32),
    #[error("unknown DMA handle {0}")]
    HandleFault(u64),
}

/// The primitive dispatch table every backend provides.
///
/// Addresses are absolute device addresses. Accesses outside the device's
/// address map fail with [`HalError::AddressFault`].
pub trait HalDriver {
    fn write32(&mut self, addr: u64, value: u32) -> Result<(), HalError>;
    fn read32(&mut self, addr: u64) -> Result<u32, HalError>;
    fn write_block(&mut self, addr: u64, data: &[u8]) -> Result<(), HalError>;
    fn initiate_dma(&mut self, desc: &DmaDescriptor) -> Result<DmaHandle, HalError>;
    fn wait_dma(&mut self, handle: DmaHandle) -> Result<(), HalError>;
    /// Returns `Ok(false)` once `timeout_us` has elapsed without
    /// `(value & mask) == expected`.
    fn poll_register_masked(
        &mut self,
        addr: u64,
        mask: u32,
        expected: u32,
        timeout_us: u32,
    ) -> Result<bool, HalError>;
    fn flush_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError>;
    fn invalidate_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError>;

    /// Host-side block read; defaults to a sequence of `read32`.
    fn read_block(&mut self, addr: u64, out: &mut [u8]) -> Result<(), HalError> {
        if !addr.is_multiple_of(4) {
            return Err(HalError::Misaligned(addr));
        }
        for (i, chunk) in out.chunks_mut(4).enumerate() {
            let word = self.read32(addr + 4 * i as u64)?.to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
        Ok(())
    }

    /// Current device timestamp in ticks. Backends without a clock report 0.
    fn now(&self) -> u64 {
        0
    }

    /// Blocks until the device raises its next interrupt. Returns `false`
    /// when nothing is outstanding that could ever raise one.
    fn wait_for_interrupt(&mut self) -> Result<bool, HalError> {
        Ok(false)
    }
}

impl<H: HalDriver + ?Sized> HalDriver for &mut H {
    fn write32(&mut self, addr: u64, value: u32) -> Result<(), HalError> {
        (**self).write32(addr, value)
    }
    fn read32(&mut self, addr: u64) -> Result<u32, HalError> {
        (**self).read32(addr)
    }
    fn write_block(&mut self, addr: u64, data: &[u8]) -> Result<(), HalError> {
        (**self).write_block(addr, data)
    }
    fn initiate_dma(&mut self, desc: &DmaDescriptor) -> Result<DmaHandle, HalError> {
        (**self).initiate_dma(desc)
    }
    fn wait_dma(&mut self, handle: DmaHandle) -> Result<(), HalError> {
        (**self).wait_dma(handle)
    }
    fn poll_register_masked(
        &mut self,
        addr: u64,
        mask: u32,
        expected: u32,
        timeout_us: u32,
    ) -> Result<bool, HalError> {
        (**self).poll_register_masked(addr, mask, expected, timeout_us)
    }
    fn flush_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError> {
        (**self).flush_cache(addr, len)
    }
    fn invalidate_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError> {
        (**self).invalidate_cache(addr, len)
    }
    fn read_block(&mut self, addr: u64, out: &mut [u8]) -> Result<(), HalError> {
        (**self).read_block(addr, out)
    }
    fn now(&self) -> u64 {
        (**self).now()
    }
    fn wait_for_interrupt(&mut self) -> Result<bool, HalError> {
        (**self).wait_for_interrupt()
    }
}
