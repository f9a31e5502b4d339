//! Fetch, decode and dispatch of resolved control blocks.
//!
//! The executor knows nothing about kernels or tensors. Each operation maps
//! onto one HAL primitive; the order in the block is the order on the device.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::binding::ResolvedRcb;
use crate::hal::{DmaDescriptor, DmaDirection, HalDriver, HalError};
use crate::net::events::{EventDispatcher, WaitError};
use crate::rcb::{AddrRef, Op, OpCode};

/// Where an operation's time is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Input,
    Compute,
    Output,
    Control,
}

impl Phase {
    fn of(op: &Op) -> Self {
        match op {
            Op::DmaTrigger { direction: DmaDirection::ToDevice, .. } => Phase::Input,
            Op::DmaTrigger { direction: DmaDirection::FromDevice, .. } => Phase::Output,
            Op::PollMask { .. } | Op::WaitEvent { .. } => Phase::Compute,
            _ => Phase::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    /// Position of the block in its pipeline.
    pub rcb: usize,
    pub index: usize,
    pub opcode: OpCode,
    pub addrs: Vec<u64>,
    pub ok: bool,
    pub start: u64,
    pub end: u64,
    pub phase: Phase,
}

impl fmt::Display for OpRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} {}", self.rcb, self.index, self.opcode.name())?;
        if self.addrs.is_empty() {
            f.write_str(" -")?;
        }
        for (i, a) in self.addrs.iter().enumerate() {
            write!(f, "{}{:#x}", if i == 0 { " " } else { "," }, a)?;
        }
        write!(f, " {} {}", if self.ok { "OK" } else { "ERR" }, self.end)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTicks {
    pub input: u64,
    pub compute: u64,
    pub output: u64,
    pub control: u64,
}

impl StageTicks {
    pub fn total(&self) -> u64 {
        self.input + self.compute + self.output + self.control
    }
}

impl std::ops::AddAssign for StageTicks {
    fn add_assign(&mut self, o: Self) {
        self.input += o.input;
        self.compute += o.compute;
        self.output += o.output;
        self.control += o.control;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecTrace {
    pub records: Vec<OpRecord>,
    /// Values captured by REG_READ, keyed by slot.
    pub captures: BTreeMap<u32, u32>,
}

impl ExecTrace {
    pub fn stage_ticks(&self) -> StageTicks {
        let mut s = StageTicks::default();
        for r in &self.records {
            let d = r.end - r.start;
            match r.phase {
                Phase::Input => s.input += d,
                Phase::Compute => s.compute += d,
                Phase::Output => s.output += d,
                Phase::Control => s.control += d,
            }
        }
        s
    }

    /// One line per operation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn extend(&mut self, other: ExecTrace) {
        self.records.extend(other.records);
        self.captures.extend(other.captures);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecErrorKind {
    #[error("poll on {addr:#x} timed out")]
    Timeout { addr: u64 },
    #[error(transparent)]
    Hal(#[from] HalError),
    #[error("event {0:#x} never arrived")]
    EventStarved(u32),
    #[error("dependency on block {0} which has not run")]
    Dependency(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("block {rcb} op {op_index}: {kind}")]
pub struct ExecError {
    pub rcb: usize,
    pub op_index: usize,
    pub kind: ExecErrorKind,
    /// Everything executed up to and including the failing operation.
    pub trace: ExecTrace,
}

fn abs(a: &AddrRef) -> u64 {
    a.absolute().expect("resolved blocks carry only absolute addresses")
}

fn dispatch<H: HalDriver + ?Sized>(
    op: &Op,
    hal: &mut H,
    events: &mut EventDispatcher,
    captures: &mut BTreeMap<u32, u32>,
) -> Result<(), ExecErrorKind> {
    match op {
        Op::RegWrite { addr, value } => hal.write32(abs(addr), *value)?,
        Op::RegRead { addr, capture_slot } => {
            let v = hal.read32(abs(addr))?;
            captures.insert(*capture_slot, v);
        }
        Op::WriteBlock { addr, data } => hal.write_block(abs(addr), data)?,
        Op::DmaTrigger { direction, src, dst, length } => {
            let h = hal.initiate_dma(&DmaDescriptor {
                direction: *direction,
                src: abs(src),
                dst: abs(dst),
                length: *length,
            })?;
            hal.wait_dma(h)?;
        }
        Op::PollMask { addr, mask, expected, timeout_us } => {
            let a = abs(addr);
            if !hal.poll_register_masked(a, *mask, *expected, *timeout_us)? {
                return Err(ExecErrorKind::Timeout { addr: a });
            }
        }
        Op::CacheFlush { addr, length } => hal.flush_cache(abs(addr), *length as u64)?,
        Op::CacheInvalidate { addr, length } => hal.invalidate_cache(abs(addr), *length as u64)?,
        Op::WaitEvent { event_id } => match events.wait_for(*event_id, hal) {
            Ok(_) => {}
            Err(WaitError::Starved(id)) => return Err(ExecErrorKind::EventStarved(id)),
            Err(WaitError::Hal(e)) => return Err(e.into()),
        },
    }
    Ok(())
}

/// Runs every operation of `rcb` in order, stopping at the first failure.
/// `position` labels the trace records.
pub fn execute<H: HalDriver + ?Sized>(
    rcb: &ResolvedRcb,
    position: usize,
    hal: &mut H,
    events: &mut EventDispatcher,
) -> Result<ExecTrace, ExecError> {
    let mut trace = ExecTrace::default();
    for (index, o) in rcb.ops.iter().enumerate() {
        let start = hal.now();
        let result = dispatch(&o.op, hal, events, &mut trace.captures);
        trace.records.push(OpRecord {
            rcb: position,
            index,
            opcode: o.opcode(),
            addrs: o.op.addr_refs().iter().map(|(a, _)| abs(a)).collect(),
            ok: result.is_ok(),
            start,
            end: hal.now(),
            phase: Phase::of(&o.op),
        });
        if let Err(kind) = result {
            return Err(ExecError {
                rcb: position,
                op_index: index,
                kind,
                trace,
            });
        }
    }
    Ok(trace)
}

/// Runs blocks in pipeline order. A block may only depend on blocks before
/// it. `after_block` is called with each block's position once it completes.
pub fn execute_pipeline<H: HalDriver + ?Sized>(
    pipeline: &[ResolvedRcb],
    hal: &mut H,
    events: &mut EventDispatcher,
    mut after_block: impl FnMut(usize),
) -> Result<ExecTrace, ExecError> {
    let mut trace = ExecTrace::default();
    for (i, rcb) in pipeline.iter().enumerate() {
        if let Some(&dep) = rcb.deps.iter().find(|&&d| d as usize >= i) {
            return Err(ExecError {
                rcb: i,
                op_index: 0,
                kind: ExecErrorKind::Dependency(dep),
                trace,
            });
        }
        match execute(rcb, i, hal, events) {
            Ok(t) => trace.extend(t),
            Err(mut e) => {
                let mut full = trace;
                full.extend(std::mem::take(&mut e.trace));
                e.trace = full;
                return Err(e);
            }
        }
        after_block(i);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hal::layout::{REG_KERNEL_ID, REG_STATUS, STATUS_DONE};
    use crate::hal::{SimConfig, SimDevice};
    use crate::rcb::{BlockType, Rcb};

    fn resolved(ops: Vec<Op>) -> ResolvedRcb {
        ResolvedRcb::new(Rcb::with_ops(BlockType::Config, ops)).unwrap()
    }

    #[test]
    fn write_then_read_captures() {
        let mut dev = SimDevice::new(SimConfig::default());
        let base = dev.tile_base(0, 0);
        let rcb = resolved(vec![
            Op::RegWrite { addr: AddrRef::Absolute(base + REG_KERNEL_ID as u64), value: 2 },
            Op::RegRead { addr: AddrRef::Absolute(base + REG_KERNEL_ID as u64), capture_slot: 5 },
        ]);
        let t = execute(&rcb, 0, &mut dev, &mut EventDispatcher::new()).unwrap();
        assert_eq!(t.captures[&5], 2);
        assert_eq!(t.records.len(), 2);
        assert!(t.records.iter().all(|r| r.ok));
    }

    #[test]
    fn poll_timeout_reports_index() {
        let mut dev = SimDevice::new(SimConfig::default());
        let base = dev.tile_base(1, 0);
        let rcb = resolved(vec![
            Op::RegWrite { addr: AddrRef::Absolute(base + REG_KERNEL_ID as u64), value: 1 },
            Op::PollMask {
                addr: AddrRef::Absolute(base + REG_STATUS as u64),
                mask: STATUS_DONE,
                expected: STATUS_DONE,
                timeout_us: 50,
            },
            Op::RegWrite { addr: AddrRef::Absolute(base + REG_KERNEL_ID as u64), value: 3 },
        ]);
        let err = execute(&rcb, 0, &mut dev, &mut EventDispatcher::new()).unwrap_err();
        assert_eq!(err.op_index, 1);
        assert!(matches!(err.kind, ExecErrorKind::Timeout { .. }));
        assert_eq!(err.trace.records.len(), 2);
        assert!(!err.trace.records[1].ok);
        assert!(err.trace.to_text().lines().nth(1).unwrap().contains("POLL_MASK"));
    }

    #[test]
    fn unmapped_address_is_hal_error() {
        let mut dev = SimDevice::new(SimConfig::default());
        let rcb = resolved(vec![Op::RegWrite { addr: AddrRef::Absolute(0), value: 1 }]);
        let err = execute(&rcb, 0, &mut dev, &mut EventDispatcher::new()).unwrap_err();
        assert!(matches!(err.kind, ExecErrorKind::Hal(HalError::AddressFault(0))));
    }

    #[test]
    fn wait_event_with_nothing_running_starves() {
        let mut dev = SimDevice::new(SimConfig::default());
        let rcb = resolved(vec![Op::WaitEvent { event_id: 0x100 }]);
        let err = execute(&rcb, 0, &mut dev, &mut EventDispatcher::new()).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::EventStarved(0x100));
    }

    #[test]
    fn forward_dependency_rejected() {
        let mut dev = SimDevice::new(SimConfig::default());
        let mut rcb = Rcb::with_ops(BlockType::Config, vec![Op::WaitEvent { event_id: 1 }]);
        rcb.deps.push(0);
        let p = vec![ResolvedRcb::new(rcb).unwrap()];
        let err = execute_pipeline(&p, &mut dev, &mut EventDispatcher::new(), |_| {}).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Dependency(0));
    }

    #[test]
    fn empty_pipeline_is_empty_trace() {
        let mut dev = SimDevice::new(SimConfig::default());
        let t = execute_pipeline(&[], &mut dev, &mut EventDispatcher::new(), |_| {}).unwrap();
        assert_eq!(t, ExecTrace::default());
    }
}
