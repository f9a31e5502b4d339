//! Runtime Control Block binary format.
//!
//! A control block is plain data: a header, a dependency list and an ordered
//! stream of operations. The executor interprets it; nothing here has any
//! knowledge of the device behind the HAL.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! header   magic u32 "RCB1" | version u16 | block_type u16 | op_count u32
//!          | payload_size u32 | dep_count u16 | reserved u16
//! deps     dep_count x u32
//! ops      opcode u16 | flags u16 | operands...
//! ```
//!
//! Address references are 12 bytes: `kind u8, pad u8` followed by a
//! 10-byte body whose interpretation depends on the kind.

use std::fmt;

use thiserror::Error;

pub const RCB_MAGIC: u32 = 0x3142_4352;
pub const RCB_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
pub const ADDR_REF_LEN: usize = 12;
const OP_HEADER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum OpCode {
    RegWrite = 0x01,
    RegRead = 0x02,
    WriteBlock = 0x03,
    DmaTrigger = 0x04,
    PollMask = 0x05,
    CacheFlush = 0x06,
    CacheInvalidate = 0x07,
    WaitEvent = 0x08,
}

impl OpCode {
    pub fn from_u16(code: u16) -> Option<Self> {
        Some(match code {
            0x01 => Self::RegWrite,
            0x02 => Self::RegRead,
            0x03 => Self::WriteBlock,
            0x04 => Self::DmaTrigger,
            0x05 => Self::PollMask,
            0x06 => Self::CacheFlush,
            0x07 => Self::CacheInvalidate,
            0x08 => Self::WaitEvent,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RegWrite => "REG_WRITE",
            Self::RegRead => "REG_READ",
            Self::WriteBlock => "WRITE_BLOCK",
            Self::DmaTrigger => "DMA_TRIGGER",
            Self::PollMask => "POLL_MASK",
            Self::CacheFlush => "CACHE_FLUSH",
            Self::CacheInvalidate => "CACHE_INVALIDATE",
            Self::WaitEvent => "WAIT_EVENT",
        }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Target of a register, memory or DMA access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddrRef {
    Absolute(u64),
    /// Offset from the base of the tile at (`col`, `row`).
    RelativeTile { col: u16, row: u16, offset: u32 },
    /// Byte offset into a logical buffer, resolved by the binding layer.
    Symbolic { buffer_id: u32, offset: u32 },
}

impl AddrRef {
    pub fn is_absolute(&self) -> bool {
        matches!(self, AddrRef::Absolute(_))
    }

    pub fn absolute(&self) -> Option<u64> {
        match *self {
            AddrRef::Absolute(a) => Some(a),
            _ => None,
        }
    }
}

impl fmt::Display for AddrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AddrRef::Absolute(a) => write!(f, "{a:#x}"),
            AddrRef::RelativeTile { col, row, offset } => {
                write!(f, "tile({col},{row})+{offset:#x}")
            }
            AddrRef::Symbolic { buffer_id, offset } => write!(f, "sym({buffer_id})+{offset:#x}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DmaDirection {
    ToDevice = 0,
    FromDevice = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    RegWrite {
        addr: AddrRef,
        value: u32,
    },
    RegRead {
        addr: AddrRef,
        capture_slot: u32,
    },
    WriteBlock {
        addr: AddrRef,
        data: Vec<u8>,
    },
    DmaTrigger {
        direction: DmaDirection,
        src: AddrRef,
        dst: AddrRef,
        length: u32,
    },
    PollMask {
        addr: AddrRef,
        mask: u32,
        expected: u32,
        timeout_us: u32,
    },
    CacheFlush {
        addr: AddrRef,
        length: u32,
    },
    CacheInvalidate {
        addr: AddrRef,
        length: u32,
    },
    WaitEvent {
        event_id: u32,
    },
}

impl Op {
    pub fn opcode(&self) -> OpCode {
        match self {
            Op::RegWrite { .. } => OpCode::RegWrite,
            Op::RegRead { .. } => OpCode::RegRead,
            Op::WriteBlock { .. } => OpCode::WriteBlock,
            Op::DmaTrigger { .. } => OpCode::DmaTrigger,
            Op::PollMask { .. } => OpCode::PollMask,
            Op::CacheFlush { .. } => OpCode::CacheFlush,
            Op::CacheInvalidate { .. } => OpCode::CacheInvalidate,
            Op::WaitEvent { .. } => OpCode::WaitEvent,
        }
    }

    /// Address references carried by this op, each paired with the number
    /// of bytes the op touches through it.
    pub fn addr_refs(&self) -> Vec<(AddrRef, u64)> {
        match self {
            Op::RegWrite { addr, .. } | Op::RegRead { addr, .. } | Op::PollMask { addr, .. } => {
                vec![(*addr, 4)]
            }
            Op::WriteBlock { addr, data } => vec![(*addr, data.len() as u64)],
            Op::DmaTrigger {
                src, dst, length, ..
            } => vec![(*src, *length as u64), (*dst, *length as u64)],
            Op::CacheFlush { addr, length } | Op::CacheInvalidate { addr, length } => {
                vec![(*addr, *length as u64)]
            }
            Op::WaitEvent { .. } => Vec::new(),
        }
    }

    /// Applies `f` to every address reference in place.
    pub fn map_addrs<E>(&self, mut f: impl FnMut(AddrRef, u64) -> Result<AddrRef, E>) -> Result<Op, E> {
        Ok(match self {
            Op::RegWrite { addr, value } => Op::RegWrite {
                addr: f(*addr, 4)?,
                value: *value,
            },
            Op::RegRead { addr, capture_slot } => Op::RegRead {
                addr: f(*addr, 4)?,
                capture_slot: *capture_slot,
            },
            Op::WriteBlock { addr, data } => Op::WriteBlock {
                addr: f(*addr, data.len() as u64)?,
                data: data.clone(),
            },
            Op::DmaTrigger {
                direction,
                src,
                dst,
                length,
            } => Op::DmaTrigger {
                direction: *direction,
                src: f(*src, *length as u64)?,
                dst: f(*dst, *length as u64)?,
                length: *length,
            },
            Op::PollMask {
                addr,
                mask,
                expected,
                timeout_us,
            } => Op::PollMask {
                addr: f(*addr, 4)?,
                mask: *mask,
                expected: *expected,
                timeout_us: *timeout_us,
            },
            Op::CacheFlush { addr, length } => Op::CacheFlush {
                addr: f(*addr, *length as u64)?,
                length: *length,
            },
            Op::CacheInvalidate { addr, length } => Op::CacheInvalidate {
                addr: f(*addr, *length as u64)?,
                length: *length,
            },
            Op::WaitEvent { event_id } => Op::WaitEvent {
                event_id: *event_id,
            },
        })
    }

    /// Encoded size including the 4-byte opcode/flags prefix.
    pub fn encoded_len(&self) -> usize {
        OP_HEADER_LEN
            + match self {
                Op::RegWrite { .. } | Op::RegRead { .. } => ADDR_REF_LEN + 4,
                Op::WriteBlock { data, .. } => ADDR_REF_LEN + 4 + pad4(data.len()),
                Op::DmaTrigger { .. } => 4 + 2 * ADDR_REF_LEN + 4,
                Op::PollMask { .. } => ADDR_REF_LEN + 12,
                Op::CacheFlush { .. } | Op::CacheInvalidate { .. } => ADDR_REF_LEN + 4,
                Op::WaitEvent { .. } => 8,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Operation {
    pub flags: u16,
    pub op: Op,
}

impl Operation {
    pub fn new(op: Op) -> Self {
        Self { flags: 0, op }
    }

    pub fn opcode(&self) -> OpCode {
        self.op.opcode()
    }
}

impl From<Op> for Operation {
    fn from(op: Op) -> Self {
        Operation::new(op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum BlockType {
    Compute = 0,
    Transfer = 1,
    Config = 2,
}

impl BlockType {
    fn from_u16(v: u16) -> Option<Self> {
        match v {
            0 => Some(Self::Compute),
            1 => Some(Self::Transfer),
            2 => Some(Self::Config),
            _ => None,
        }
    }
}

/// A decoded control block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rcb {
    pub block_type: BlockType,
    pub version: u16,
    /// Indices of the blocks in the same pipeline that must complete first.
    pub deps: Vec<u32>,
    pub ops: Vec<Operation>,
}

impl Rcb {
    pub fn new(block_type: BlockType) -> Self {
        Self {
            block_type,
            version: RCB_VERSION,
            deps: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn with_ops(block_type: BlockType, ops: impl IntoIterator<Item = Op>) -> Self {
        Self {
            ops: ops.into_iter().map(Operation::new).collect(),
            ..Self::new(block_type)
        }
    }

    pub fn push(&mut self, op: Op) {
        self.ops.push(Operation::new(op));
    }

    pub fn payload_size(&self) -> usize {
        self.ops.iter().map(|o| o.op.encoded_len()).sum()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.deps.len() + self.payload_size()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyOps,
    DuplicateDep(u32),
    TooManyDeps(usize),
    ZeroDmaLength,
    ZeroPollTimeout,
    EmptyWriteBlock,
    BlockTooLarge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `None` for header-level violations.
    pub op_index: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op_index {
            Some(i) => write!(f, "op {i}: {:?}", self.kind),
            None => write!(f, "block: {:?}", self.kind),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate_rcb(rcb: &Rcb) -> ValidationReport {
    let mut violations = Vec::new();
    let header = |kind| Violation {
        op_index: None,
        kind,
    };

    if rcb.ops.is_empty() && rcb.block_type != BlockType::Config {
        violations.push(header(ViolationKind::EmptyOps));
    }
    if rcb.deps.len() > u16::MAX as usize {
        violations.push(header(ViolationKind::TooManyDeps(rcb.deps.len())));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &d in &rcb.deps {
        if !seen.insert(d) {
            violations.push(header(ViolationKind::DuplicateDep(d)));
        }
    }
    if rcb.ops.len() > u32::MAX as usize || rcb.payload_size() > u32::MAX as usize {
        violations.push(header(ViolationKind::BlockTooLarge));
    }

    for (i, op) in rcb.ops.iter().enumerate() {
        let kind = match &op.op {
            Op::DmaTrigger { length: 0, .. } => Some(ViolationKind::ZeroDmaLength),
            Op::PollMask { timeout_us: 0, .. } => Some(ViolationKind::ZeroPollTimeout),
            Op::WriteBlock { data, .. } if data.is_empty() => Some(ViolationKind::EmptyWriteBlock),
            Op::WriteBlock { data, .. } if data.len() > u32::MAX as usize => {
                Some(ViolationKind::BlockTooLarge)
            }
            _ => None,
        };
        if let Some(kind) = kind {
            violations.push(Violation {
                op_index: Some(i),
                kind,
            });
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("unknown block type {0}")]
    BlockType(u16),
    #[error("unknown opcode {code:#06x} at byte offset {offset}")]
    Opcode { code: u16, offset: usize },
    #[error("unknown address kind {kind} at byte offset {offset}")]
    AddrKind { kind: u8, offset: usize },
    #[error("unknown DMA direction {dir} at byte offset {offset}")]
    Direction { dir: u8, offset: usize },
    #[error("truncated block")]
    Truncated,
    #[error("{0} trailing bytes after declared payload")]
    Trailing(usize),
    #[error("payload_size {declared} does not match decoded operations ({actual})")]
    PayloadSize { declared: usize, actual: usize },
    #[error("non-zero reserved header field")]
    Reserved,
    #[error("invalid block: {0}")]
    Invalid(ValidationReport),
}

fn pad4(n: usize) -> usize {
    (n + 3) & !3
}

fn put_addr(out: &mut Vec<u8>, addr: &AddrRef) {
    match *addr {
        AddrRef::Absolute(a) => {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&[0, 0]);
        }
        AddrRef::RelativeTile { col, row, offset } => {
            out.extend_from_slice(&[1, 0]);
            out.extend_from_slice(&col.to_le_bytes());
            out.extend_from_slice(&row.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&[0, 0]);
        }
        AddrRef::Symbolic { buffer_id, offset } => {
            out.extend_from_slice(&[2, 0]);
            out.extend_from_slice(&buffer_id.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&[0, 0]);
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a control block. Invalid blocks are rejected before any byte
/// is produced.
pub fn encode_rcb(rcb: &Rcb) -> Result<Vec<u8>, FormatError> {
    let report = validate_rcb(rcb);
    if !report.is_ok() {
        return Err(FormatError::Invalid(report));
    }
    let mut out = Vec::with_capacity(rcb.encoded_len());
    put_u32(&mut out, RCB_MAGIC);
    out.extend_from_slice(&rcb.version.to_le_bytes());
    out.extend_from_slice(&(rcb.block_type as u16).to_le_bytes());
    put_u32(&mut out, rcb.ops.len() as u32);
    put_u32(&mut out, rcb.payload_size() as u32);
    out.extend_from_slice(&(rcb.deps.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in &rcb.deps {
        put_u32(&mut out, d);
    }
    for op in &rcb.ops {
        out.extend_from_slice(&(op.opcode() as u16).to_le_bytes());
        out.extend_from_slice(&op.flags.to_le_bytes());
        match &op.op {
            Op::RegWrite { addr, value } => {
                put_addr(&mut out, addr);
                put_u32(&mut out, *value);
            }
            Op::RegRead { addr, capture_slot } => {
                put_addr(&mut out, addr);
                put_u32(&mut out, *capture_slot);
            }
            Op::WriteBlock { addr, data } => {
                put_addr(&mut out, addr);
                put_u32(&mut out, data.len() as u32);
                out.extend_from_slice(data);
                out.resize(out.len() + pad4(data.len()) - data.len(), 0);
            }
            Op::DmaTrigger {
                direction,
                src,
                dst,
                length,
            } => {
                out.extend_from_slice(&[*direction as u8, 0, 0, 0]);
                put_addr(&mut out, src);
                put_addr(&mut out, dst);
                put_u32(&mut out, *length);
            }
            Op::PollMask {
                addr,
                mask,
                expected,
                timeout_us,
            } => {
                put_addr(&mut out, addr);
                put_u32(&mut out, *mask);
                put_u32(&mut out, *expected);
                put_u32(&mut out, *timeout_us);
            }
            Op::CacheFlush { addr, length } | Op::CacheInvalidate { addr, length } => {
                put_addr(&mut out, addr);
                put_u32(&mut out, *length);
            }
            Op::WaitEvent { event_id } => {
                put_u32(&mut out, *event_id);
                put_u32(&mut out, 0);
            }
        }
    }
    debug_assert_eq!(out.len(), rcb.encoded_len());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn addr(&mut self) -> Result<AddrRef, FormatError> {
        let offset = self.pos;
        let kind = self.u8()?;
        self.u8()?;
        let addr = match kind {
            0 => AddrRef::Absolute(self.u64()?),
            1 => AddrRef::RelativeTile {
                col: self.u16()?,
                row: self.u16()?,
                offset: self.u32()?,
            },
            2 => {
                let buffer_id = self.u32()?;
                let off = self.u32()?;
                self.u16()?;
                return Ok(AddrRef::Symbolic {
                    buffer_id,
                    offset: off,
                });
            }
            kind => return Err(FormatError::AddrKind { kind, offset }),
        };
        self.u16()?;
        Ok(addr)
    }
}

/// Parses a control block. The buffer must hold exactly one block.
pub fn decode_rcb(buf: &[u8]) -> Result<Rcb, FormatError> {
    if buf.len() < HEADER_LEN {
        return Err(FormatError::Truncated);
    }
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.u32()?;
    if magic != RCB_MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let version = c.u16()?;
    if version != RCB_VERSION {
        return Err(FormatError::Version(version));
    }
    let raw_type = c.u16()?;
    let block_type = BlockType::from_u16(raw_type).ok_or(FormatError::BlockType(raw_type))?;
    let op_count = c.u32()? as usize;
    let payload_size = c.u32()? as usize;
    let dep_count = c.u16()? as usize;
    if c.u16()? != 0 {
        return Err(FormatError::Reserved);
    }
    let deps = (0..dep_count).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;

    let payload_start = c.pos;
    let payload_end = payload_start
        .checked_add(payload_size)
        .ok_or(FormatError::Truncated)?;
    if payload_end > buf.len() {
        return Err(FormatError::Truncated);
    }
    if payload_end < buf.len() {
        return Err(FormatError::Trailing(buf.len() - payload_end));
    }
    let mut c = Cursor {
        buf: &buf[..payload_end],
        pos: payload_start,
    };

    // Cap the preallocation; op_count is untrusted.
    let mut ops = Vec::with_capacity(op_count.min(payload_size / OP_HEADER_LEN + 1));
    for _ in 0..op_count {
        let offset = c.pos;
        let code = c.u16()?;
        let flags = c.u16()?;
        let opcode = OpCode::from_u16(code).ok_or(FormatError::Opcode { code, offset })?;
        let op = match opcode {
            OpCode::RegWrite => Op::RegWrite {
                addr: c.addr()?,
                value: c.u32()?,
            },
            OpCode::RegRead => Op::RegRead {
                addr: c.addr()?,
                capture_slot: c.u32()?,
            },
            OpCode::WriteBlock => {
                let addr = c.addr()?;
                let len = c.u32()? as usize;
                let padded = c.take(pad4(len))?;
                Op::WriteBlock {
                    addr,
                    data: padded[..len].to_vec(),
                }
            }
            OpCode::DmaTrigger => {
                let dir_offset = c.pos;
                let dir = c.take(4)?[0];
                let direction = match dir {
                    0 => DmaDirection::ToDevice,
                    1 => DmaDirection::FromDevice,
                    dir => {
                        return Err(FormatError::Direction {
                            dir,
                            offset: dir_offset,
                        })
                    }
                };
                Op::DmaTrigger {
                    direction,
                    src: c.addr()?,
                    dst: c.addr()?,
                    length: c.u32()?,
                }
            }
            OpCode::PollMask => Op::PollMask {
                addr: c.addr()?,
                mask: c.u32()?,
                expected: c.u32()?,
                timeout_us: c.u32()?,
            },
            OpCode::CacheFlush => Op::CacheFlush {
                addr: c.addr()?,
                length: c.u32()?,
            },
            OpCode::CacheInvalidate => Op::CacheInvalidate {
                addr: c.addr()?,
                length: c.u32()?,
            },
            OpCode::WaitEvent => {
                let event_id = c.u32()?;
                c.u32()?;
                Op::WaitEvent { event_id }
            }
        };
        ops.push(Operation { flags, op });
    }
    if c.pos != payload_end {
        return Err(FormatError::PayloadSize {
            declared: payload_size,
            actual: c.pos - payload_start,
        });
    }

    let rcb = Rcb {
        block_type,
        version,
        deps,
        ops,
    };
    let report = validate_rcb(&rcb);
    if !report.is_ok() {
        return Err(FormatError::Invalid(report));
    }
    Ok(rcb)
}
