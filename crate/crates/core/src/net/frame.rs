//! Wire frames.
//!
//! ```text
//! magic u32 "AEG1" | msg_type u16 | flags u16 | payload_len u32 | payload | crc u32
//! ```
//!
//! The CRC covers everything between the magic and the CRC itself, so a
//! receiver that lost sync can scan for the magic again.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::crc::Crc32;

pub const FRAME_MAGIC: u32 = 0x3147_4541;
pub const MAX_PAYLOAD: usize = 16 << 20;
pub const FRAME_OVERHEAD: usize = 16;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum MsgType {
    LoadImage = 1,
    LoadPlan = 2,
    Run = 3,
    Result = 4,
    TelemetryReq = 5,
    Telemetry = 6,
    Ack = 7,
    Nack = 8,
}

impl MsgType {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => Self::LoadImage,
            2 => Self::LoadPlan,
            3 => Self::Run,
            4 => Self::Result,
            5 => Self::TelemetryReq,
            6 => Self::Telemetry,
            7 => Self::Ack,
            8 => Self::Nack,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub flags: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            flags: 0,
            payload,
        }
    }

    pub fn empty(msg_type: MsgType) -> Self {
        Self::new(msg_type, Vec::new())
    }

    pub fn nack(code: u32) -> Self {
        Self::new(MsgType::Nack, code.to_le_bytes().to_vec())
    }

    /// Error code carried by a NACK.
    pub fn nack_code(&self) -> Option<u32> {
        (self.msg_type == MsgType::Nack && self.payload.len() == 4)
            .then(|| u32::from_le_bytes(self.payload[..4].try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("CRC mismatch: frame says {declared:#010x}, computed {computed:#010x}")]
    Integrity { declared: u32, computed: u32 },
    #[error("unknown message type {0}")]
    MsgType(u16),
    #[error("frame truncated")]
    Truncated,
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
}

fn header(f: &Frame) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&FRAME_MAGIC.to_le_bytes());
    h[4..6].copy_from_slice(&(f.msg_type as u16).to_le_bytes());
    h[6..8].copy_from_slice(&f.flags.to_le_bytes());
    h[8..12].copy_from_slice(&(f.payload.len() as u32).to_le_bytes());
    h
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, FrameError> {
    if f.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(f.payload.len()));
    }
    let h = header(f);
    let mut crc = Crc32::new();
    crc.update(&h[4..]);
    crc.update(&f.payload);
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + f.payload.len());
    out.extend_from_slice(&h);
    out.extend_from_slice(&f.payload);
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    Ok(out)
}

struct Header {
    raw_type: u16,
    flags: u16,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, FrameError> {
    let magic = u32::from_le_bytes(h[0..4].try_into().unwrap());
    if magic != FRAME_MAGIC {
        return Err(FrameError::Magic(magic));
    }
    let len = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(len));
    }
    Ok(Header {
        raw_type: u16::from_le_bytes([h[4], h[5]]),
        flags: u16::from_le_bytes([h[6], h[7]]),
        len,
    })
}

fn finish(h: &[u8; HEADER_LEN], hdr: Header, payload: Vec<u8>, declared: u32) -> Result<Frame, FrameError> {
    let mut crc = Crc32::new();
    crc.update(&h[4..]);
    crc.update(&payload);
    let computed = crc.finalize();
    if computed != declared {
        return Err(FrameError::Integrity { declared, computed });
    }
    let msg_type = MsgType::from_u16(hdr.raw_type).ok_or(FrameError::MsgType(hdr.raw_type))?;
    Ok(Frame {
        msg_type,
        flags: hdr.flags,
        payload,
    })
}

/// Decodes exactly one frame from `buf`.
pub fn decode_frame(buf: &[u8]) -> Result<Frame, FrameError> {
    let h: &[u8; HEADER_LEN] = buf
        .get(..HEADER_LEN)
        .ok_or(FrameError::Truncated)?
        .try_into()
        .unwrap();
    let hdr = parse_header(h)?;
    let total = FRAME_OVERHEAD + hdr.len;
    if buf.len() < total {
        return Err(FrameError::Truncated);
    }
    if buf.len() > total {
        return Err(FrameError::Trailing(buf.len() - total));
    }
    let payload = buf[HEADER_LEN..HEADER_LEN + hdr.len].to_vec();
    let declared = u32::from_le_bytes(buf[total - 4..].try_into().unwrap());
    finish(h, hdr, payload, declared)
}

#[derive(Debug, Error)]
pub enum ReadError {
    /// Clean end of stream between frames.
    #[error("end of stream")]
    Eof,
    #[error(transparent)]
    Io(#[from] io::Error),
    /// The stream is still aligned on a frame boundary after this error.
    #[error(transparent)]
    Frame(FrameError),
}

/// Reads frames from a byte stream, resynchronizing on the magic after
/// garbage and skipping oversized payloads.
pub struct FrameReader<R> {
    inner: R,
    /// Last four bytes seen while out of sync.
    resync: Option<[u8; 4]>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            resync: None,
        }
    }

    pub fn get_mut(&mut self) -> &mut R {
        &mut self.inner
    }

    pub fn into_inner(self) -> R {
        self.inner
    }

    fn fill(&mut self, buf: &mut [u8], at_boundary: bool) -> Result<(), ReadError> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) if read == 0 && at_boundary => return Err(ReadError::Eof),
                Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
                Ok(n) => read += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Reads the next frame. Bytes that do not start with the magic are
    /// reported once as [`FrameError::Magic`]; the following call skips
    /// ahead to the next magic before reading.
    pub fn read_frame(&mut self) -> Result<Frame, ReadError> {
        let target = FRAME_MAGIC.to_le_bytes();
        let mut window = match self.resync.take() {
            Some(w) => w,
            None => {
                let mut w = [0u8; 4];
                self.fill(&mut w, true)?;
                if w != target {
                    self.resync = Some(w);
                    return Err(ReadError::Frame(FrameError::Magic(u32::from_le_bytes(w))));
                }
                w
            }
        };
        while window != target {
            let mut b = [0u8; 1];
            match self.fill(&mut b, true) {
                Err(ReadError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(ReadError::Eof),
                r => r?,
            }
            window.rotate_left(1);
            window[3] = b[0];
        }
        self.read_after_magic([0u8; HEADER_LEN])
    }

    fn read_after_magic(&mut self, mut h: [u8; HEADER_LEN]) -> Result<Frame, ReadError> {
        h[0..4].copy_from_slice(&FRAME_MAGIC.to_le_bytes());
        self.fill(&mut h[4..], false)?;
        let hdr = match parse_header(&h) {
            Ok(hdr) => hdr,
            Err(FrameError::TooLarge(len)) => {
                io::copy(&mut (&mut self.inner).take(len as u64 + 4), &mut io::sink())?;
                return Err(ReadError::Frame(FrameError::TooLarge(len)));
            }
            Err(e) => return Err(ReadError::Frame(e)),
        };
        let mut payload = vec![0u8; hdr.len];
        self.fill(&mut payload, false)?;
        let mut crc = [0u8; 4];
        self.fill(&mut crc, false)?;
        finish(&h, hdr, payload, u32::from_le_bytes(crc)).map_err(ReadError::Frame)
    }
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> io::Result<()> {
    let bytes = encode_frame(f).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)?;
    w.flush()
}
