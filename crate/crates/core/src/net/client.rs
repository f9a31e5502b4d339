//! Blocking client for the inference service.

use std::io;
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use super::frame::{write_frame, Frame, FrameReader, MsgType, ReadError};
use super::telemetry::Telemetry;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("read failed: {0}")]
    Read(#[from] ReadError),
    #[error("server replied NACK {0}")]
    Nack(u32),
    #[error("unexpected reply {0:?}")]
    Unexpected(MsgType),
}

pub struct Client {
    writer: TcpStream,
    reader: FrameReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        let _ = s.set_nodelay(true);
        Ok(Self {
            writer: s.try_clone()?,
            reader: FrameReader::new(s),
        })
    }

    /// Sends raw bytes without framing; used to inject corrupt traffic.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        use std::io::Write;
        self.writer.write_all(bytes)?;
        self.writer.flush()
    }

    pub fn recv(&mut self) -> Result<Frame, ClientError> {
        Ok(self.reader.read_frame()?)
    }

    pub fn request(&mut self, f: &Frame) -> Result<Frame, ClientError> {
        write_frame(&mut self.writer, f)?;
        self.recv()
    }

    fn expect(&mut self, f: &Frame, want: MsgType) -> Result<Vec<u8>, ClientError> {
        let reply = self.request(f)?;
        if let Some(code) = reply.nack_code() {
            return Err(ClientError::Nack(code));
        }
        if reply.msg_type != want {
            return Err(ClientError::Unexpected(reply.msg_type));
        }
        Ok(reply.payload)
    }

    pub fn load_image(&mut self, image: Vec<u8>) -> Result<(), ClientError> {
        self.expect(&Frame::new(MsgType::LoadImage, image), MsgType::Ack).map(drop)
    }

    pub fn load_plan(&mut self, bundle: Vec<u8>) -> Result<(), ClientError> {
        self.expect(&Frame::new(MsgType::LoadPlan, bundle), MsgType::Ack).map(drop)
    }

    pub fn run(&mut self, input: Vec<u8>) -> Result<Vec<u8>, ClientError> {
        self.expect(&Frame::new(MsgType::Run, input), MsgType::Result)
    }

    pub fn telemetry(&mut self) -> Result<Telemetry, ClientError> {
        let p = self.expect(&Frame::empty(MsgType::TelemetryReq), MsgType::Telemetry)?;
        Telemetry::decode(&p).ok_or(ClientError::Unexpected(MsgType::Telemetry))
    }
}
