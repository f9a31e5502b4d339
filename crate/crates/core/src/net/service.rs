//! Request/response loop over a reliable byte stream.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};

use super::frame::{write_frame, Frame, FrameError, FrameReader, MsgType, ReadError};
use crate::runtime::{ErrorCode, Runtime};

pub const DEFAULT_PORT: u16 = 7410;

fn frame_error_code(e: &FrameError) -> ErrorCode {
    match e {
        FrameError::Integrity { .. } => ErrorCode::Integrity,
        FrameError::MsgType(_) => ErrorCode::Unsupported,
        _ => ErrorCode::Malformed,
    }
}

/// Handles one request and produces the reply.
pub fn handle_frame(rt: &mut Runtime, req: Frame) -> Frame {
    let res = match req.msg_type {
        MsgType::LoadImage => rt.load_image(req.payload).map(|_| Frame::empty(MsgType::Ack)),
        MsgType::LoadPlan => rt.load_plan(&req.payload).map(|_| Frame::empty(MsgType::Ack)),
        MsgType::Run => rt.run(&req.payload).map(|out| Frame::new(MsgType::Result, out.output)),
        MsgType::TelemetryReq => Ok(Frame::new(MsgType::Telemetry, rt.telemetry().encode().to_vec())),
        MsgType::Result | MsgType::Telemetry | MsgType::Ack | MsgType::Nack => {
            return nack(rt, ErrorCode::BadRequest);
        }
    };
    match res {
        Ok(f) => f,
        Err(e) => nack(rt, e.code()),
    }
}

fn nack(rt: &mut Runtime, code: ErrorCode) -> Frame {
    rt.note_error(code);
    Frame::nack(code as u32)
}

/// Serves requests on one stream until the peer closes it or the transport
/// fails. Protocol errors are answered with NACK and the session continues.
pub fn serve_connection<S: Read + Write>(stream: S, rt: &mut Runtime) -> io::Result<()> {
    let mut reader = FrameReader::new(stream);
    loop {
        let reply = match reader.read_frame() {
            Ok(req) => handle_frame(rt, req),
            Err(ReadError::Eof) => return Ok(()),
            Err(ReadError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(ReadError::Io(e)) => return Err(e),
            Err(ReadError::Frame(e)) => nack(rt, frame_error_code(&e)),
        };
        write_frame(reader.get_mut(), &reply)?;
    }
}

/// Accepts connections one at a time, forever, or until `max_connections`
/// have been served if given.
pub fn serve(listener: &TcpListener, rt: &mut Runtime, max_connections: Option<usize>) -> io::Result<()> {
    for (i, conn) in listener.incoming().enumerate() {
        let stream: TcpStream = conn?;
        let _ = stream.set_nodelay(true);
        if let Err(e) = serve_connection(&stream, rt) {
            eprintln!("connection closed: {e}");
        }
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    Ok(())
}
