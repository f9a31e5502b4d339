//! Host-side platform: framing, integrity, event routing and the network
//! service.

pub mod client;
pub mod crc;
pub mod events;
pub mod frame;
pub mod service;
pub mod telemetry;

pub use crc::crc32;
pub use events::EventDispatcher;
pub use frame::{decode_frame, encode_frame, Frame, FrameError, FrameReader, MsgType};
pub use telemetry::Telemetry;

pub use client::{Client, ClientError};
pub use service::{handle_frame, serve, serve_connection, DEFAULT_PORT};
