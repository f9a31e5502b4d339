//! Per-runtime counters reported over the wire.

use crate::executor::StageTicks;

pub const TELEMETRY_LEN: usize = 36;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Telemetry {
    pub inferences: u64,
    pub input_ticks: u64,
    pub compute_ticks: u64,
    pub output_ticks: u64,
    /// Error code of the most recent failure, 0 if none.
    pub last_error: u32,
}

impl Telemetry {
    pub fn record(&mut self, stages: &StageTicks) {
        self.inferences += 1;
        self.input_ticks += stages.input;
        self.compute_ticks += stages.compute;
        self.output_ticks += stages.output;
    }

    pub fn encode(&self) -> [u8; TELEMETRY_LEN] {
        let mut out = [0u8; TELEMETRY_LEN];
        out[0..8].copy_from_slice(&self.inferences.to_le_bytes());
        out[8..16].copy_from_slice(&self.input_ticks.to_le_bytes());
        out[16..24].copy_from_slice(&self.compute_ticks.to_le_bytes());
        out[24..32].copy_from_slice(&self.output_ticks.to_le_bytes());
        out[32..36].copy_from_slice(&self.last_error.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        if buf.len() != TELEMETRY_LEN {
            return None;
        }
        let u = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        Some(Self {
            inferences: u(0),
            input_ticks: u(8),
            compute_ticks: u(16),
            output_ticks: u(24),
            last_error: u32::from_le_bytes(buf[32..36].try_into().unwrap()),
        })
    }
}
