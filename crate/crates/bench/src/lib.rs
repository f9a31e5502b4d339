//! Shared workloads for the criterion benches.

use rcbrt::bench::BenchKernel;
use rcbrt::compiler::{compile, CompiledModel, LowerOptions};

/// An `n`x`n` int8 matmul model and a matching input.
pub fn matmul_model(n: u32) -> (CompiledModel, Vec<u8>) {
    let graph = BenchKernel::Matmul { n }.graph();
    let model = compile(&graph, &LowerOptions::default(), |_| None).expect("bench graph compiles");
    let len = model.manifest.input_bytes() as usize;
    (model, pattern(len))
}

/// Deterministic filler bytes.
pub fn pattern(len: usize) -> Vec<u8> {
    (0..len).map(|i| (i.wrapping_mul(131) ^ (i >> 3)) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_input_matches_manifest() {
        let (m, input) = matmul_model(8);
        assert_eq!(input.len(), 128);
        assert_eq!(m.rcbs.len(), 1);
    }
}
