#![allow(dead_code)]

//! Reference implementations written independently of the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Triple-loop int8 GEMM with i32 accumulation, row-major.
pub fn matmul_oracle(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Vec<i32> {
    let mut c = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0i32;
            for p in 0..k {
                acc += a[i * k + p] as i32 * b[p * n + j] as i32;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Valid 2-D cross-correlation, then ReLU, then softmax, all scalar.
pub fn cnn_oracle(x: &[f32], h: usize, w: usize, kern: &[f32], kh: usize, kw: usize) -> Vec<f32> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut conv = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0f32;
            for i in 0..kh {
                for j in 0..kw {
                    acc += x[(r + i) * w + c + j] * kern[i * kw + j];
                }
            }
            conv.push(acc);
        }
    }
    let relu: Vec<f32> = conv.iter().map(|&v| v.max(0.0)).collect();
    let m = relu.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = relu.iter().map(|&v| ((v - m) as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| (v / s) as f32).collect()
}

/// Bit-at-a-time reflected CRC-32.
pub fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            let lsb = crc & 1;
            crc >>= 1;
            if lsb != 0 {
                crc ^= 0xEDB8_8320;
            }
        }
    }
    !crc
}

pub fn random_i8(rng: &mut impl Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.gen::<i8>()).collect()
}

pub fn random_f32(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn i8_bytes(v: &[i8]) -> Vec<u8> {
    v.iter().map(|&x| x as u8).collect()
}

pub fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn i32s(bytes: &[u8]) -> Vec<i32> {
    bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub const XGEMM_GRAPH: &str = include_str!("../fixtures/xgemm64.json");
pub const CNN_GRAPH: &str = include_str!("../fixtures/cnn4x4.json");
/// File id of the conv kernel weights in [`CNN_GRAPH`].
pub const CNN_KERNEL_FILE: u32 = 1;
