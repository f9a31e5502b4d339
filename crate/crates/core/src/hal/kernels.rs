//! Compute kernels available on a simulated tile, and the tile-local memory
//! ABI they share with the compiler.
//!
//! Operands live in tile-local memory in port order, followed by the
//! output, each starting on a [`LOCAL_ALIGN`] boundary. Shapes come from the
//! PARAM registers.

use std::fmt;

pub const LOCAL_ALIGN: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum KernelId {
    /// `PARAM0` = byte count. Copies input to output.
    Passthrough = 1,
    /// `PARAM0..2` = M, K, N. `A: MxK i8`, `B: KxN i8`, `C: MxN i32`.
    MatmulI8 = 2,
    /// `PARAM0..3` = H, W, kH, kW. Single channel, valid padding.
    Conv2dF32 = 3,
    /// `PARAM0` = element count.
    ReluF32 = 4,
    /// `PARAM0` = element count.
    SoftmaxF32 = 5,
}

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::Passthrough,
        KernelId::MatmulI8,
        KernelId::Conv2dF32,
        KernelId::ReluF32,
        KernelId::SoftmaxF32,
    ];

    pub fn from_u32(v: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u32 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Passthrough => "PASSTHROUGH",
            KernelId::MatmulI8 => "MATMUL_I8",
            KernelId::Conv2dF32 => "CONV2D_F32",
            KernelId::ReluF32 => "RELU_F32",
            KernelId::SoftmaxF32 => "SOFTMAX_F32",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn param_count(self) -> usize {
        match self {
            KernelId::Passthrough | KernelId::ReluF32 | KernelId::SoftmaxF32 => 1,
            KernelId::MatmulI8 => 3,
            KernelId::Conv2dF32 => 4,
        }
    }

    pub fn input_ports(self) -> &'static [&'static str] {
        match self {
            KernelId::MatmulI8 => &["a", "b"],
            KernelId::Conv2dF32 => &["in", "kernel"],
            _ => &["in"],
        }
    }

    pub fn output_port(self) -> &'static str {
        match self {
            KernelId::MatmulI8 => "c",
            _ => "out",
        }
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalBuf {
    pub offset: u32,
    pub len: u32,
}

impl LocalBuf {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset as usize..(self.offset + self.len) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelLayout {
    pub inputs: Vec<LocalBuf>,
    pub output: LocalBuf,
    /// Scalar operations performed; drives the cost model.
    pub work: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutError(pub String);

impl fmt::Display for LayoutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for LayoutError {}

fn align_up(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

/// Computes where a kernel's operands sit in tile-local memory.
pub fn layout(kernel: KernelId, params: &[u32], local_mem: u32) -> Result<KernelLayout, LayoutError> {
    let p = |i: usize| params.get(i).copied().unwrap_or(0) as u64;
    let need_nonzero = |vals: &[u64]| {
        if vals.contains(&0) {
            Err(LayoutError(format!("{kernel}: zero-sized parameter in {vals:?}")))
        } else {
            Ok(())
        }
    };
    let (in_lens, out_len, work): (Vec<u64>, u64, u64) = match kernel {
        KernelId::Passthrough => {
            need_nonzero(&[p(0)])?;
            (vec![p(0)], p(0), 0)
        }
        KernelId::MatmulI8 => {
            let (m, k, n) = (p(0), p(1), p(2));
            need_nonzero(&[m, k, n])?;
            (vec![m * k, k * n], m * n * 4, m * n * k)
        }
        KernelId::Conv2dF32 => {
            let (h, w, kh, kw) = (p(0), p(1), p(2), p(3));
            need_nonzero(&[h, w, kh, kw])?;
            if kh > h || kw > w {
                return Err(LayoutError(format!("{kernel}: kernel {kh}x{kw} larger than input {h}x{w}")));
            }
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            (vec![h * w * 4, kh * kw * 4], oh * ow * 4, oh * ow * kh * kw)
        }
        KernelId::ReluF32 | KernelId::SoftmaxF32 => {
            need_nonzero(&[p(0)])?;
            (vec![p(0) * 4], p(0) * 4, p(0))
        }
    };

    let mut cursor = 0u64;
    let mut place = |len: u64| {
        let offset = cursor;
        cursor = align_up(offset + len, LOCAL_ALIGN as u64);
        (offset, len)
    };
    let inputs: Vec<(u64, u64)> = in_lens.into_iter().map(&mut place).collect();
    let output = place(out_len);
    let end = output.0 + output.1;
    if end > local_mem as u64 {
        return Err(LayoutError(format!(
            "{kernel}: operands need {end} bytes of local memory, tile has {local_mem}"
        )));
    }
    let buf = |(offset, len): (u64, u64)| LocalBuf {
        offset: offset as u32,
        len: len as u32,
    };
    Ok(KernelLayout {
        inputs: inputs.into_iter().map(buf).collect(),
        output: buf(output),
        work,
    })
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn put_f32s(out: &mut [u8], vals: impl IntoIterator<Item = f32>) {
    for (chunk, v) in out.chunks_exact_mut(4).zip(vals) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
}

/// Runs `kernel` over a tile's local memory using a layout from [`layout`].
pub fn run(kernel: KernelId, params: &[u32], l: &KernelLayout, mem: &mut [u8]) {
    let input = |i: usize| mem[l.inputs[i].range()].to_vec();
    match kernel {
        KernelId::Passthrough => {
            let src = input(0);
            mem[l.output.range()].copy_from_slice(&src);
        }
        KernelId::MatmulI8 => {
            let (m, k, n) = (params[0] as usize, params[1] as usize, params[2] as usize);
            let a = input(0);
            let b = input(1);
            let out = &mut mem[l.output.range()];
            let mut row = vec![0i32; n];
            for i in 0..m {
                row.iter_mut().for_each(|v| *v = 0);
                for p in 0..k {
                    let av = a[i * k + p] as i8 as i32;
                    let brow = &b[p * n..(p + 1) * n];
                    for (acc, &bv) in row.iter_mut().zip(brow) {
                        *acc += av * bv as i8 as i32;
                    }
                }
                for (j, v) in row.iter().enumerate() {
                    let o = (i * n + j) * 4;
                    out[o..o + 4].copy_from_slice(&v.to_le_bytes());
                }
            }
        }
        KernelId::Conv2dF32 => {
            let (h, w, kh, kw) = (
                params[0] as usize,
                params[1] as usize,
                params[2] as usize,
                params[3] as usize,
            );
            let x = f32s(&input(0));
            let kern = f32s(&input(1));
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let mut y = Vec::with_capacity(oh * ow);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0f32;
                    for a in 0..kh {
                        for b in 0..kw {
                            acc += x[(i + a) * w + j + b] * kern[a * kw + b];
                        }
                    }
                    y.push(acc);
                }
            }
            put_f32s(&mut mem[l.output.range()], y);
        }
        KernelId::ReluF32 => {
            let x = f32s(&input(0));
            put_f32s(
                &mut mem[l.output.range()],
                x.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }),
            );
        }
        KernelId::SoftmaxF32 => {
            let x = f32s(&input(0));
            let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = x.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            put_f32s(
                &mut mem[l.output.range()],
                exps.into_iter().map(|e| (e / sum) as f32),
            );
        }
    }
}
