//! Measurement harness on the virtual clock: per-stage latency statistics
//! and block-size transfer sweeps under two control-path cost models.

use std::fmt::Write as _;
use std::io;

use thiserror::Error;

use crate::compiler::{compile, CompileError, LowerOptions};
use crate::executor::{ExecTrace, StageTicks};
use crate::hal::layout::{GLOBAL_BASE, LOCAL_MEM_OFFSET};
use crate::hal::{DmaDescriptor, DmaDirection, DmaHandle, HalDriver, HalError, SimConfig, SimDevice};
use crate::net::telemetry::Telemetry;
use crate::runtime::{Runtime, RuntimeError};

pub const MIN_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub cv: f64,
    pub min: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{got} samples, need more than the {warmup} warm-up samples")]
pub struct StatsError {
    pub got: usize,
    pub warmup: usize,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Statistics over `samples[warmup..]`.
pub fn compute_stats(samples: &[f64], warmup: usize) -> Result<LatencyStats, StatsError> {
    if samples.len() <= warmup {
        return Err(StatsError {
            got: samples.len(),
            warmup,
        });
    }
    let s = &samples[warmup..];
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std_dev = var.sqrt();
    let cv = if std_dev == 0.0 {
        0.0
    } else if mean == 0.0 {
        f64::INFINITY
    } else {
        std_dev / mean.abs()
    };
    let mut sorted = s.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        count: s.len(),
        mean,
        std_dev,
        cv,
        min: sorted[0],
        p50: percentile(&sorted, 50.0),
        p99: percentile(&sorted, 99.0),
        max: sorted[sorted.len() - 1],
    })
}

pub fn compute_tick_stats(samples: &[u64], warmup: usize) -> Result<LatencyStats, StatsError> {
    let f: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    compute_stats(&f, warmup)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKernel {
    /// Copies `bytes` through one tile without arithmetic.
    Passthrough { bytes: u32 },
    /// `n x n` int8 matrix product.
    Matmul { n: u32 },
}

impl BenchKernel {
    pub fn name(&self) -> String {
        match self {
            BenchKernel::Passthrough { bytes } => format!("passthrough-{bytes}"),
            BenchKernel::Matmul { n } => format!("matmul-{n}"),
        }
    }

    /// Single-node graph document for this kernel.
    pub fn graph(&self) -> String {
        match *self {
            BenchKernel::Passthrough { bytes } => format!(
                r#"{{"nodes":[{{"name":"copy","kernel":"PASSTHROUGH","params":[{bytes}]}}],
"edges":[{{"from":"x","to":"copy:in","shape":[{bytes}],"dtype":"i8"}},
{{"from":"copy:out","to":"y","shape":[{bytes}],"dtype":"i8"}}],
"inputs":[{{"name":"x","shape":[{bytes}],"dtype":"i8"}}],
"outputs":[{{"name":"y","shape":[{bytes}],"dtype":"i8"}}]}}"#
            ),
            BenchKernel::Matmul { n } => format!(
                r#"{{"nodes":[{{"name":"mm","kernel":"MATMUL_I8","params":[{n},{n},{n}]}}],
"edges":[{{"from":"a","to":"mm:a","shape":[{n},{n}],"dtype":"i8"}},
{{"from":"b","to":"mm:b","shape":[{n},{n}],"dtype":"i8"}},
{{"from":"mm:c","to":"c","shape":[{n},{n}],"dtype":"i32"}}],
"inputs":[{{"name":"a","shape":[{n},{n}],"dtype":"i8"}},{{"name":"b","shape":[{n},{n}],"dtype":"i8"}}],
"outputs":[{{"name":"c","shape":[{n},{n}],"dtype":"i32"}}]}}"#
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0} iterations requested, at least {MIN_ITERATIONS} required")]
    TooFewIterations(usize),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("block size {size} does not divide volume {volume}")]
    Divisibility { size: u64, volume: u64 },
    #[error("block size {0} does not fit in tile memory or global memory")]
    BlockSize(u64),
    #[error(transparent)]
    Hal(#[from] HalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBench {
    pub kernel: BenchKernel,
    pub iterations: usize,
    pub warmup: usize,
    pub input: LatencyStats,
    pub compute: LatencyStats,
    pub output: LatencyStats,
    /// Sum over every iteration, warm-up included.
    pub totals: StageTicks,
    pub telemetry: Telemetry,
    pub traces: Vec<ExecTrace>,
}

/// Runs `kernel` `iterations` times through a provisioned runtime and
/// collects per-stage intervals from the execution traces.
pub fn run_kernel_bench(
    kernel: BenchKernel,
    iterations: usize,
    warmup: usize,
    config: SimConfig,
) -> Result<KernelBench, BenchError> {
    if iterations < MIN_ITERATIONS {
        return Err(BenchError::TooFewIterations(iterations));
    }
    let opts = LowerOptions {
        grid: config.grid,
        local_mem_size: config.local_mem_size,
        ..LowerOptions::default()
    };
    let model = compile(&kernel.graph(), &opts, |_| None)?;
    let mut rt = Runtime::with_model(config, &model)?;
    let len = rt.input_len().unwrap_or(0) as usize;
    let input: Vec<u8> = (0..len).map(|i| (i.wrapping_mul(31).wrapping_add(7) % 251) as u8).collect();

    let (mut inp, mut cmp, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut totals = StageTicks::default();
    let mut traces = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let r = rt.run(&input)?;
        inp.push(r.stages.input);
        cmp.push(r.stages.compute);
        out.push(r.stages.output);
        totals += r.stages;
        traces.push(r.trace);
    }
    Ok(KernelBench {
        kernel,
        iterations,
        warmup,
        input: compute_tick_stats(&inp, warmup)?,
        compute: compute_tick_stats(&cmp, warmup)?,
        output: compute_tick_stats(&out, warmup)?,
        totals,
        telemetry: rt.telemetry(),
        traces,
    })
}

/// Cost of one control-path crossing plus transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathModel {
    /// Fixed per-transfer cost of the direct path, in ticks.
    pub fixed_overhead: u64,
    /// Extra fixed cost each transfer pays on the mediated path.
    pub crossing_penalty: u64,
    /// Bytes per tick.
    pub bandwidth: u64,
}

impl Default for PathModel {
    fn default() -> Self {
        Self {
            fixed_overhead: 100,
            crossing_penalty: 600,
            bandwidth: 64,
        }
    }
}

impl PathModel {
    /// Predicted mediated/direct time ratio for blocks of `size` bytes.
    pub fn closed_form_speedup(&self, size: u64) -> f64 {
        let xfer = size as f64 / self.bandwidth as f64;
        let c = self.fixed_overhead as f64;
        (c + self.crossing_penalty as f64 + xfer) / (c + xfer)
    }
}

/// Adds a fixed stall before every DMA it forwards, modelling a privilege
/// crossing on each transfer request.
pub struct MediatedHal<'a> {
    inner: &'a mut SimDevice,
    penalty: u64,
}

impl<'a> MediatedHal<'a> {
    pub fn new(inner: &'a mut SimDevice, penalty: u64) -> Self {
        Self { inner, penalty }
    }
}

impl HalDriver for MediatedHal<'_> {
    fn write32(&mut self, addr: u64, value: u32) -> Result<(), HalError> {
        self.inner.write32(addr, value)
    }
    fn read32(&mut self, addr: u64) -> Result<u32, HalError> {
        self.inner.read32(addr)
    }
    fn write_block(&mut self, addr: u64, data: &[u8]) -> Result<(), HalError> {
        self.inner.write_block(addr, data)
    }
    fn initiate_dma(&mut self, desc: &DmaDescriptor) -> Result<DmaHandle, HalError> {
        self.inner.idle(self.penalty);
        self.inner.initiate_dma(desc)
    }
    fn wait_dma(&mut self, handle: DmaHandle) -> Result<(), HalError> {
        self.inner.wait_dma(handle)
    }
    fn poll_register_masked(&mut self, addr: u64, mask: u32, expected: u32, timeout_us: u32) -> Result<bool, HalError> {
        self.inner.poll_register_masked(addr, mask, expected, timeout_us)
    }
    fn flush_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError> {
        self.inner.flush_cache(addr, len)
    }
    fn invalidate_cache(&mut self, addr: u64, len: u64) -> Result<(), HalError> {
        self.inner.invalidate_cache(addr, len)
    }
    fn read_block(&mut self, addr: u64, out: &mut [u8]) -> Result<(), HalError> {
        self.inner.read_block(addr, out)
    }
    fn now(&self) -> u64 {
        self.inner.now()
    }
    fn wait_for_interrupt(&mut self) -> Result<bool, HalError> {
        self.inner.wait_for_interrupt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub size: u64,
    pub transfers: u64,
    pub direct_ticks: u64,
    pub mediated_ticks: u64,
    pub speedup: f64,
    pub model_speedup: f64,
}

pub const SWEEP_SIZES: [u64; 4] = [1 << 10, 4 << 10, 16 << 10, 32 << 10];
pub const SWEEP_VOLUME: u64 = 100 << 20;

fn time_transfers<H: HalDriver>(hal: &mut H, size: u64, count: u64, src: u64, dst: u64) -> Result<u64, HalError> {
    let start = hal.now();
    for _ in 0..count {
        let h = hal.initiate_dma(&DmaDescriptor {
            direction: DmaDirection::ToDevice,
            src,
            dst,
            length: size as u32,
        })?;
        hal.wait_dma(h)?;
    }
    Ok(hal.now() - start)
}

/// Moves `volume` bytes from global memory to one tile in blocks of each
/// size, once directly and once through [`MediatedHal`].
pub fn run_transfer_sweep(sizes: &[u64], volume: u64, model: &PathModel) -> Result<Vec<SweepRow>, BenchError> {
    let config = SimConfig {
        dma_setup_ticks: model.fixed_overhead,
        dma_bytes_per_tick: model.bandwidth.max(1),
        ..SimConfig::default()
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || !volume.is_multiple_of(size) {
            return Err(BenchError::Divisibility { size, volume });
        }
        if size > config.local_mem_size as u64 || size > config.global_mem_size {
            return Err(BenchError::BlockSize(size));
        }
        let n = volume / size;
        let mut dev = SimDevice::new(config.clone());
        let dst = dev.tile_base(0, 0) + LOCAL_MEM_OFFSET as u64;
        let direct = time_transfers(&mut dev, size, n, GLOBAL_BASE, dst)?;
        let mut dev = SimDevice::new(config.clone());
        let mediated = time_transfers(&mut MediatedHal::new(&mut dev, model.crossing_penalty), size, n, GLOBAL_BASE, dst)?;
        rows.push(SweepRow {
            size,
            transfers: n,
            direct_ticks: direct,
            mediated_ticks: mediated,
            speedup: mediated as f64 / direct as f64,
            model_speedup: model.closed_form_speedup(size),
        });
    }
    Ok(rows)
}

fn human_size(b: u64) -> String {
    if b >= 1 << 20 && b.is_multiple_of(1 << 20) {
        format!("{}M", b >> 20)
    } else if b >= 1 << 10 && b.is_multiple_of(1 << 10) {
        format!("{}K", b >> 10)
    } else {
        b.to_string()
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>10} {:>14} {:>14} {:>9} {:>9}",
        "size", "transfers", "direct_ticks", "mediated_ticks", "speedup", "model"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>14} {:>14} {:>8.3}x {:>8.3}x",
            human_size(r.size),
            r.transfers,
            r.direct_ticks,
            r.mediated_ticks,
            r.speedup,
            r.model_speedup
        );
    }
    s
}

pub fn stats_table(b: &KernelBench) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} ({} iterations, {} warm-up)",
        b.kernel.name(),
        b.iterations,
        b.warmup
    );
    let _ = writeln!(
        s,
        "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "stage", "mean", "sigma", "cv", "p50", "p99", "max"
    );
    for (name, st) in [("input", &b.input), ("compute", &b.compute), ("output", &b.output)] {
        let _ = writeln!(
            s,
            "{:<8} {:>10.2} {:>10.4} {:>10.6} {:>10} {:>10} {:>10}",
            name, st.mean, st.std_dev, st.cv, st.p50, st.p99, st.max
        );
    }
    s
}

/// CSV with columns `metric,key,value`.
pub fn write_csv<W: io::Write>(w: W, benches: &[KernelBench], sweep: &[SweepRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "key", "value"])?;
    for b in benches {
        let k = b.kernel.name();
        for (stage, st) in [("input", &b.input), ("compute", &b.compute), ("output", &b.output)] {
            for (m, v) in [
                ("mean", st.mean),
                ("sigma", st.std_dev),
                ("cv", st.cv),
                ("p50", st.p50),
                ("p99", st.p99),
                ("max", st.max),
            ] {
                out.write_record([format!("{k}.{m}"), stage.to_string(), v.to_string()])?;
            }
        }
    }
    for r in sweep {
        let size = r.size.to_string();
        out.write_record(["direct_ticks".to_string(), size.clone(), r.direct_ticks.to_string()])?;
        out.write_record(["mediated_ticks".to_string(), size.clone(), r.mediated_ticks.to_string()])?;
        out.write_record(["speedup".to_string(), size.clone(), r.speedup.to_string()])?;
        out.write_record(["model_speedup".to_string(), size, r.model_speedup.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let s = compute_stats(&[5.0; 1000], 10).unwrap();
        assert_eq!((s.mean, s.std_dev, s.cv, s.count), (5.0, 0.0, 0.0, 990));
    }

    #[test]
    fn warmup_discarded() {
        let s = compute_stats(&[10.0, 1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(s.cv, 0.0);
        assert_eq!(s.max, 1.0);
    }

    #[test]
    fn too_few_samples() {
        assert_eq!(compute_stats(&[1.0], 1), Err(StatsError { got: 1, warmup: 1 }));
    }

    #[test]
    fn percentiles_ordered() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = compute_stats(&v, 0).unwrap();
        assert_eq!((s.p50, s.p99, s.max, s.min), (50.0, 99.0, 100.0, 1.0));
    }

    #[test]
    fn closed_form_example() {
        let m = PathModel::default();
        assert!((m.closed_form_speedup(1024) - 716.0 / 116.0).abs() < 1e-12);
    }

    #[test]
    fn zero_penalty_is_unity() {
        let m = PathModel {
            crossing_penalty: 0,
            ..PathModel::default()
        };
        for r in run_transfer_sweep(&SWEEP_SIZES, 1 << 20, &m).unwrap() {
            assert_eq!(r.speedup, 1.0);
        }
    }

    #[test]
    fn sweep_rejects_non_divisor() {
        assert!(matches!(
            run_transfer_sweep(&[3000], 1 << 20, &PathModel::default()),
            Err(BenchError::Divisibility { .. })
        ));
    }

    #[test]
    fn bench_rejects_short_runs() {
        assert!(matches!(
            run_kernel_bench(BenchKernel::Passthrough { bytes: 64 }, 10, 0, SimConfig::default()),
            Err(BenchError::TooFewIterations(10))
        ));
    }
}
