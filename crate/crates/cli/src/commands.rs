use std::fs;
use std::io::{self, Write};
use std::net::{Ipv4Addr, TcpListener};
use std::path::Path;

use rcbrt::bench::{
    run_kernel_bench, run_transfer_sweep, stats_table, sweep_table, write_csv, BenchKernel, KernelBench, PathModel,
    SweepRow, SWEEP_SIZES, SWEEP_VOLUME,
};
use rcbrt::compiler::pack::IMAGE_FILE;
use rcbrt::compiler::{compile, weights_from_dir, CompiledModel};
use rcbrt::net::serve;
use rcbrt::{RunOutput, Runtime};

use crate::config::CliConfig;
use crate::error::CliError;

pub struct CompileArgs<'a> {
    pub graph: &'a Path,
    pub out: &'a Path,
    pub weights_dir: Option<&'a Path>,
    pub cache_ops: bool,
    pub wait_event: bool,
}

/// Compiles a graph document into a model directory.
pub fn cmd_compile(cfg: &CliConfig, args: &CompileArgs<'_>, out: &mut dyn Write) -> Result<CompiledModel, CliError> {
    let text = fs::read_to_string(args.graph).map_err(|e| CliError::input(args.graph.display(), e))?;
    let opts = cfg.lower_options(args.cache_ops, args.wait_event);
    let weights_dir = args
        .weights_dir
        .or(cfg.weights_dir.as_deref())
        .or_else(|| args.graph.parent())
        .unwrap_or(Path::new("."));
    let model = compile(&text, &opts, weights_from_dir(weights_dir))?;
    model.write_to(args.out)?;
    writeln!(
        out,
        "{} control blocks, {} byte image written to {}",
        model.rcbs.len(),
        model.image.len(),
        args.out.display()
    )?;
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<CompiledModel, CliError> {
    if !dir.join(IMAGE_FILE).is_file() {
        return Err(CliError::Input(format!("{}: not a model directory", dir.display())));
    }
    Ok(CompiledModel::read_from(dir)?)
}

fn run_model(cfg: &CliConfig, model_dir: &Path, input: &Path) -> Result<RunOutput, CliError> {
    let model = load_model(model_dir)?;
    let bytes = fs::read(input).map_err(|e| CliError::input(input.display(), e))?;
    let mut rt = Runtime::with_model(cfg.sim.clone(), &model)?;
    Ok(rt.run(&bytes)?)
}

/// Runs one inference in-process and writes the raw output bytes.
pub fn cmd_infer(cfg: &CliConfig, model_dir: &Path, input: &Path, output: &Path) -> Result<RunOutput, CliError> {
    let r = run_model(cfg, model_dir, input)?;
    fs::write(output, &r.output).map_err(|e| CliError::env(output.display(), e))?;
    Ok(r)
}

/// Prints one line per executed operation.
pub fn cmd_trace(cfg: &CliConfig, model_dir: &Path, input: &Path, out: &mut dyn Write) -> Result<RunOutput, CliError> {
    let r = run_model(cfg, model_dir, input)?;
    out.write_all(r.trace.to_text().as_bytes())?;
    Ok(r)
}

pub fn bind_listener(port: u16) -> Result<TcpListener, CliError> {
    TcpListener::bind((Ipv4Addr::LOCALHOST, port)).map_err(|e| CliError::env(format!("port {port}"), e))
}

/// Serves requests on `listener`, optionally preloading a model.
pub fn serve_on(
    cfg: &CliConfig,
    listener: &TcpListener,
    model_dir: Option<&Path>,
    max_connections: Option<usize>,
) -> Result<(), CliError> {
    let mut rt = match model_dir {
        Some(dir) => Runtime::with_model(cfg.sim.clone(), &load_model(dir)?)?,
        None => Runtime::new(cfg.sim.clone()),
    };
    serve(listener, &mut rt, max_connections)?;
    Ok(())
}

pub fn cmd_serve(
    cfg: &CliConfig,
    model_dir: Option<&Path>,
    max_connections: Option<usize>,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let listener = bind_listener(cfg.port)?;
    writeln!(err, "listening on {}", listener.local_addr()?)?;
    serve_on(cfg, &listener, model_dir, max_connections)
}

/// Parses `matmul:N` or `passthrough:BYTES`.
pub fn parse_kernel(s: &str) -> Result<BenchKernel, CliError> {
    let bad = || CliError::Input(format!("bad kernel spec {s:?}, expected matmul:N or passthrough:BYTES"));
    let (name, size) = s.split_once(':').ok_or_else(bad)?;
    let n: u32 = size.parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    match name {
        "matmul" => Ok(BenchKernel::Matmul { n }),
        "passthrough" => Ok(BenchKernel::Passthrough { bytes: n }),
        _ => Err(bad()),
    }
}

pub struct BenchArgs {
    pub kernels: Vec<BenchKernel>,
    pub sweep: bool,
    pub iterations: usize,
    pub warmup: usize,
    pub penalty: Option<u64>,
}

pub struct BenchReport {
    pub kernels: Vec<KernelBench>,
    pub sweep: Vec<SweepRow>,
}

impl BenchReport {
    pub fn write_csv(&self, w: impl io::Write) -> Result<(), CliError> {
        write_csv(w, &self.kernels, &self.sweep).map_err(|e| CliError::env("csv", e))
    }
}

pub fn cmd_bench(cfg: &CliConfig, args: &BenchArgs, out: &mut dyn Write) -> Result<BenchReport, CliError> {
    let bench_err = |e: rcbrt::bench::BenchError| match e {
        rcbrt::bench::BenchError::TooFewIterations(_)
        | rcbrt::bench::BenchError::Compile(_)
        | rcbrt::bench::BenchError::Divisibility { .. }
        | rcbrt::bench::BenchError::BlockSize(_) => CliError::Input(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    };
    let mut report = BenchReport {
        kernels: Vec::new(),
        sweep: Vec::new(),
    };
    for k in &args.kernels {
        let b = run_kernel_bench(*k, args.iterations, args.warmup, cfg.sim.clone()).map_err(bench_err)?;
        out.write_all(stats_table(&b).as_bytes())?;
        writeln!(out)?;
        report.kernels.push(b);
    }
    if args.sweep {
        let model = PathModel {
            fixed_overhead: cfg.sim.dma_setup_ticks,
            bandwidth: cfg.sim.dma_bytes_per_tick,
            crossing_penalty: args.penalty.unwrap_or(PathModel::default().crossing_penalty),
        };
        report.sweep = run_transfer_sweep(&SWEEP_SIZES, SWEEP_VOLUME, &model).map_err(bench_err)?;
        out.write_all(sweep_table(&report.sweep).as_bytes())?;
    }
    Ok(report)
}
