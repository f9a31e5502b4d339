use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcbrt_cli::*;

#[derive(Parser)]
#[command(name = "rcbrt", version, about = "Compile, run and serve control-block models on the simulated accelerator")]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a JSON graph into a model directory
    Compile {
        graph: PathBuf,
        out: PathBuf,
        /// Directory holding <id>.bin weight files (default: next to the graph)
        #[arg(long)]
        weights_dir: Option<PathBuf>,
        /// Emit cache maintenance before input transfers
        #[arg(long)]
        cache_ops: bool,
        /// Wait for completion events instead of polling status
        #[arg(long)]
        wait_event: bool,
    },
    /// Run one inference and write the raw output
    Infer {
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Serve the framed TCP protocol on localhost
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        /// Exit after this many client sessions
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Run kernel latency benches and the transfer-size sweep
    Bench {
        /// Run only the transfer sweep unless kernels are also given
        #[arg(long)]
        sweep: bool,
        /// matmul:N or passthrough:BYTES (repeatable)
        #[arg(long = "kernel")]
        kernels: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Ticks added to every transfer on the mediated path
        #[arg(long)]
        penalty: Option<u64>,
        /// Also write all metrics as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the per-operation execution trace of one inference
    Trace { model: PathBuf, input: PathBuf },
}

fn config(cli: &Cli) -> Result<CliConfig, CliError> {
    let mut c = CliConfig::default();
    if let Some(p) = &cli.config {
        c.apply_file(p)?;
    }
    for kv in &cli.overrides {
        c.apply_override(kv)?;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config(&cli)?;
    let stdout = &mut io::stdout().lock();
    match cli.cmd {
        Cmd::Compile {
            graph,
            out,
            weights_dir,
            cache_ops,
            wait_event,
        } => {
            let args = CompileArgs {
                graph: &graph,
                out: &out,
                weights_dir: weights_dir.as_deref(),
                cache_ops,
                wait_event,
            };
            cmd_compile(&cfg, &args, stdout)?;
        }
        Cmd::Infer { model, input, output } => {
            cmd_infer(&cfg, &model, &input, &output)?;
        }
        Cmd::Serve {
            model,
            port,
            max_connections,
        } => {
            if let Some(p) = port {
                cfg.port = p;
            }
            let model = model.or(cfg.model_dir.clone());
            cmd_serve(&cfg, model.as_deref(), max_connections, &mut io::stderr())?;
        }
        Cmd::Bench {
            sweep,
            kernels,
            iterations,
            warmup,
            penalty,
            csv,
        } => {
            let mut ks = kernels.iter().map(|k| parse_kernel(k)).collect::<Result<Vec<_>, _>>()?;
            let all = ks.is_empty() && !sweep;
            if all {
                ks = vec![parse_kernel("passthrough:4096")?, parse_kernel("matmul:64")?];
            }
            let args = BenchArgs {
                kernels: ks,
                sweep: sweep || all,
                iterations,
                warmup,
                penalty,
            };
            let report = cmd_bench(&cfg, &args, stdout)?;
            if let Some(path) = csv {
                let f = File::create(&path).map_err(|e| CliError::env(path.display(), e))?;
                report.write_csv(f)?;
            }
        }
        Cmd::Trace { model, input } => {
            cmd_trace(&cfg, &model, &input, stdout)?;
        }
    }
    stdout.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rcbrt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
