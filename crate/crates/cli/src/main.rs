//! `w4a8`: quantize checkpoints, verify the integer GEMM engines, benchmark
//! them and compare quantization recipes.

mod bench_cmd;
mod checkpoint;
mod error;
mod eval;
mod output;
mod quantize;
mod scheme;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use w4a8_core::verify::{run_verification, VerifyConfig};

use crate::error::{CliError, CliResult};

const THREADS_ENV: &str = "ODYSSEY_THREADS";

#[derive(Debug, Parser)]
#[command(name = "w4a8", version, about = "W4A8 quantization and GEMM toolkit")]
struct Cli {
    /// Worker threads (default: all cores). ODYSSEY_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize every layer of a checkpoint directory.
    Quantize(quantize::QuantizeArgs),
    /// Exactness checks for packing and the integer GEMM paths.
    Verify(VerifyArgs),
    /// Time and count operations of the GEMM engines.
    GemmBench(bench_cmd::BenchArgs),
    /// Compare rtn, lwc and lwc+gptq per layer.
    EvalMse(eval::EvalArgs),
    /// Write a seeded synthetic checkpoint.
    Synth(checkpoint::SynthArgs),
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    random_cases: usize,
    #[arg(long, default_value_t = 50)]
    agreement_cases: usize,
    #[arg(long, default_value_t = 64)]
    max_dim: usize,
    /// Flip one packed weight nibble; the run must then fail.
    #[arg(long)]
    inject_fault: bool,
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    if args.max_dim == 0 {
        return Err(CliError::Usage("--max-dim must be positive".into()));
    }
    let report = run_verification(&VerifyConfig {
        seed: args.seed,
        random_cases: args.random_cases,
        max_dim: args.max_dim,
        agreement_cases: args.agreement_cases,
        inject_fault: args.inject_fault,
    })?;
    let mut failures = 0;
    for c in &report.checks {
        println!("{}: {} cases, {} failures", c.name, c.executed, c.failures.len());
        for f in &c.failures {
            eprintln!("  {}: {f}", c.name);
        }
        failures += c.failures.len();
    }
    if failures > 0 {
        return Err(CliError::Failed(format!("verification failed with {failures} mismatches")));
    }
    Ok(())
}

fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => match flag {
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Quantize(a) => quantize::cmd_quantize(a),
        Command::Verify(a) => cmd_verify(a),
        Command::GemmBench(a) => bench_cmd::cmd_gemm_bench(a),
        Command::EvalMse(a) => eval::cmd_eval_mse(a),
        Command::Synth(a) => checkpoint::cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
