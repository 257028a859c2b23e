use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use w4a8_core::bench::{emit_report, run_sweep, table6_cases, BenchCase, EngineKind, ReportFormat};

use crate::error::{CliError, CliResult};
use crate::output::emit;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// File of `m n k` lines (commas also accepted, `#` starts a comment).
    #[arg(long)]
    pub shapes: Option<PathBuf>,
    /// Divisor applied to the built-in sweep; 1 runs the full shapes.
    #[arg(long, default_value_t = 8)]
    pub scale_down: usize,
    #[arg(long, value_delimiter = ',', default_value = "finegrained,asymmetric,fast,w8a8,w4a16")]
    pub engines: Vec<EngineKind>,
    #[arg(long, default_value = "finegrained")]
    pub baseline: EngineKind,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// table or csv.
    #[arg(long, default_value = "table")]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run cases concurrently.
    #[arg(long)]
    pub parallel_cases: bool,
}

pub fn parse_shapes(text: &str, group_size: usize, seed: u64) -> CliResult<Vec<BenchCase>> {
    let mut cases = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| CliError::Usage(format!("shapes line {}: {why}: {line:?}", lineno + 1));
        let dims: Vec<usize> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<usize>().map_err(|_| bad("expected integers")))
            .collect::<CliResult<_>>()?;
        let [m, n, k] = dims[..] else {
            return Err(bad("expected three dimensions m n k"));
        };
        if m == 0 || n == 0 || k == 0 {
            return Err(bad("dimensions must be positive"));
        }
        cases.push(BenchCase::new(m, n, k, group_size, seed.wrapping_add(cases.len() as u64)));
    }
    if cases.is_empty() {
        return Err(CliError::Usage("shapes file lists no cases".into()));
    }
    Ok(cases)
}

fn load_cases(args: &BenchArgs) -> CliResult<Vec<BenchCase>> {
    let mut cases = match &args.shapes {
        Some(p) => parse_shapes(&read_text(p)?, args.group_size, args.seed)?,
        None => {
            if args.scale_down == 0 {
                return Err(CliError::Usage("--scale-down must be positive".into()));
            }
            table6_cases(args.scale_down, args.group_size, args.seed)
        }
    };
    for c in &mut cases {
        c.engines = args.engines.clone();
        c.baseline = args.baseline;
        c.repeats = args.repeats;
        c.warmup = args.warmup;
        c.validate()?;
    }
    Ok(cases)
}

fn read_text(p: &Path) -> CliResult<String> {
    fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
}

pub fn cmd_gemm_bench(args: &BenchArgs) -> CliResult<()> {
    let cases = load_cases(args)?;
    let report = run_sweep(&cases, args.parallel_cases)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(&emit_report(&report, args.format), args.out.as_deref())
}
