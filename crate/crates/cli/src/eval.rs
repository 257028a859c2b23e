use std::path::PathBuf;

use clap::Args;
use w4a8_core::recipe::compare_recipes;

use crate::checkpoint::{load_layer, read_manifest, synthetic_layer};
use crate::error::{CliError, CliResult};
use crate::output::emit;
use crate::scheme::SchemeArgs;

pub const EVAL_HEADER: [&str; 8] = [
    "layer",
    "weight_mse_rtn",
    "weight_mse_lwc",
    "weight_mse_lwc_gptq",
    "layerwise_error_rtn",
    "layerwise_error_lwc",
    "layerwise_error_lwc_gptq",
    "monotone",
];

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory; synthetic layers are used when absent.
    #[arg(long, requires = "calib")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    #[arg(long, default_value_t = 256)]
    pub calib_rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
}

/// Runs all three recipes per layer and reports weight MSE, layerwise output
/// error and whether `lwc+gptq <= lwc <= rtn` held.
pub fn cmd_eval_mse(args: &EvalArgs) -> CliResult<()> {
    let cfg = args.scheme.config()?;
    cfg.check(w4a8_core::recipe::Recipe::LwcGptq)?;
    let layers: Vec<(String, _, _)> = match (&args.input, &args.calib) {
        (Some(input), Some(calib)) => read_manifest(input)?
            .into_iter()
            .map(|name| {
                let w = load_layer(input, &name)?;
                let x = load_layer(calib, &name)?;
                Ok((name, w, x))
            })
            .collect::<CliResult<_>>()?,
        (None, None) => {
            if args.layers == 0 || args.rows == 0 || args.cols == 0 || args.calib_rows == 0 {
                return Err(CliError::Usage("layer count and dimensions must be positive".into()));
            }
            (0..args.layers)
                .map(|i| {
                    let (w, x) = synthetic_layer(args.seed, i, args.rows, args.cols, args.calib_rows);
                    (format!("layer{i}"), w, x)
                })
                .collect()
        }
        _ => return Err(CliError::Usage("--input and --calib go together".into())),
    };

    let mut report = csv::Writer::from_writer(Vec::new());
    report.write_record(EVAL_HEADER).expect("writing to memory");
    let mut monotone = 0;
    for (name, w, x) in &layers {
        let c = compare_recipes(w, x, &cfg)?;
        monotone += c.is_monotone() as usize;
        let mut rec = vec![name.clone()];
        rec.extend(c.weight_mse.iter().chain(&c.layerwise_error).map(|v| format!("{v:e}")));
        rec.push(c.is_monotone().to_string());
        report.write_record(rec).expect("writing to memory");
    }
    let text = String::from_utf8(report.into_inner().expect("flush to memory")).expect("ascii fields");
    emit(&text, args.out.as_deref())?;
    eprintln!("monotone on {monotone}/{} layers", layers.len());
    Ok(())
}
