use std::fs;
use std::path::PathBuf;

use clap::Args;
use w4a8_core::bench::EngineKind;
use w4a8_core::hessian::layerwise_error;
use w4a8_core::otf::write_quantized;
use w4a8_core::recipe::{quantize_layer, Recipe};

use crate::checkpoint::{create_dir, load_layer, read_manifest, write_manifest};
use crate::error::{CliError, CliResult};
use crate::scheme::{check_engine, SchemeArgs};

pub const REPORT_HEADER: [&str; 8] = [
    "layer",
    "recipe",
    "rows",
    "cols",
    "mse_before",
    "mse_after",
    "layerwise_error_before",
    "layerwise_error_after",
];

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Checkpoint directory with manifest.txt and <layer>.otf weights.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Directory of <layer>.otf calibration activations (samples x in_features).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// rtn, lwc or lwc+gptq.
    #[arg(long, default_value = "rtn")]
    pub recipe: Recipe,
    /// Check the scheme against the engine that will consume it.
    #[arg(long)]
    pub engine: Option<EngineKind>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
}

/// `mse_before` is plain min-max RTN under the same scheme; `mse_after` is
/// the selected recipe. Layerwise errors need calibration data.
pub fn cmd_quantize(args: &QuantizeArgs) -> CliResult<()> {
    let cfg = args.scheme.config()?;
    cfg.check(args.recipe)?;
    if let Some(engine) = args.engine {
        check_engine(&cfg.scheme, engine)?;
    }
    if args.recipe.needs_calibration() && args.calib.is_none() {
        return Err(CliError::Usage(format!(
            "recipe {} needs calibration activations (--calib)",
            args.recipe
        )));
    }
    let names = read_manifest(&args.input)?;
    create_dir(&args.output)?;

    let mut report = csv::Writer::from_writer(Vec::new());
    report.write_record(REPORT_HEADER).expect("writing to memory");
    for name in &names {
        let w = load_layer(&args.input, name)?;
        let calib = match &args.calib {
            Some(dir) => Some(load_layer(dir, name)?),
            None => None,
        };
        cfg.scheme.validate_for_weight(w.rows(), w.cols())?;
        let base = quantize_layer(&w, None, Recipe::Rtn, &cfg)?;
        let result = quantize_layer(&w, calib.as_ref(), args.recipe, &cfg)?;
        let (err_before, err_after) = match &calib {
            Some(x) => (
                format!("{:e}", layerwise_error(&w, &base.quantized, x)?),
                format!("{:e}", layerwise_error(&w, &result.quantized, x)?),
            ),
            None => (String::new(), String::new()),
        };
        write_quantized(&result.quantized, args.output.join(name))?;
        report
            .write_record([
                name.clone(),
                args.recipe.to_string(),
                w.rows().to_string(),
                w.cols().to_string(),
                format!("{:e}", base.weight_mse),
                format!("{:e}", result.weight_mse),
                err_before,
                err_after,
            ])
            .expect("writing to memory");
        println!(
            "{name}: {}x{} {} mse {:e} -> {:e}",
            w.rows(),
            w.cols(),
            args.recipe,
            base.weight_mse,
            result.weight_mse
        );
    }
    write_manifest(&args.output, &names)?;
    let path = args.output.join("report.csv");
    fs::write(&path, report.into_inner().expect("flush to memory"))
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    Ok(())
}
