//! Checkpoint directories: `manifest.txt` lists layer names in order, each
//! layer lives in `<layer>.otf`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use w4a8_core::otf::{read_dense, write_dense};
use w4a8_core::synth::{calibration_activations, gaussian_with_outliers, seeded_rng, CalibSpec, OutlierSpec};
use w4a8_core::DenseTensor;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.txt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

pub fn read_manifest(dir: &Path) -> CliResult<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    for n in &names {
        check_layer_name(n)?;
    }
    if names.is_empty() {
        return Err(CliError::Usage(format!("{} lists no layers", path.display())));
    }
    Ok(names)
}

pub fn write_manifest(dir: &Path, names: &[String]) -> CliResult<()> {
    let path = dir.join(MANIFEST);
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn check_layer_name(name: &str) -> CliResult<()> {
    if name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(CliError::Usage(format!("invalid layer name {name:?}")));
    }
    Ok(())
}

pub fn layer_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.otf"))
}

pub fn load_layer(dir: &Path, name: &str) -> CliResult<DenseTensor> {
    Ok(read_dense(layer_path(dir, name))?)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Seeded weights and calibration activations for layer `index`.
pub fn synthetic_layer(
    seed: u64,
    index: usize,
    rows: usize,
    cols: usize,
    calib_rows: usize,
) -> (DenseTensor, DenseTensor) {
    let mut rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64));
    let (w, _) = gaussian_with_outliers(rows, cols, OutlierSpec::default(), &mut rng);
    let x = calibration_activations(calib_rows, cols, CalibSpec::default(), &mut rng);
    (w, x)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Checkpoint directory to create.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write calibration activations here.
    #[arg(long)]
    pub calib_output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    #[arg(long, default_value_t = 256)]
    pub calib_rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    if args.layers == 0 || args.rows == 0 || args.cols == 0 || args.calib_rows == 0 {
        return Err(CliError::Usage("layer count and dimensions must be positive".into()));
    }
    create_dir(&args.output)?;
    if let Some(c) = &args.calib_output {
        create_dir(c)?;
    }
    let names: Vec<String> = (0..args.layers).map(|i| format!("layer{i}")).collect();
    for (i, name) in names.iter().enumerate() {
        let (w, x) = synthetic_layer(args.seed, i, args.rows, args.cols, args.calib_rows);
        write_dense(&w, layer_path(&args.output, name))?;
        if let Some(c) = &args.calib_output {
            write_dense(&x, layer_path(c, name))?;
        }
    }
    write_manifest(&args.output, &names)?;
    println!("wrote {} layers to {}", names.len(), args.output.display());
    Ok(())
}
