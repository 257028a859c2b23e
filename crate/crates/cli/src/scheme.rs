use clap::Args;
use w4a8_core::bench::EngineKind;
use w4a8_core::clip::ClipGrid;
use w4a8_core::hessian::GptqConfig;
use w4a8_core::recipe::RecipeConfig;
use w4a8_core::{Granularity, QuantScheme};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct SchemeArgs {
    #[arg(long, default_value_t = 4)]
    pub bits: u8,
    /// per-tensor, per-channel or per-group.
    #[arg(long, default_value = "per-channel")]
    pub granularity: String,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// Min-max asymmetric quantization with a real zero point.
    #[arg(long)]
    pub asymmetric: bool,
    #[arg(long, default_value_t = 0.5)]
    pub clip_grid_min: f32,
    #[arg(long, default_value_t = 0.01)]
    pub clip_grid_step: f32,
    /// Process columns in descending Hessian-diagonal order.
    #[arg(long)]
    pub reorder: bool,
    #[arg(long, default_value_t = 0.01)]
    pub damp: f64,
}

impl SchemeArgs {
    pub fn granularity(&self) -> CliResult<Granularity> {
        let g = match self.granularity.as_str() {
            "per-group" => Granularity::PerGroup(self.group_size),
            other => other.parse()?,
        };
        if g == Granularity::PerToken {
            return Err(CliError::Usage("per-token granularity applies to activations only".into()));
        }
        if g.group_size() == Some(0) {
            return Err(CliError::Usage("group size must be positive".into()));
        }
        Ok(g)
    }

    pub fn config(&self) -> CliResult<RecipeConfig> {
        if !(self.damp >= 0.0 && self.damp.is_finite()) {
            return Err(CliError::Usage(format!("damping ratio {} must be non-negative", self.damp)));
        }
        Ok(RecipeConfig {
            scheme: QuantScheme::new(self.bits, !self.asymmetric, self.granularity()?)?,
            grid: ClipGrid::new(self.clip_grid_min, self.clip_grid_step)?,
            gptq: GptqConfig {
                damp_ratio: self.damp,
                reorder: self.reorder,
                ..GptqConfig::default()
            },
        })
    }
}

/// Rejects schemes the target engine cannot consume.
pub fn check_engine(scheme: &QuantScheme, engine: EngineKind) -> CliResult<()> {
    let reject = |why: &str| {
        Err(CliError::Usage(format!(
            "engine {engine} cannot use {}-bit {} {} weights: {why}",
            scheme.bits,
            if scheme.symmetric { "symmetric" } else { "asymmetric" },
            scheme.granularity
        )))
    };
    if !scheme.symmetric {
        return reject("all engines consume symmetric integer codes without a real zero point");
    }
    let per_channel = scheme.granularity == Granularity::PerChannel;
    let per_group = matches!(scheme.granularity, Granularity::PerGroup(_));
    match engine {
        EngineKind::W4A8Fast | EngineKind::W4A8Asymmetric if scheme.bits != 4 || !per_channel => {
            reject("it needs 4-bit per-channel weights")
        }
        EngineKind::W4A8FineGrained if scheme.bits != 4 || !per_group => {
            reject("it needs 4-bit per-group weights")
        }
        EngineKind::W4A16Grouped if scheme.bits != 4 || !(per_group || per_channel) => {
            reject("it needs 4-bit per-group or per-channel weights")
        }
        EngineKind::W8A8 if scheme.bits != 8 || !per_channel => reject("it needs 8-bit per-channel weights"),
        _ => Ok(()),
    }
}
