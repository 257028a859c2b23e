//! The three weight recipes compared in the ablation: plain RTN, RTN with
//! learned clipping, and clipping followed by Hessian compensation.

use std::fmt;
use std::str::FromStr;

use crate::clip::{optimize_clipping, ClipGrid, ClipResult};
use crate::error::{Error, Result};
use crate::hessian::{gptq_quantize_layer_with, layerwise_error, GptqConfig, HessianState};
use crate::quant::{dequantize, quantize_weights, Granularity, QuantScheme, QuantizedTensor};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Recipe {
    Rtn,
    Lwc,
    LwcGptq,
}

impl Recipe {
    pub const ALL: [Recipe; 3] = [Recipe::Rtn, Recipe::Lwc, Recipe::LwcGptq];

    pub fn name(&self) -> &'static str {
        match self {
            Recipe::Rtn => "rtn",
            Recipe::Lwc => "lwc",
            Recipe::LwcGptq => "lwc+gptq",
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self, Recipe::LwcGptq)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Recipe::Rtn),
            "lwc" => Ok(Recipe::Lwc),
            "lwc+gptq" | "gptq" => Ok(Recipe::LwcGptq),
            other => Err(Error::InvalidScheme(format!("unknown recipe {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeConfig {
    pub scheme: QuantScheme,
    pub grid: ClipGrid,
    pub gptq: GptqConfig,
}

impl Default for RecipeConfig {
    /// Symmetric 4-bit per-channel with the default clip grid.
    fn default() -> Self {
        Self {
            scheme: QuantScheme::per_channel(4).expect("valid"),
            grid: ClipGrid::default(),
            gptq: GptqConfig::default(),
        }
    }
}

impl RecipeConfig {
    /// Rejects combinations the recipe cannot honor.
    pub fn check(&self, recipe: Recipe) -> Result<()> {
        if recipe != Recipe::Rtn
            && !(self.scheme.symmetric && self.scheme.granularity == Granularity::PerChannel)
        {
            return Err(Error::InvalidScheme(format!(
                "recipe {recipe} needs a symmetric per-channel scheme, got {} {}",
                if self.scheme.symmetric { "symmetric" } else { "asymmetric" },
                self.scheme.granularity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub recipe: Recipe,
    pub quantized: QuantizedTensor,
    pub clip: Option<ClipResult>,
    /// Mean squared weight reconstruction error.
    pub weight_mse: f64,
}

/// Mean of `(w - dequantize(q))²` over all elements.
pub fn weight_mse(w: &DenseTensor, q: &QuantizedTensor) -> Result<f64> {
    let d = w.sub(&dequantize(q))?;
    if d.is_empty() {
        return Ok(0.0);
    }
    Ok(d.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d.data().len() as f64)
}

/// Quantizes one layer. `calib` holds `(samples, in_features)` activations
/// and is required for [`Recipe::LwcGptq`].
pub fn quantize_layer(
    w: &DenseTensor,
    calib: Option<&DenseTensor>,
    recipe: Recipe,
    cfg: &RecipeConfig,
) -> Result<LayerResult> {
    cfg.check(recipe)?;
    let (quantized, clip) = match recipe {
        Recipe::Rtn => (quantize_weights(w, &cfg.scheme)?, None),
        Recipe::Lwc => {
            let clip = optimize_clipping(w, cfg.scheme.bits, &cfg.grid)?;
            let scheme = clip.apply_to(cfg.scheme.clone())?;
            (quantize_weights(w, &scheme)?, Some(clip))
        }
        Recipe::LwcGptq => {
            let x = calib.ok_or_else(|| {
                Error::InvalidScheme("lwc+gptq needs calibration activations".into())
            })?;
            let clip = optimize_clipping(w, cfg.scheme.bits, &cfg.grid)?;
            let scheme = clip.apply_to(cfg.scheme.clone())?;
            let mut h = HessianState::new(w.cols());
            h.accumulate(x)?;
            (gptq_quantize_layer_with(w, &mut h, &scheme, &cfg.gptq)?, Some(clip))
        }
    };
    let weight_mse = weight_mse(w, &quantized)?;
    Ok(LayerResult {
        recipe,
        quantized,
        clip,
        weight_mse,
    })
}

/// Weight MSE and output error of every recipe on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeComparison {
    pub weight_mse: [f64; 3],
    pub layerwise_error: [f64; 3],
}

impl RecipeComparison {
    /// `gptq ≤ lwc ≤ rtn` on the output error.
    pub fn is_monotone(&self) -> bool {
        let e = &self.layerwise_error;
        e[2] <= e[1] && e[1] <= e[0]
    }
}

pub fn compare_recipes(w: &DenseTensor, calib: &DenseTensor, cfg: &RecipeConfig) -> Result<RecipeComparison> {
    let mut weight = [0.0; 3];
    let mut error = [0.0; 3];
    for (i, recipe) in Recipe::ALL.into_iter().enumerate() {
        let r = quantize_layer(w, Some(calib), recipe, cfg)?;
        weight[i] = r.weight_mse;
        error[i] = layerwise_error(w, &r.quantized, calib)?;
    }
    Ok(RecipeComparison {
        weight_mse: weight,
        layerwise_error: error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian, gaussian_with_outliers, seeded_rng, OutlierSpec};

    #[test]
    fn parse_names() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        assert!("awq".parse::<Recipe>().is_err());
    }

    #[test]
    fn gptq_requires_calibration() {
        let w = gaussian(4, 8, 1.0, &mut seeded_rng(0));
        assert!(quantize_layer(&w, None, Recipe::LwcGptq, &RecipeConfig::default()).is_err());
    }

    #[test]
    fn clipping_rejected_for_asymmetric() {
        let w = gaussian(4, 8, 1.0, &mut seeded_rng(0));
        let cfg = RecipeConfig {
            scheme: QuantScheme::new(4, false, Granularity::PerChannel).unwrap(),
            ..Default::default()
        };
        assert!(quantize_layer(&w, None, Recipe::Lwc, &cfg).is_err());
        assert!(quantize_layer(&w, None, Recipe::Rtn, &cfg).is_ok());
    }

    #[test]
    fn lwc_weight_mse_not_worse() {
        let mut rng = seeded_rng(10);
        let (w, _) = gaussian_with_outliers(16, 64, OutlierSpec::default(), &mut rng);
        let cfg = RecipeConfig::default();
        let rtn = quantize_layer(&w, None, Recipe::Rtn, &cfg).unwrap();
        let lwc = quantize_layer(&w, None, Recipe::Lwc, &cfg).unwrap();
        assert!(lwc.weight_mse <= rtn.weight_mse);
        let clip = lwc.clip.unwrap();
        assert!((clip.mean_mse_after() - lwc.weight_mse).abs() <= 1e-9 * lwc.weight_mse);
    }
}
