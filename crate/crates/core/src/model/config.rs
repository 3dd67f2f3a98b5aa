use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spread of the Gaussian resampling kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaPolicy {
    /// `σ_i = max(d_i, 1) / divisor`.
    DurationScaled {
        #[serde(default = "default_divisor")]
        divisor: f64,
    },
    /// Same `σ` (frames) for every phoneme.
    Fixed { sigma: f64 },
    /// `σ_i = s · max(d_i, 1)` with a learned scalar `s`, initialised to `init`.
    Learnable { init: f64 },
}

/// Boundary frames sit `d/2 ± 1/2` from the two neighbouring centres, so the
/// log-weight gap there is `divisor² / (2d)`; 12 keeps the resampling round
/// trip within 1e-3 for durations up to 8 frames.
pub const DEFAULT_SIGMA_DIVISOR: f64 = 12.0;

fn default_divisor() -> f64 {
    DEFAULT_SIGMA_DIVISOR
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::DurationScaled {
            divisor: DEFAULT_SIGMA_DIVISOR,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    #[default]
    Rvq,
    /// Continuous bottleneck: the encoder output reaches the decoder unquantized.
    None,
}

/// Architecture hyperparameters. `vocab_size` and `speakers` of 0 are filled
/// in from the corpus when a model is created.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub levels: usize,
    pub codes: usize,
    pub code_dim: usize,
    pub mel_bands: usize,
    pub speakers: usize,
    pub vocab_size: usize,
    pub sigma: SigmaPolicy,
    pub quantization: Quantization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            layers: 2,
            heads: 2,
            conv_kernel: 7,
            ffn_mult: 2,
            levels: 2,
            codes: 64,
            code_dim: 3,
            mel_bands: 80,
            speakers: 0,
            vocab_size: 0,
            sigma: SigmaPolicy::default(),
            quantization: Quantization::Rvq,
        }
    }
}

impl ModelConfig {
    /// The full-size configuration: 256-dim, 4 layers, 4 heads, 256 codes.
    pub fn paper_scale() -> Self {
        Self {
            model_dim: 256,
            layers: 4,
            heads: 4,
            conv_kernel: 15,
            ffn_mult: 4,
            codes: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Contract(format!("model.{field}: {why}")));
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("ffn_mult", self.ffn_mult),
            ("codes", self.codes),
            ("code_dim", self.code_dim),
            ("mel_bands", self.mel_bands),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.model_dim % self.heads != 0 {
            return bad(
                "heads",
                format!("model_dim {} is not divisible by {} heads", self.model_dim, self.heads),
            );
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel", "must be odd for centred padding".into());
        }
        if self.quantization == Quantization::Rvq && self.levels == 0 {
            return bad("levels", "must be at least 1 with rvq quantization".into());
        }
        if self.codes < 2 && self.quantization == Quantization::Rvq {
            return bad("codes", "need at least 2 codes per level".into());
        }
        match self.sigma {
            SigmaPolicy::Fixed { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                return bad("sigma.sigma", "must be positive".into());
            }
            SigmaPolicy::Learnable { init } if !(init > 0.0 && init.is_finite()) => {
                return bad("sigma.init", "must be positive".into());
            }
            SigmaPolicy::DurationScaled { divisor } if !(divisor > 0.0 && divisor.is_finite()) => {
                return bad("sigma.divisor", "must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }
}
