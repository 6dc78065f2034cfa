use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Power-law exponent applied to normalised intensities. Values below one
/// brighten dark regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSpec {
    pub gamma: f64,
}

impl Default for GammaSpec {
    fn default() -> Self {
        Self { gamma: 0.2 }
    }
}

impl GammaSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        let spec = Self { gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `x ↦ x^γ` on intensities in `[0, 1]`.
pub fn gamma_correct(image: &Tensor, spec: &GammaSpec) -> Result<Tensor> {
    spec.validate()?;
    Ok(image.map(|x| x.clamp(0.0, 1.0).powf(spec.gamma)))
}

/// 8-bit variant: normalise by 255, apply the power law, rescale and round
/// half away from zero.
pub fn gamma_correct_u8(pixels: &[u8], spec: &GammaSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    Ok(pixels.iter().map(|&p| (255.0 * (p as f64 / 255.0).powf(spec.gamma)).round() as u8).collect())
}
