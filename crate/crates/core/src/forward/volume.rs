use num_complex::Complex64;

use crate::error::{FsldError, Result};
use crate::grid::GridSpec;

/// Complex Fourier-domain volume of `M³` values in the grid layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierVolume {
    pub spec: GridSpec,
    pub values: Vec<Complex64>,
}

impl FourierVolume {
    pub fn zeros(spec: GridSpec) -> Self {
        FourierVolume { values: vec![Complex64::new(0.0, 0.0); spec.volume_len()], spec }
    }

    pub fn from_values(spec: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != spec.volume_len() {
            return Err(FsldError::invalid(format!(
                "volume has {} values, grid needs {}",
                values.len(),
                spec.volume_len()
            )));
        }
        if !values.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(FsldError::invalid("volume contains non-finite values"));
        }
        Ok(FourierVolume { spec, values })
    }

    /// Real vector lifted to a volume (zero imaginary part).
    pub fn from_real(spec: GridSpec, values: &[f64]) -> Result<Self> {
        Self::from_values(spec, values.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    /// The `z = 0` slice: the first `M²` entries.
    pub fn z0_slice(&self) -> &[Complex64] {
        &self.values[..self.spec.image_len()]
    }
}
