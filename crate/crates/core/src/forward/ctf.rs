use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FsldError, Result};
use crate::rng::{domain, stream};

/// Parameters of the radially symmetric contrast transfer function
///
/// ```text
/// C(r) = -[(1-w) sin(π d s²) + w cos(π d s²)] · exp(-B s²),   s = r / R_max
/// ```
///
/// with `d = defocus`, `w = amp_contrast`, `B = b_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    pub defocus: f64,
    pub amp_contrast: f64,
    pub b_factor: f64,
}

impl CtfParams {
    pub fn new(defocus: f64, amp_contrast: f64, b_factor: f64) -> Result<Self> {
        let p = CtfParams { defocus, amp_contrast, b_factor };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.defocus.is_finite() {
            return Err(FsldError::invalid("CTF defocus must be finite"));
        }
        if !(self.amp_contrast > 0.0 && self.amp_contrast < 1.0) {
            return Err(FsldError::invalid(format!(
                "CTF amplitude contrast {} not in (0, 1)",
                self.amp_contrast
            )));
        }
        if !(self.b_factor >= 0.0 && self.b_factor.is_finite()) {
            return Err(FsldError::invalid(format!("CTF b-factor {} must be >= 0", self.b_factor)));
        }
        Ok(())
    }

    /// `C(r)` for `0 ≤ r ≤ r_max`.
    pub fn eval(&self, r: f64, r_max: f64) -> Result<f64> {
        if !(r >= 0.0 && r <= r_max) || r_max <= 0.0 {
            return Err(FsldError::invalid(format!("CTF radius {r} outside [0, {r_max}]")));
        }
        Ok(self.eval_unchecked(r, r_max))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, r: f64, r_max: f64) -> f64 {
        let s2 = (r / r_max).powi(2);
        let phase = PI * self.defocus * s2;
        let w = self.amp_contrast;
        -((1.0 - w) * phase.sin() + w * phase.cos()) * (-self.b_factor * s2).exp()
    }
}

/// Distribution of per-image CTF parameters: defocus uniform on
/// `[defocus_min, defocus_max]`, shared amplitude contrast and b-factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtfDistribution {
    pub defocus_min: f64,
    pub defocus_max: f64,
    pub amp_contrast: f64,
    pub b_factor: f64,
}

pub fn sample_ctfs(n: usize, dist: &CtfDistribution, seed: u64) -> Result<Vec<CtfParams>> {
    if dist.defocus_max < dist.defocus_min {
        return Err(FsldError::invalid("defocus_max < defocus_min"));
    }
    (0..n)
        .map(|i| {
            let defocus = if dist.defocus_max > dist.defocus_min {
                let mut rng = stream(seed, domain::CTFS, i as u64);
                rng.random_range(dist.defocus_min..dist.defocus_max)
            } else {
                dist.defocus_min
            };
            CtfParams::new(defocus, dist.amp_contrast, dist.b_factor)
        })
        .collect()
}
