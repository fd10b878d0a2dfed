use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ctf::CtfParams;
use super::pose::{sample_uniform_poses, Pose};
use super::projector::{Interp, Projector};
use super::volume::FourierVolume;
use crate::error::{FsldError, Result};
use crate::grid::{Dim, GridSpec};
use crate::rng::{domain, stream};

/// Particle images with their poses and CTFs.
///
/// Images are stored back to back, `M²` values each, in image layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub spec: GridSpec,
    pub mask_radius: usize,
    pub mode: Interp,
    pub sigma: f64,
    pub seed: u64,
    pub poses: Vec<Pose>,
    /// `None` when the images carry no CTF.
    pub ctfs: Option<Vec<CtfParams>>,
    pub images: Vec<Complex64>,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn image(&self, i: usize) -> &[Complex64] {
        let n = self.spec.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn ctf(&self, i: usize) -> Option<&CtfParams> {
        self.ctfs.as_ref().map(|c| &c[i])
    }

    pub fn projector(&self) -> Result<Projector> {
        Projector::new(self.spec, self.mask_radius, self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        if n == 0 {
            return Err(FsldError::data("image stack is empty"));
        }
        if self.images.len() != n * self.spec.image_len() {
            return Err(FsldError::data(format!(
                "stack holds {} values, expected {} images of {} pixels",
                self.images.len(),
                n,
                self.spec.image_len()
            )));
        }
        if let Some(c) = &self.ctfs {
            if c.len() != n {
                return Err(FsldError::data(format!("{} CTFs for {} images", c.len(), n)));
            }
            for p in c {
                p.validate().map_err(|e| FsldError::data(e.to_string()))?;
            }
        }
        if self.mask_radius > self.spec.max_mask_radius() {
            return Err(FsldError::data(format!("mask radius {} too large", self.mask_radius)));
        }
        if !(self.sigma >= 0.0) {
            return Err(FsldError::data("negative noise level"));
        }
        Ok(())
    }

    /// Copy with image `i` of the result being image `indices[i]` of `self`.
    pub fn select(&self, indices: &[usize]) -> ImageStack {
        let mut images = Vec::with_capacity(indices.len() * self.spec.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        ImageStack {
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            ctfs: self.ctfs.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            images,
            ..self.clone()
        }
    }
}

/// `x_i = C_i P_i v + η_i` with complex Gaussian noise of variance `σ²` per
/// masked pixel. Off-mask pixels are zero.
pub fn synthesize_dataset(
    v: &FourierVolume,
    poses: &[Pose],
    ctfs: Option<&[CtfParams]>,
    sigma: f64,
    projector: &Projector,
    seed: u64,
) -> Result<ImageStack> {
    if poses.is_empty() {
        return Err(FsldError::invalid("need at least one pose"));
    }
    if let Some(c) = ctfs {
        if c.len() != poses.len() {
            return Err(FsldError::invalid("one CTF per pose required"));
        }
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(FsldError::invalid("sigma must be finite and >= 0"));
    }
    if v.spec != projector.spec() {
        return Err(FsldError::invalid("volume grid does not match projector grid"));
    }
    let spec = projector.spec();
    let mask = projector.mask();
    let npix = spec.image_len();
    let half_sd = sigma / 2f64.sqrt();

    let mut images = vec![Complex64::new(0.0, 0.0); poses.len() * npix];
    let mut masked = vec![Complex64::new(0.0, 0.0); mask.len()];
    for (i, pose) in poses.iter().enumerate() {
        let frame = projector.frame(pose, ctfs.map(|c| &c[i]));
        projector.project_masked(&v.values, &frame, &mut masked);
        if sigma > 0.0 {
            let mut rng = stream(seed, domain::NOISE, i as u64);
            for z in masked.iter_mut() {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *z += Complex64::new(half_sd * re, half_sd * im);
            }
        }
        let img = &mut images[i * npix..(i + 1) * npix];
        for (&j, &z) in mask.pixels.iter().zip(&masked) {
            img[j] = z;
        }
    }

    Ok(ImageStack {
        spec,
        mask_radius: mask.radius,
        mode: projector.mode(),
        sigma,
        seed,
        poses: poses.to_vec(),
        ctfs: ctfs.map(|c| c.to_vec()),
        images,
    })
}

/// Mean `|C_i P_i v|²` over all masked pixels of all images.
pub fn mean_signal_power(v: &FourierVolume, poses: &[Pose], ctfs: Option<&[CtfParams]>, projector: &Projector) -> f64 {
    let mut masked = vec![Complex64::new(0.0, 0.0); projector.mask().len()];
    let mut total = 0.0;
    for (i, pose) in poses.iter().enumerate() {
        let frame = projector.frame(pose, ctfs.map(|c| &c[i]));
        projector.project_masked(&v.values, &frame, &mut masked);
        total += masked.iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    total / (poses.len() * projector.mask().len()) as f64
}

/// Noise level giving the requested mean per-pixel signal-to-noise power ratio.
pub fn sigma_for_snr(signal_power: f64, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(FsldError::invalid("SNR must be positive"));
    }
    Ok((signal_power / snr).sqrt())
}

/// Analytic Fourier transform of a sum of anisotropic Gaussian blobs.
///
/// Blob centres lie within `M/5` pixels of the box centre and the standard
/// deviations range over 0.6–3 pixels, so the spectrum has content out to the
/// edge of the mask. The result is scaled so that the DC value is 1.
pub fn phantom(spec: GridSpec, n_blobs: usize, seed: u64) -> Result<FourierVolume> {
    if n_blobs == 0 {
        return Err(FsldError::invalid("phantom needs at least one blob"));
    }
    let m = spec.m() as f64;
    struct Blob {
        amp: f64,
        centre: [f64; 3],
        cov: [[f64; 3]; 3],
    }
    let orientations = sample_uniform_poses(n_blobs, 0.0, seed ^ domain::PHANTOM);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|b| {
            let mut rng = stream(seed, domain::PHANTOM, b as u64);
            let amp = rng.random_range(0.5..1.5);
            let reach = m / 5.0;
            let centre = std::array::from_fn(|_| rng.random_range(-reach..reach));
            let sd: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..3.0));
            let r = orientations[b].rotation();
            let mut cov = [[0.0; 3]; 3];
            for a in 0..3 {
                for c in 0..3 {
                    cov[a][c] = (0..3).map(|k| r[a][k] * sd[k] * sd[k] * r[c][k]).sum();
                }
            }
            // Integrated mass grows with the blob volume.
            Blob { amp: amp * sd[0] * sd[1] * sd[2], centre, cov }
        })
        .collect();

    let mut values = Vec::with_capacity(spec.volume_len());
    for j in 0..spec.volume_len() {
        let k = spec.coords_of_index(j, Dim::Three)?.map(|c| c as f64 / m);
        let mut acc = Complex64::new(0.0, 0.0);
        for b in &blobs {
            let mut quad = 0.0;
            for a in 0..3 {
                for c in 0..3 {
                    quad += k[a] * b.cov[a][c] * k[c];
                }
            }
            let shift = k[0] * b.centre[0] + k[1] * b.centre[1] + k[2] * b.centre[2];
            acc += Complex64::from_polar(b.amp * (-2.0 * PI * PI * quad).exp(), -2.0 * PI * shift);
        }
        values.push(acc);
    }
    let dc = values[spec.dc_index()].re;
    for z in values.iter_mut() {
        *z /= dc;
    }
    FourierVolume::from_values(spec, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_identity_images_are_z0_slice() {
        let spec = GridSpec::new(8).unwrap();
        let v = phantom(spec, 3, 1).unwrap();
        let proj = Projector::new(spec, 3, Interp::Trilinear).unwrap();
        let poses = vec![Pose::identity(); 4];
        let stack = synthesize_dataset(&v, &poses, None, 0.0, &proj, 5).unwrap();
        for i in 0..4 {
            let img = stack.image(i);
            for j in 0..spec.image_len() {
                let want = if proj.mask().pixels.contains(&j) { v.values[j] } else { Complex64::new(0.0, 0.0) };
                assert_eq!(img[j], want);
            }
        }
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let spec = GridSpec::new(8).unwrap();
        let v = FourierVolume::zeros(spec);
        let proj = Projector::new(spec, 3, Interp::Nearest).unwrap();
        let poses = sample_uniform_poses(2000, 0.0, 3);
        let stack = synthesize_dataset(&v, &poses, None, 1.0, &proj, 17).unwrap();
        for &j in &proj.mask().pixels {
            let n = stack.len() as f64;
            let mean: Complex64 = (0..stack.len()).map(|i| stack.image(i)[j]).sum::<Complex64>() / n;
            let var: f64 = (0..stack.len()).map(|i| (stack.image(i)[j] - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
            assert!((var - 1.0).abs() < 0.1, "pixel {j} variance {var}");
        }
        for i in 0..stack.len() {
            for j in 0..spec.image_len() {
                if !proj.mask().pixels.contains(&j) {
                    assert_eq!(stack.image(i)[j], Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_order_free() {
        let spec = GridSpec::new(8).unwrap();
        let v = phantom(spec, 4, 2).unwrap();
        let proj = Projector::new(spec, 3, Interp::Trilinear).unwrap();
        let poses = sample_uniform_poses(6, 1.0, 3);
        let a = synthesize_dataset(&v, &poses, None, 0.3, &proj, 9).unwrap();
        let b = synthesize_dataset(&v, &poses, None, 0.3, &proj, 9).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&v, &poses[..3], None, 0.3, &proj, 9).unwrap();
        assert_eq!(&a.images[..3 * spec.image_len()], &c.images[..]);
    }

    #[test]
    fn phantom_normalized_and_decaying() {
        let spec = GridSpec::new(16).unwrap();
        let v = phantom(spec, 5, 11).unwrap();
        assert!((v.values[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert_eq!(v, phantom(spec, 5, 11).unwrap());
        let far = spec.index_of_coords([7, 0, 0], Dim::Three).unwrap();
        assert!(v.values[far].norm() < v.values[0].norm());
    }

    #[test]
    fn snr_sigma() {
        assert!((sigma_for_snr(2.0, 0.5).unwrap() - 2.0).abs() < 1e-15);
        assert!(sigma_for_snr(1.0, 0.0).is_err());
    }

    #[test]
    fn select_reorders() {
        let spec = GridSpec::new(6).unwrap();
        let v = phantom(spec, 2, 1).unwrap();
        let proj = Projector::new(spec, 2, Interp::Nearest).unwrap();
        let poses = sample_uniform_poses(3, 0.0, 1);
        let s = synthesize_dataset(&v, &poses, None, 0.1, &proj, 2).unwrap();
        let t = s.select(&[2, 0]);
        assert_eq!(t.image(0), s.image(2));
        assert_eq!(t.poses[1], s.poses[0]);
    }
}
