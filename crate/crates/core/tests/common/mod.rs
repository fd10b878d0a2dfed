#![allow(dead_code)]

use fsld_core::forward::{
    sample_ctfs, sample_uniform_poses, synthesize_dataset, CtfDistribution, FourierVolume, ImageStack, Interp,
    Projector,
};
use fsld_core::grid::GridSpec;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..len).map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect()
}

pub fn random_volume(spec: GridSpec, seed: u64) -> FourierVolume {
    FourierVolume::from_values(spec, random_vec(spec.volume_len(), &mut rng(seed))).unwrap()
}

/// `Σ a · conj(b)`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn rel_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

pub fn ctf_dist() -> CtfDistribution {
    CtfDistribution { defocus_min: 1.0, defocus_max: 3.0, amp_contrast: 0.1, b_factor: 1.0 }
}

/// Random-volume dataset with uniform poses, optional CTFs and noise.
pub fn stack(m: usize, radius: usize, n: usize, mode: Interp, with_ctf: bool, sigma: f64, seed: u64) -> ImageStack {
    let spec = GridSpec::new(m).unwrap();
    let v = random_volume(spec, seed);
    let proj = Projector::new(spec, radius, mode).unwrap();
    let poses = sample_uniform_poses(n, 1.0, seed + 1);
    let ctfs = with_ctf.then(|| sample_ctfs(n, &ctf_dist(), seed + 2).unwrap());
    synthesize_dataset(&v, &poses, ctfs.as_deref(), sigma, &proj, seed + 3).unwrap()
}

/// Dense `Σ_i P_iᴴ C_i² P_i + λI`, column by column via project/backproject.
pub fn assemble_normal_matrix(stack: &ImageStack, lambda: f64) -> Vec<Vec<Complex64>> {
    let proj = stack.projector().unwrap();
    let n = stack.spec.volume_len();
    (0..n)
        .map(|j| {
            let mut e = FourierVolume::zeros(stack.spec);
            e.values[j] = Complex64::new(1.0, 0.0);
            let mut col = vec![Complex64::new(0.0, 0.0); n];
            col[j] += lambda;
            for (i, pose) in stack.poses.iter().enumerate() {
                let img = proj.project(&e, pose, stack.ctf(i)).unwrap();
                let back = proj.backproject(&img, pose, stack.ctf(i)).unwrap();
                col.iter_mut().zip(&back.values).for_each(|(c, b)| *c += b);
            }
            col
        })
        .collect()
}
