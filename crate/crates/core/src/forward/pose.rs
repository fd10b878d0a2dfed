use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FsldError, Result};
use crate::rng::{domain, stream};

/// Rotation (unit quaternion, scalar first) plus in-plane shift in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub q: [f64; 4],
    pub t: [f64; 2],
}

impl Pose {
    pub fn identity() -> Self {
        Pose { q: [1.0, 0.0, 0.0, 0.0], t: [0.0, 0.0] }
    }

    /// Normalizes `q`; fails on a zero or non-finite quaternion.
    pub fn new(q: [f64; 4], t: [f64; 2]) -> Result<Self> {
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) || !t.iter().all(|c| c.is_finite()) {
            return Err(FsldError::invalid("pose needs a finite non-zero quaternion and finite shift"));
        }
        Ok(Pose { q: q.map(|c| c / n), t })
    }

    /// Rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 2]) -> Result<Self> {
        let n = axis.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(FsldError::invalid("rotation axis must be non-zero"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Pose::new([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n], t)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.q;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }
}

/// `n` poses with rotations uniform on SO(3) and shifts uniform in
/// `[-shift_bound, shift_bound]²`.
pub fn sample_uniform_poses(n: usize, shift_bound: f64, seed: u64) -> Vec<Pose> {
    sample_concentrated_poses(n, shift_bound, 0.0, seed)
}

/// Like [`sample_uniform_poses`], but the Gaussian quaternion draw is offset
/// by `concentration` along the identity, so rotations cluster around it
/// (a preferred orientation). `concentration = 0` is uniform.
pub fn sample_concentrated_poses(n: usize, shift_bound: f64, concentration: f64, seed: u64) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, domain::POSES, i as u64);
            loop {
                let mut q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
                if concentration != 0.0 {
                    q[0] += concentration;
                }
                let t = if shift_bound > 0.0 {
                    [
                        rng.random_range(-shift_bound..=shift_bound),
                        rng.random_range(-shift_bound..=shift_bound),
                    ]
                } else {
                    [0.0, 0.0]
                };
                if let Ok(p) = Pose::new(q, t) {
                    break p;
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(r: &[[f64; 3]; 3]) -> f64 {
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        assert_eq!(sample_uniform_poses(50, 2.0, 7), sample_uniform_poses(50, 2.0, 7));
        assert_ne!(sample_uniform_poses(5, 2.0, 7), sample_uniform_poses(5, 2.0, 8));
    }

    #[test]
    fn prefix_stable() {
        let a = sample_uniform_poses(10, 1.0, 3);
        let b = sample_uniform_poses(4, 1.0, 3);
        assert_eq!(&a[..4], &b[..]);
    }

    #[test]
    fn zero_shift_bound() {
        assert!(sample_uniform_poses(100, 0.0, 1).iter().all(|p| p.t == [0.0, 0.0]));
    }

    #[test]
    fn shifts_within_bound() {
        for p in sample_uniform_poses(500, 1.5, 2) {
            assert!(p.t.iter().all(|c| c.abs() <= 1.5));
        }
    }

    #[test]
    fn rotations_are_proper_orthogonal() {
        for p in sample_uniform_poses(200, 0.0, 11) {
            let qn: f64 = p.q.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() < 1e-12);
            let r = p.rotation();
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[a][k] * r[b][k]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
            assert!((det(&r) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_rotation_is_near_zero() {
        // Haar measure on SO(3) has E[R] = 0.
        let poses = sample_uniform_poses(10_000, 0.0, 5);
        let mut mean = [[0.0; 3]; 3];
        for p in &poses {
            let r = p.rotation();
            for a in 0..3 {
                for b in 0..3 {
                    mean[a][b] += r[a][b] / poses.len() as f64;
                }
            }
        }
        for row in mean {
            for v in row {
                assert!(v.abs() < 0.05, "mean entry {v}");
            }
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = Pose::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2, [0.0, 0.0]).unwrap();
        let r = p.rotation();
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for a in 0..3 {
            for b in 0..3 {
                assert!((r[a][b] - want[a][b]).abs() < 1e-15);
            }
        }
    }
}
