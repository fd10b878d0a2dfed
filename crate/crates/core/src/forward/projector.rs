//! Central-slice projection and its adjoint.
//!
//! For a masked pixel with frequency `r = (kx, ky, 0)` and pose rotation `R`,
//! the volume is sampled at `Rᵀ r`, either at the nearest grid voxel or by
//! trilinear interpolation of the 8 surrounding voxels. The sample is then
//! multiplied by the shift phase `exp(-2πi (kx tx + ky ty) / M)` and by the
//! CTF value `C(|r|)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::ctf::CtfParams;
use super::pose::Pose;
use super::volume::FourierVolume;
use crate::error::{FsldError, Result};
use crate::grid::{disk_mask, DiskMask, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Interp {
    #[serde(rename = "nn")]
    Nearest,
    #[serde(rename = "tri")]
    Trilinear,
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interp::Nearest => "nn",
            Interp::Trilinear => "tri",
        })
    }
}

impl FromStr for Interp {
    type Err = FsldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Interp::Nearest),
            "tri" => Ok(Interp::Trilinear),
            other => Err(FsldError::Config(format!("unknown interpolation mode {other:?} (nn|tri)"))),
        }
    }
}

/// Interpolation weights of one pixel: `n` voxel indices with weights.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub n: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.n].iter().copied().zip(self.w[..self.n].iter().copied())
    }

    #[inline]
    pub fn gather(&self, v: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..self.n {
            acc += v[self.idx[k]] * self.w[k];
        }
        acc
    }

    #[inline]
    pub fn scatter(&self, val: Complex64, out: &mut [Complex64]) {
        for k in 0..self.n {
            out[self.idx[k]] += val * self.w[k];
        }
    }
}

/// Per-image quantities shared by every pixel of one projection.
pub struct ImageFrame {
    rot: [[f64; 3]; 3],
    phase: Vec<Complex64>,
    ctf: Option<Vec<f64>>,
}

impl ImageFrame {
    /// Combined pixel factor `C_k T_k` for masked pixel `k`.
    #[inline]
    pub(crate) fn factor(&self, k: usize) -> Complex64 {
        match &self.ctf {
            Some(c) => self.phase[k] * c[k],
            None => self.phase[k],
        }
    }

    #[inline]
    pub(crate) fn rot(&self) -> &[[f64; 3]; 3] {
        &self.rot
    }

    #[inline]
    pub(crate) fn ctf_sq(&self, k: usize) -> f64 {
        self.ctf.as_ref().map_or(1.0, |c| c[k] * c[k])
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    spec: GridSpec,
    mask: DiskMask,
    mode: Interp,
}

impl Projector {
    pub fn new(spec: GridSpec, mask_radius: usize, mode: Interp) -> Result<Self> {
        Ok(Projector { mask: disk_mask(&spec, mask_radius)?, spec, mode })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn mask(&self) -> &DiskMask {
        &self.mask
    }

    pub fn mode(&self) -> Interp {
        self.mode
    }

    pub fn with_mode(&self, mode: Interp) -> Projector {
        Projector { mode, ..self.clone() }
    }

    /// Radius at which the CTF argument reaches 1.
    pub fn ctf_r_max(&self) -> f64 {
        self.mask.radius.max(1) as f64
    }

    /// CTF values on the masked pixels.
    pub fn ctf_on_mask(&self, ctf: &CtfParams) -> Vec<f64> {
        let rmax = self.ctf_r_max();
        self.mask.radii.iter().map(|&r| ctf.eval_unchecked(r, rmax)).collect()
    }

    pub fn frame(&self, pose: &Pose, ctf: Option<&CtfParams>) -> ImageFrame {
        let m = self.spec.m() as f64;
        let phase = if pose.t == [0.0, 0.0] {
            vec![Complex64::new(1.0, 0.0); self.mask.len()]
        } else {
            self.mask
                .coords
                .iter()
                .map(|&[kx, ky]| {
                    let arg = -2.0 * PI * (kx as f64 * pose.t[0] + ky as f64 * pose.t[1]) / m;
                    Complex64::from_polar(1.0, arg)
                })
                .collect()
        };
        ImageFrame { rot: pose.rotation(), phase, ctf: ctf.map(|c| self.ctf_on_mask(c)) }
    }

    /// Rotated sample position `Rᵀ r` of masked pixel `k`.
    #[inline]
    pub fn sample_position(&self, rot: &[[f64; 3]; 3], k: usize) -> [f64; 3] {
        let [kx, ky] = self.mask.coords[k];
        let (x, y) = (kx as f64, ky as f64);
        [
            rot[0][0] * x + rot[1][0] * y,
            rot[0][1] * x + rot[1][1] * y,
            rot[0][2] * x + rot[1][2] * y,
        ]
    }

    #[inline]
    pub fn stencil(&self, rot: &[[f64; 3]; 3], k: usize) -> Stencil {
        let pos = self.sample_position(rot, k);
        match self.mode {
            Interp::Nearest => self.nearest_stencil(pos),
            Interp::Trilinear => self.trilinear_stencil(pos),
        }
    }

    fn nearest_stencil(&self, pos: [f64; 3]) -> Stencil {
        let spec = &self.spec;
        let mut cand = [[0i64; 2]; 3];
        let mut ncand = [1usize; 3];
        for a in 0..3 {
            let fl = pos[a].floor();
            if pos[a] - fl == 0.5 {
                cand[a] = [fl as i64, fl as i64 + 1];
                ncand[a] = 2;
            } else {
                cand[a][0] = pos[a].round() as i64;
            }
        }
        let mut best = usize::MAX;
        for &kz in &cand[2][..ncand[2]] {
            for &ky in &cand[1][..ncand[1]] {
                for &kx in &cand[0][..ncand[0]] {
                    if let (Some(px), Some(py), Some(pz)) =
                        (spec.pos_of_freq(kx), spec.pos_of_freq(ky), spec.pos_of_freq(kz))
                    {
                        best = best.min(spec.voxel_index(px, py, pz));
                    }
                }
            }
        }
        debug_assert!(best != usize::MAX, "nearest voxel off grid at {pos:?}");
        Stencil { idx: [best, 0, 0, 0, 0, 0, 0, 0], w: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], n: 1 }
    }

    fn trilinear_stencil(&self, pos: [f64; 3]) -> Stencil {
        let spec = &self.spec;
        let top = spec.freq_end() - 1;
        let mut p0 = [0usize; 3];
        let mut p1 = [0usize; 3];
        let mut f = [0f64; 3];
        for a in 0..3 {
            // Keep base+1 on the grid; a coordinate exactly at the top
            // frequency gets fraction 1 on the upper neighbour.
            let base = (pos[a].floor() as i64).min(top - 1).max(spec.min_freq());
            f[a] = (pos[a] - base as f64).clamp(0.0, 1.0);
            p0[a] = spec.pos_of_freq(base).expect("masked pixel rotated off grid");
            p1[a] = spec.pos_of_freq(base + 1).expect("masked pixel rotated off grid");
        }
        let mut st = Stencil { idx: [0; 8], w: [0.0; 8], n: 8 };
        let mut n = 0;
        for (pz, wz) in [(p0[2], 1.0 - f[2]), (p1[2], f[2])] {
            for (py, wy) in [(p0[1], 1.0 - f[1]), (p1[1], f[1])] {
                for (px, wx) in [(p0[0], 1.0 - f[0]), (p1[0], f[0])] {
                    st.idx[n] = spec.voxel_index(px, py, pz);
                    st.w[n] = wx * wy * wz;
                    n += 1;
                }
            }
        }
        st
    }

    /// Projection restricted to the masked pixels (mask order).
    pub fn project_masked(&self, v: &[Complex64], frame: &ImageFrame, out: &mut [Complex64]) {
        debug_assert_eq!(out.len(), self.mask.len());
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.stencil(&frame.rot, k).gather(v) * frame.factor(k);
        }
    }

    /// Adds `Pᴴ Cᴴ y` for a masked-pixel vector `y` into `out`.
    pub fn backproject_masked_add(&self, y: &[Complex64], frame: &ImageFrame, out: &mut [Complex64]) {
        debug_assert_eq!(y.len(), self.mask.len());
        for (k, &val) in y.iter().enumerate() {
            self.stencil(&frame.rot, k).scatter(val * frame.factor(k).conj(), out);
        }
    }

    /// Adds `scale · Pᴴ C² P z` into `out`. The shift phases cancel.
    pub fn normal_apply_add(&self, z: &[Complex64], frame: &ImageFrame, scale: f64, out: &mut [Complex64]) {
        for k in 0..self.mask.len() {
            let st = self.stencil(&frame.rot, k);
            let val = st.gather(z) * (scale * frame.ctf_sq(k));
            st.scatter(val, out);
        }
    }

    /// Full `M × M` projected image; pixels outside the mask are zero.
    pub fn project(&self, v: &FourierVolume, pose: &Pose, ctf: Option<&CtfParams>) -> Result<Vec<Complex64>> {
        self.check_volume(v)?;
        let frame = self.frame(pose, ctf);
        let mut masked = vec![Complex64::new(0.0, 0.0); self.mask.len()];
        self.project_masked(&v.values, &frame, &mut masked);
        Ok(self.unmask(&masked))
    }

    /// Exact adjoint of [`Projector::project`]. Off-mask pixels are ignored.
    pub fn backproject(&self, img: &[Complex64], pose: &Pose, ctf: Option<&CtfParams>) -> Result<FourierVolume> {
        if img.len() != self.spec.image_len() {
            return Err(FsldError::invalid(format!(
                "image has {} pixels, grid needs {}",
                img.len(),
                self.spec.image_len()
            )));
        }
        let frame = self.frame(pose, ctf);
        let masked = self.gather_mask(img);
        let mut out = FourierVolume::zeros(self.spec);
        self.backproject_masked_add(&masked, &frame, &mut out.values);
        Ok(out)
    }

    pub fn gather_mask(&self, img: &[Complex64]) -> Vec<Complex64> {
        self.mask.pixels.iter().map(|&j| img[j]).collect()
    }

    pub fn unmask(&self, masked: &[Complex64]) -> Vec<Complex64> {
        let mut img = vec![Complex64::new(0.0, 0.0); self.spec.image_len()];
        for (&j, &z) in self.mask.pixels.iter().zip(masked) {
            img[j] = z;
        }
        img
    }

    fn check_volume(&self, v: &FourierVolume) -> Result<()> {
        if v.spec != self.spec || v.values.len() != self.spec.volume_len() {
            return Err(FsldError::invalid("volume grid does not match projector grid"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::pose::sample_uniform_poses;
    use crate::grid::Dim;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn ramp_volume(spec: GridSpec) -> FourierVolume {
        let vals = (0..spec.volume_len()).map(|j| c(j as f64 + 1.0, 0.5 * j as f64)).collect();
        FourierVolume::from_values(spec, vals).unwrap()
    }

    #[test]
    fn identity_pose_reads_z0_slice() {
        let spec = GridSpec::new(8).unwrap();
        let v = ramp_volume(spec);
        for mode in [Interp::Nearest, Interp::Trilinear] {
            let p = Projector::new(spec, 3, mode).unwrap();
            let img = p.project(&v, &Pose::identity(), None).unwrap();
            for j in 0..spec.image_len() {
                let want = if p.mask().pixels.contains(&j) { v.values[j] } else { c(0.0, 0.0) };
                assert_eq!(img[j], want, "mode {mode} pixel {j}");
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_z0_slice() {
        // Rᵀ (kx, ky, 0) = (ky, -kx, 0) for a +90° turn about z; every
        // masked pixel maps to one distinct z=0 voxel.
        let spec = GridSpec::new(4).unwrap();
        let v = ramp_volume(spec);
        let p = Projector::new(spec, 1, Interp::Nearest).unwrap();
        let pose = Pose::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2, [0.0, 0.0]).unwrap();
        let img = p.project(&v, &pose, None).unwrap();
        let mut hit = Vec::new();
        for (&j, &[kx, ky]) in p.mask().pixels.iter().zip(&p.mask().coords) {
            let src = spec.index_of_coords([ky, -kx, 0], Dim::Three).unwrap();
            assert_eq!(img[j], v.values[src]);
            hit.push(src);
        }
        hit.sort();
        let mut mask_sorted = p.mask().pixels.clone();
        mask_sorted.sort();
        assert_eq!(hit, mask_sorted);
    }

    #[test]
    fn shift_phase_on_unit_frequency() {
        let spec = GridSpec::new(8).unwrap();
        let mut vals = vec![c(0.0, 0.0); spec.volume_len()];
        for z in vals.iter_mut().take(spec.image_len()) {
            *z = c(1.0, 0.0);
        }
        let v = FourierVolume::from_values(spec, vals).unwrap();
        let p = Projector::new(spec, 3, Interp::Nearest).unwrap();
        let pose = Pose::new([1.0, 0.0, 0.0, 0.0], [1.0, 0.0]).unwrap();
        let img = p.project(&v, &pose, None).unwrap();
        let j = spec.index_of_coords([1, 0, 0], Dim::Two).unwrap();
        let want = Complex64::from_polar(1.0, -2.0 * PI / 8.0);
        assert!((img[j] - want).norm() < 1e-15);
        for (&j, _) in p.mask().pixels.iter().zip(0..) {
            assert!((img[j].norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn nn_backprojection_of_ones() {
        let spec = GridSpec::new(8).unwrap();
        let p = Projector::new(spec, 3, Interp::Nearest).unwrap();
        let ones = vec![c(1.0, 0.0); spec.image_len()];
        let vol = p.backproject(&ones, &Pose::identity(), None).unwrap();
        for j in 0..spec.volume_len() {
            let want = if p.mask().pixels.contains(&j) { 1.0 } else { 0.0 };
            assert_eq!(vol.values[j], c(want, 0.0));
        }
        let zero = p.backproject(&vec![c(0.0, 0.0); spec.image_len()], &Pose::identity(), None).unwrap();
        assert!(zero.values.iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn trilinear_partition_of_unity_and_in_grid() {
        let spec = GridSpec::new(10).unwrap();
        let p = Projector::new(spec, spec.max_mask_radius(), Interp::Trilinear).unwrap();
        for pose in sample_uniform_poses(50, 0.0, 4) {
            let rot = pose.rotation();
            for k in 0..p.mask().len() {
                let st = p.stencil(&rot, k);
                let s: f64 = st.w.iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
                assert!(st.idx.iter().all(|&i| i < spec.volume_len()));
                assert!(st.w.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn nn_tie_picks_lowest_index() {
        let spec = GridSpec::new(8).unwrap();
        let p = Projector::new(spec, 3, Interp::Nearest).unwrap();
        // (0.5, 0, 0) is equidistant from (0,0,0) (index 0) and (1,0,0) (index 1).
        let st = p.nearest_stencil([0.5, 0.0, 0.0]);
        assert_eq!(st.idx[0], 0);
        // (-0.5, 0.5, 0): candidates (-1,0),(0,0),(-1,1),(0,1); DC wins.
        let st = p.nearest_stencil([-0.5, 0.5, 0.0]);
        assert_eq!(st.idx[0], 0);
    }

    #[test]
    fn interp_parse_round_trip() {
        for m in [Interp::Nearest, Interp::Trilinear] {
            assert_eq!(m.to_string().parse::<Interp>().unwrap(), m);
        }
        assert!("linear".parse::<Interp>().is_err());
    }
}
