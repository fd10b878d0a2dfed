//! Fourier grid layout, radial shells and disk masks.
//!
//! # Layout
//!
//! Each axis of length `M` stores the integer frequencies
//! `k ∈ [-⌈M/2⌉, ⌊M/2⌋)` in wrap-around order: storage position `p` holds
//! frequency `p` for `p < ⌊M/2⌋` and `p - M` otherwise. So the axis reads
//! `0, 1, …, ⌊M/2⌋-1, -⌈M/2⌉, …, -1`.
//!
//! Volumes are z-major, then y, then x:
//!
//! ```text
//! j = (pz * M + py) * M + px
//! ```
//!
//! and images use `j = py * M + px`. With `kz = 0` stored at `pz = 0`, the
//! first `M²` volume entries are exactly the `z = 0` slice, and an image index
//! is the same number as the volume index of the matching `z = 0` voxel. The DC
//! term `(0, 0, 0)` always sits at linear index 0.

use crate::error::{FsldError, Result};

/// Dimensionality of a grid index: an `M × M` image or an `M × M × M` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    Two,
    Three,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    m: usize,
}

impl GridSpec {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(FsldError::invalid("grid side length must be positive"));
        }
        Ok(GridSpec { m })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.m * self.m
    }

    #[inline]
    pub fn volume_len(&self) -> usize {
        self.m * self.m * self.m
    }

    /// Linear index of the DC voxel (and DC pixel).
    #[inline]
    pub fn dc_index(&self) -> usize {
        0
    }

    /// Largest mask radius whose rotated pixels keep every trilinear
    /// neighbour on the grid.
    #[inline]
    pub fn max_mask_radius(&self) -> usize {
        (self.m / 2).saturating_sub(1)
    }

    /// Smallest stored frequency, `-⌈M/2⌉`.
    #[inline]
    pub fn min_freq(&self) -> i64 {
        -(self.m.div_ceil(2) as i64)
    }

    /// One past the largest stored frequency, `⌊M/2⌋`.
    #[inline]
    pub fn freq_end(&self) -> i64 {
        (self.m / 2) as i64
    }

    #[inline]
    pub fn freq_of_pos(&self, p: usize) -> i64 {
        if p < self.m / 2 {
            p as i64
        } else {
            p as i64 - self.m as i64
        }
    }

    /// Storage position of frequency `k`, or `None` if `k` is off the grid.
    #[inline]
    pub fn pos_of_freq(&self, k: i64) -> Option<usize> {
        if k < self.min_freq() || k >= self.freq_end() {
            None
        } else if k >= 0 {
            Some(k as usize)
        } else {
            Some((k + self.m as i64) as usize)
        }
    }

    /// Frequency triple of a linear index. For `Dim::Two` the last entry is 0.
    pub fn coords_of_index(&self, j: usize, dim: Dim) -> Result<[i64; 3]> {
        let m = self.m;
        match dim {
            Dim::Two => {
                if j >= self.image_len() {
                    return Err(FsldError::invalid(format!(
                        "pixel index {j} out of range for M={m}"
                    )));
                }
                Ok([self.freq_of_pos(j % m), self.freq_of_pos(j / m), 0])
            }
            Dim::Three => {
                if j >= self.volume_len() {
                    return Err(FsldError::invalid(format!(
                        "voxel index {j} out of range for M={m}"
                    )));
                }
                Ok([
                    self.freq_of_pos(j % m),
                    self.freq_of_pos((j / m) % m),
                    self.freq_of_pos(j / (m * m)),
                ])
            }
        }
    }

    /// Inverse of [`GridSpec::coords_of_index`]. Two-dimensional lookups
    /// require `kz == 0`.
    pub fn index_of_coords(&self, k: [i64; 3], dim: Dim) -> Result<usize> {
        let off = || FsldError::invalid(format!("frequency {k:?} is off the M={} grid", self.m));
        let px = self.pos_of_freq(k[0]).ok_or_else(off)?;
        let py = self.pos_of_freq(k[1]).ok_or_else(off)?;
        match dim {
            Dim::Two => {
                if k[2] != 0 {
                    return Err(off());
                }
                Ok(py * self.m + px)
            }
            Dim::Three => {
                let pz = self.pos_of_freq(k[2]).ok_or_else(off)?;
                Ok((pz * self.m + py) * self.m + px)
            }
        }
    }

    /// Unchecked volume index from storage positions.
    #[inline]
    pub(crate) fn voxel_index(&self, px: usize, py: usize, pz: usize) -> usize {
        (pz * self.m + py) * self.m + px
    }

    /// Euclidean frequency radius of a voxel.
    pub fn voxel_radius(&self, j: usize) -> f64 {
        let m = self.m;
        let kx = self.freq_of_pos(j % m) as f64;
        let ky = self.freq_of_pos((j / m) % m) as f64;
        let kz = self.freq_of_pos(j / (m * m)) as f64;
        (kx * kx + ky * ky + kz * kz).sqrt()
    }

    fn check_mask_radius(&self, mask_radius: usize, min: usize) -> Result<()> {
        if mask_radius < min || mask_radius > self.max_mask_radius() {
            return Err(FsldError::invalid(format!(
                "mask radius {mask_radius} outside [{min}, {}] for M={}",
                self.max_mask_radius(),
                self.m
            )));
        }
        Ok(())
    }
}

/// Shell index of a point at Euclidean radius `r`: the nearest integer.
#[inline]
pub fn shell_of_radius(r: f64) -> usize {
    r.round() as usize
}

/// Image pixels lying in the disk `kx² + ky² ≤ R²`.
///
/// Every masked pixel has radius at most `R ≤ ⌊M/2⌋ - 1`, so any rotation of
/// it stays inside the ball where all trilinear neighbours exist.
#[derive(Clone, Debug, PartialEq)]
pub struct DiskMask {
    pub radius: usize,
    /// Ascending image linear indices.
    pub pixels: Vec<usize>,
    /// Integer frequencies `(kx, ky)` of each listed pixel.
    pub coords: Vec<[i64; 2]>,
    /// Euclidean radius of each listed pixel.
    pub radii: Vec<f64>,
}

impl DiskMask {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains_dc(&self) -> bool {
        self.pixels.first() == Some(&0)
    }
}

pub fn disk_mask(spec: &GridSpec, mask_radius: usize) -> Result<DiskMask> {
    spec.check_mask_radius(mask_radius, 0)?;
    let r2 = (mask_radius * mask_radius) as i64;
    let mut mask = DiskMask {
        radius: mask_radius,
        pixels: Vec::new(),
        coords: Vec::new(),
        radii: Vec::new(),
    };
    for j in 0..spec.image_len() {
        let [kx, ky, _] = spec.coords_of_index(j, Dim::Two)?;
        let d2 = kx * kx + ky * ky;
        if d2 <= r2 {
            mask.pixels.push(j);
            mask.coords.push([kx, ky]);
            mask.radii.push((d2 as f64).sqrt());
        }
    }
    Ok(mask)
}

/// Per-shell pixel and voxel counts inside the mask radius.
///
/// Shell `r` holds the points whose Euclidean radius rounds to `r` and is at
/// most `max_radius`; the outermost shell is therefore half as thick as the
/// others.
#[derive(Clone, Debug)]
pub struct ShellTable {
    pub spec: GridSpec,
    pub max_radius: usize,
    /// `P_x(r)` for `r = 0..=max_radius`.
    pub px_count: Vec<usize>,
    /// `P_v(r)` for `r = 0..=max_radius`.
    pub vx_count: Vec<usize>,
    shell_of_pixel: Vec<Option<u32>>,
    shell_of_voxel: Vec<Option<u32>>,
    voxel_members: Vec<Vec<usize>>,
}

impl ShellTable {
    pub fn num_shells(&self) -> usize {
        self.max_radius + 1
    }

    pub fn shell_of_pixel(&self, j: usize) -> Option<usize> {
        self.shell_of_pixel.get(j).copied().flatten().map(|s| s as usize)
    }

    pub fn shell_of_voxel(&self, j: usize) -> Option<usize> {
        self.shell_of_voxel.get(j).copied().flatten().map(|s| s as usize)
    }

    /// Voxel indices of shell `r`, ascending.
    pub fn voxels_in_shell(&self, r: usize) -> &[usize] {
        &self.voxel_members[r]
    }

    /// `P_x(r) / P_v(r)`, the per-shell pixel-to-voxel ratio.
    pub fn shell_ratio(&self, r: usize) -> Option<f64> {
        let v = *self.vx_count.get(r)?;
        (v > 0).then(|| self.px_count[r] as f64 / v as f64)
    }

    /// Ratio of disk pixels to ball voxels up to radius `r` (cumulative).
    pub fn cumulative_ratio(&self, r: usize) -> Option<f64> {
        if r > self.max_radius {
            return None;
        }
        let px: usize = self.px_count[..=r].iter().sum();
        let vx: usize = self.vx_count[..=r].iter().sum();
        (vx > 0).then(|| px as f64 / vx as f64)
    }

    /// Indices of the last third of the shells (at least one shell).
    pub fn top_third(&self) -> std::ops::Range<usize> {
        let n = self.num_shells();
        let k = n.div_ceil(3);
        n - k..n
    }
}

pub fn shell_table(spec: &GridSpec, mask_radius: usize) -> Result<ShellTable> {
    spec.check_mask_radius(mask_radius, 1)?;
    let r2 = (mask_radius * mask_radius) as i64;
    let nshell = mask_radius + 1;
    let mut px_count = vec![0usize; nshell];
    let mut vx_count = vec![0usize; nshell];
    let mut voxel_members = vec![Vec::new(); nshell];

    let mut shell_of_pixel = vec![None; spec.image_len()];
    for (j, slot) in shell_of_pixel.iter_mut().enumerate() {
        let [kx, ky, _] = spec.coords_of_index(j, Dim::Two)?;
        let d2 = kx * kx + ky * ky;
        if d2 <= r2 {
            let s = shell_of_radius((d2 as f64).sqrt());
            px_count[s] += 1;
            *slot = Some(s as u32);
        }
    }

    let mut shell_of_voxel = vec![None; spec.volume_len()];
    for (j, slot) in shell_of_voxel.iter_mut().enumerate() {
        let [kx, ky, kz] = spec.coords_of_index(j, Dim::Three)?;
        let d2 = kx * kx + ky * ky + kz * kz;
        if d2 <= r2 {
            let s = shell_of_radius((d2 as f64).sqrt());
            vx_count[s] += 1;
            voxel_members[s].push(j);
            *slot = Some(s as u32);
        }
    }

    Ok(ShellTable {
        spec: *spec,
        max_radius: mask_radius,
        px_count,
        vx_count,
        shell_of_pixel,
        shell_of_voxel,
        voxel_members,
    })
}
