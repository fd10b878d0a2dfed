//! Structure of `H = Σ_i P_iᴴ C_i² P_i + λI`: voxel hit counts, the exact
//! diagonal, Hessian-vector products and diagonal condition numbers.

use std::collections::HashSet;

use num_complex::Complex64;

use crate::error::{FsldError, Result};
use crate::forward::{CtfParams, Interp, Pose, Projector};
use crate::grid::{disk_mask, GridSpec};
use crate::parallel::tree_reduce;

/// Nearest-neighbour pixel-to-voxel maps, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTable {
    /// `rows[i][k]` is the voxel that masked pixel `k` of image `i` reads.
    pub rows: Vec<Vec<usize>>,
}

impl AssignmentTable {
    /// Voxels hit more than once by the same image, summed over images.
    pub fn duplicate_hits(&self) -> usize {
        self.rows
            .iter()
            .map(|row| row.len() - row.iter().collect::<HashSet<_>>().len())
            .sum()
    }
}

pub fn assignment_table(poses: &[Pose], projector: &Projector) -> AssignmentTable {
    let nn = projector.with_mode(Interp::Nearest);
    let rows = poses
        .iter()
        .map(|pose| {
            let rot = pose.rotation();
            (0..nn.mask().len()).map(|k| nn.stencil(&rot, k).idx[0]).collect()
        })
        .collect();
    AssignmentTable { rows }
}

/// `|Ω_j|`: the number of images whose nearest-neighbour slice reaches voxel
/// `j`, each image counted at most once.
#[derive(Clone, Debug, PartialEq)]
pub struct HitCounts {
    pub counts: Vec<u32>,
}

impl HitCounts {
    pub fn nonzero(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn hit_counts(poses: &[Pose], projector: &Projector) -> HitCounts {
    let nn = projector.with_mode(Interp::Nearest);
    let nvox = nn.spec().volume_len();
    let counts = tree_reduce(
        0..poses.len(),
        &|range| {
            let mut counts = vec![0u32; nvox];
            let mut seen = vec![usize::MAX; nvox];
            for i in range {
                let rot = poses[i].rotation();
                for k in 0..nn.mask().len() {
                    let j = nn.stencil(&rot, k).idx[0];
                    if seen[j] != i {
                        seen[j] = i;
                        counts[j] += 1;
                    }
                }
            }
            counts
        },
        &|mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        },
    );
    HitCounts { counts }
}

/// Options for [`exact_diag`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiagOptions {
    /// Count a voxel at most once per image in nearest-neighbour mode (the
    /// first masked pixel reaching it contributes). Ignored for trilinear.
    pub dedup: bool,
}

/// Exact diagonal of `Σ_i P_iᴴ C_i² P_i + λI` for the projector's mode.
///
/// Each masked pixel adds `w² C²` to every voxel of its interpolation stencil.
pub fn exact_diag(
    poses: &[Pose],
    ctfs: Option<&[CtfParams]>,
    lambda: f64,
    projector: &Projector,
    opts: DiagOptions,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(FsldError::invalid("lambda must be >= 0"));
    }
    check_ctfs(poses, ctfs)?;
    let nvox = projector.spec().volume_len();
    let dedup = opts.dedup && projector.mode() == Interp::Nearest;
    let mut diag = tree_reduce(
        0..poses.len(),
        &|range| {
            let mut acc = vec![0.0f64; nvox];
            let mut seen = vec![usize::MAX; if dedup { nvox } else { 0 }];
            for i in range {
                let rot = poses[i].rotation();
                let c2 = ctfs.map(|c| projector.ctf_on_mask(&c[i]));
                for k in 0..projector.mask().len() {
                    let scale = c2.as_ref().map_or(1.0, |c| c[k] * c[k]);
                    let st = projector.stencil(&rot, k);
                    if dedup {
                        let j = st.idx[0];
                        if seen[j] == i {
                            continue;
                        }
                        seen[j] = i;
                    }
                    for (j, w) in st.iter() {
                        acc[j] += w * w * scale;
                    }
                }
            }
            acc
        },
        &|mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        },
    );
    diag.iter_mut().for_each(|d| *d += lambda);
    Ok(diag)
}

/// Mini-batch Hessian-vector product
///
/// ```text
/// (n_total / |batch|) Σ_{i ∈ batch} P_iᴴ C_i² P_i z + λ z
/// ```
///
/// which is an unbiased estimate of `Hz` under uniform batch sampling and
/// equals `Hz` exactly for the full batch.
pub fn hvp(
    z: &[Complex64],
    batch: &[usize],
    poses: &[Pose],
    ctfs: Option<&[CtfParams]>,
    lambda: f64,
    projector: &Projector,
    n_total: usize,
) -> Result<Vec<Complex64>> {
    if batch.is_empty() {
        return Err(FsldError::invalid("empty batch"));
    }
    if z.len() != projector.spec().volume_len() {
        return Err(FsldError::invalid("vector length does not match the grid"));
    }
    check_ctfs(poses, ctfs)?;
    if batch.iter().any(|&i| i >= poses.len()) {
        return Err(FsldError::invalid("batch index out of range"));
    }
    let scale = n_total as f64 / batch.len() as f64;
    let mut out = normal_apply(z, batch, poses, ctfs, projector, scale);
    for (o, &zi) in out.iter_mut().zip(z) {
        *o += zi * lambda;
    }
    Ok(out)
}

/// `scale · Σ_{i ∈ batch} P_iᴴ C_i² P_i z` with a deterministic reduction.
pub(crate) fn normal_apply(
    z: &[Complex64],
    batch: &[usize],
    poses: &[Pose],
    ctfs: Option<&[CtfParams]>,
    projector: &Projector,
    scale: f64,
) -> Vec<Complex64> {
    let nvox = projector.spec().volume_len();
    tree_reduce(
        0..batch.len(),
        &|range| {
            let mut acc = vec![Complex64::new(0.0, 0.0); nvox];
            for &i in &batch[range] {
                let frame = projector.frame(&poses[i], ctfs.map(|c| &c[i]));
                projector.normal_apply_add(z, &frame, scale, &mut acc);
            }
            acc
        },
        &add_vectors,
    )
}

pub(crate) fn add_vectors(mut a: Vec<Complex64>, b: Vec<Complex64>) -> Vec<Complex64> {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    a
}

fn check_ctfs(poses: &[Pose], ctfs: Option<&[CtfParams]>) -> Result<()> {
    match ctfs {
        Some(c) if c.len() != poses.len() => Err(FsldError::invalid("one CTF per pose required")),
        _ => Ok(()),
    }
}

/// `max / min` of a positive diagonal, optionally over the voxels within
/// Euclidean frequency radius `restrict.1`.
pub fn condition_number(diag: &[f64], restrict: Option<(&GridSpec, f64)>) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for (j, &d) in diag.iter().enumerate() {
        if let Some((spec, r)) = restrict {
            if spec.voxel_radius(j) > r {
                continue;
            }
        }
        if !(d > 0.0) {
            return Err(FsldError::Numerical(format!(
                "diagonal entry {j} is {d}; an unhit voxel with lambda = 0 makes H singular"
            )));
        }
        max = max.max(d);
        min = min.min(d);
    }
    if !min.is_finite() {
        return Err(FsldError::invalid("no diagonal entries in range"));
    }
    Ok(max / min)
}

/// Restricted condition number for every integer radius `1..=max_radius`
/// in one pass over the volume.
pub fn kappa_by_radius(diag: &[f64], spec: &GridSpec, max_radius: usize) -> Result<Vec<f64>> {
    if diag.len() != spec.volume_len() {
        return Err(FsldError::invalid("diagonal length does not match the grid"));
    }
    // Per-radius extremes over voxels with ceil(radius) == r, then prefix.
    let mut lo = vec![f64::INFINITY; max_radius + 1];
    let mut hi = vec![f64::NEG_INFINITY; max_radius + 1];
    for (j, &d) in diag.iter().enumerate() {
        let r = spec.voxel_radius(j);
        if r > max_radius as f64 {
            continue;
        }
        let bin = r.ceil() as usize;
        if !(d > 0.0) {
            return Err(FsldError::Numerical(format!("diagonal entry {j} is {d}")));
        }
        lo[bin] = lo[bin].min(d);
        hi[bin] = hi[bin].max(d);
    }
    let mut out = Vec::with_capacity(max_radius);
    let (mut mn, mut mx) = (lo[0], hi[0]);
    for r in 1..=max_radius {
        mn = mn.min(lo[r]);
        mx = mx.max(hi[r]);
        out.push(mx / mn);
    }
    Ok(out)
}

/// Ratio of disk pixels to ball voxels within Euclidean radius `radius`.
pub fn pixel_voxel_ratio(spec: &GridSpec, radius: usize) -> Result<f64> {
    let px = disk_mask(spec, radius)?.len();
    let r2 = (radius * radius) as i64;
    let mut vx = 0usize;
    let lo = -(radius as i64);
    for kz in lo..=radius as i64 {
        for ky in lo..=radius as i64 {
            for kx in lo..=radius as i64 {
                if kx * kx + ky * ky + kz * kz <= r2 {
                    vx += 1;
                }
            }
        }
    }
    Ok(px as f64 / vx as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundRegime {
    /// `1/p ≤ N`: `κ ≥ (N+λ)/(pN+λ)`.
    LowerBound,
    /// `1/p > N`: some voxel is unhit and `κ = (N+λ)/λ`.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondBound {
    pub value: f64,
    pub regime: BoundRegime,
}

/// Pigeonhole bound on the diagonal condition number for `n` images when a
/// projected image covers a fraction `p` of the voxels.
pub fn cond_lower_bound(n: usize, lambda: f64, p: f64) -> Result<CondBound> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(FsldError::invalid(format!("pixel/voxel ratio {p} not in (0, 1]")));
    }
    let nf = n as f64;
    if 1.0 / p <= nf {
        Ok(CondBound { value: (nf + lambda) / (p * nf + lambda), regime: BoundRegime::LowerBound })
    } else {
        if !(lambda > 0.0) {
            return Err(FsldError::invalid("exact branch needs lambda > 0"));
        }
        Ok(CondBound { value: (nf + lambda) / lambda, regime: BoundRegime::Exact })
    }
}
