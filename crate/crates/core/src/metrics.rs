//! Fourier shell correlation, relative errors, epochs-to-threshold and
//! per-shell gradient variance.

use num_complex::Complex64;

use crate::error::{FsldError, Result};
use crate::forward::{FourierVolume, ImageStack};
use crate::grid::ShellTable;
use crate::optim::{batch_schedule, loss_and_grad, OptimConfig};

/// Per-shell correlation between two volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FscCurve {
    pub radii: Vec<usize>,
    pub counts: Vec<usize>,
    /// `Re(FSC)` per shell; `None` where either shell norm is zero.
    pub values: Vec<Option<f64>>,
    pub complex: Vec<Option<Complex64>>,
}

impl FscCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean of the defined values over `shells`, or `None` if none is defined.
    pub fn mean_over(&self, shells: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self.values[shells].iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn fsc(u: &FourierVolume, v: &FourierVolume, shells: &ShellTable) -> Result<FscCurve> {
    if u.spec != v.spec || u.spec != shells.spec {
        return Err(FsldError::invalid("FSC inputs live on different grids"));
    }
    let n = shells.num_shells();
    let mut curve = FscCurve {
        radii: (0..n).collect(),
        counts: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        complex: Vec::with_capacity(n),
    };
    for r in 0..n {
        let members = shells.voxels_in_shell(r);
        let mut cross = Complex64::new(0.0, 0.0);
        let (mut nu, mut nv) = (0.0, 0.0);
        for &j in members {
            let (a, b) = (u.values[j], v.values[j]);
            cross += a * b.conj();
            nu += a.norm_sqr();
            nv += b.norm_sqr();
        }
        curve.counts.push(members.len());
        let c = (nu > 0.0 && nv > 0.0).then(|| cross / (nu * nv).sqrt());
        curve.complex.push(c);
        curve.values.push(c.map(|c| c.re));
    }
    Ok(curve)
}

/// Element types accepted by [`relative_l2`].
pub trait L2Elem: Copy {
    fn dist2(a: Self, b: Self) -> f64;
    fn norm2(a: Self) -> f64;
}

impl L2Elem for f64 {
    fn dist2(a: f64, b: f64) -> f64 {
        (a - b) * (a - b)
    }
    fn norm2(a: f64) -> f64 {
        a * a
    }
}

impl L2Elem for Complex64 {
    fn dist2(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm_sqr()
    }
    fn norm2(a: Complex64) -> f64 {
        a.norm_sqr()
    }
}

/// `‖estimate − truth‖₂ / ‖truth‖₂`.
pub fn relative_l2<T: L2Elem>(estimate: &[T], truth: &[T]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(FsldError::invalid("vectors differ in length"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&e, &t) in estimate.iter().zip(truth) {
        num += T::dist2(e, t);
        den += T::norm2(t);
    }
    if !(den > 0.0) {
        return Err(FsldError::invalid("reference vector has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// For each shell, the first history index whose FSC reaches `theta`, or `-1`.
/// Undefined values never count as reached.
pub fn epochs_to_threshold(history: &[FscCurve], theta: f64) -> Result<Vec<i64>> {
    let first = history.first().ok_or_else(|| FsldError::invalid("empty FSC history"))?;
    let n = first.len();
    if history.iter().any(|c| c.len() != n) {
        return Err(FsldError::invalid("FSC curves differ in shell count"));
    }
    Ok((0..n)
        .map(|s| {
            history
                .iter()
                .position(|c| c.values[s].is_some_and(|x| x >= theta))
                .map_or(-1, |e| e as i64)
        })
        .collect())
}

/// Shell-averaged gradient variance over one epoch, paired with the
/// shell-averaged inverse preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVariance {
    pub variance: Vec<f64>,
    pub inv_precond: Vec<f64>,
    pub batches: usize,
}

/// Samples every batch gradient of epoch 0 at the fixed iterate `v` and
/// takes the per-voxel sample variance `Σ_b |g_b − ḡ|² / (B − 1)`.
pub fn grad_variance_shells(
    stack: &ImageStack,
    v: &FourierVolume,
    shells: &ShellTable,
    config: &OptimConfig,
    precond: &[f64],
) -> Result<GradVariance> {
    let nvox = stack.spec.volume_len();
    if precond.len() != nvox || v.spec != stack.spec || shells.spec != stack.spec {
        return Err(FsldError::invalid("inputs live on different grids"));
    }
    let batches = batch_schedule(stack.len(), config.batch_size, config.seed, 0);
    if batches.len() < 2 {
        return Err(FsldError::invalid("gradient variance needs at least two batches"));
    }
    let proj = stack.projector()?;
    let grads = batches
        .iter()
        .map(|b| loss_and_grad(&v.values, b, stack, &proj, config.lambda, stack.len()).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let nb = grads.len() as f64;
    let mut mean = vec![Complex64::new(0.0, 0.0); nvox];
    for g in &grads {
        mean.iter_mut().zip(g).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= nb);
    let mut var = vec![0.0f64; nvox];
    for g in &grads {
        for ((s, x), m) in var.iter_mut().zip(g).zip(&mean) {
            *s += (x - m).norm_sqr();
        }
    }
    var.iter_mut().for_each(|s| *s /= nb - 1.0);
    let average = |vals: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..shells.num_shells())
            .map(|r| {
                let m = shells.voxels_in_shell(r);
                if m.is_empty() {
                    0.0
                } else {
                    m.iter().map(|&j| vals(j)).sum::<f64>() / m.len() as f64
                }
            })
            .collect()
    };
    Ok(GradVariance {
        variance: average(&|j| var[j]),
        inv_precond: average(&|j| 1.0 / precond[j]),
        batches: batches.len(),
    })
}
