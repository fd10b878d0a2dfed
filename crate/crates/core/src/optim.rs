//! Regularized least-squares objective, preconditioned SGD with an on-the-fly
//! Hutchinson diagonal, stochastic Armijo line search, and a conjugate
//! gradient reference solver.
//!
//! For a batch `B` of a stack with `N` images the objective is
//!
//! ```text
//! f_B(v) = (N/|B|) Σ_{i∈B} ½‖x_i − C_i P_i v‖² + (λ/2)‖v‖²
//! ```
//!
//! so with `B` the whole stack `∇f = Hv − b`, `b = Σ_i P_iᴴ C_i x_i`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FsldError, Result};
use crate::forward::{FourierVolume, ImageStack, Projector};
use crate::grid::{shell_table, ShellTable};
use crate::hessian::{add_vectors, exact_diag, normal_apply, DiagOptions};
use crate::metrics::{fsc, relative_l2, FscCurve};
use crate::parallel::tree_reduce;
use crate::rng::{domain, stream};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Positivity floor used in place of the threshold when thresholding is off.
pub const NO_THRESHOLD_FLOOR: f64 = 1e-12;

/// Most halvings a single line search may take.
pub const MAX_BACKTRACKS: u32 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "precomputed")]
    Precomputed,
    #[serde(rename = "estimated")]
    Estimated,
    #[serde(rename = "estimated_nothresh")]
    EstimatedNoThresh,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Precomputed, Variant::Estimated, Variant::EstimatedNoThresh];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Precomputed => "precomputed",
            Variant::Estimated => "estimated",
            Variant::EstimatedNoThresh => "estimated_nothresh",
        }
    }

    fn estimates(self) -> bool {
        matches!(self, Variant::Estimated | Variant::EstimatedNoThresh)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = FsldError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FsldError::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// EMA weight on the previous diagonal estimate.
    pub beta: f64,
    /// Armijo sufficient-decrease constant.
    pub c: f64,
    pub eta0: f64,
    pub variant: Variant,
    pub seed: u64,
    /// Multiplies the carried step size at the start of every epoch after
    /// the first. `1.0` keeps the step non-increasing.
    pub eta_growth: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lambda: 1.0,
            batch_size: 500,
            epochs: 20,
            beta: 0.9,
            c: 0.5,
            eta0: 1.0,
            variant: Variant::Estimated,
            seed: 0,
            eta_growth: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, n_images: usize) -> Result<()> {
        let bad = |m: String| Err(FsldError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be finite and >= 0", self.lambda));
        }
        if self.batch_size == 0 || self.batch_size > n_images {
            return bad(format!("batch_size = {} must be in [1, {n_images}]", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta = {} must be in [0, 1)", self.beta));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return bad(format!("c = {} must be in (0, 1)", self.c));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad(format!("eta0 = {} must be positive", self.eta0));
        }
        if !(self.eta_growth >= 1.0 && self.eta_growth.is_finite()) {
            return bad(format!("eta_growth = {} must be >= 1", self.eta_growth));
        }
        Ok(())
    }
}

/// Batches of epoch `epoch`: consecutive chunks of a seeded shuffle of
/// `0..n`. The last batch is short when `batch_size` does not divide `n`.
pub fn batch_schedule(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, domain::SHUFFLE, epoch as u64));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Rademacher vector for update `k`: independent ±1 entries.
pub fn rademacher(seed: u64, k: u64, len: usize) -> Vec<f64> {
    let mut rng = stream(seed, domain::RADEMACHER, k);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let bits: u64 = rng.random();
        for b in 0..64.min(len - out.len()) {
            out.push(if bits >> b & 1 == 1 { 1.0 } else { -1.0 });
        }
    }
    out
}

struct Pass {
    /// Unscaled `Σ ½‖u_i‖²`.
    loss: f64,
    /// `scale · Σ P_iᴴ C_i u_i`.
    grad: Vec<Complex64>,
    /// `scale · Σ P_iᴴ C_i² P_i z`, when `z` is given.
    hz: Option<Vec<Complex64>>,
    /// Residuals `u_i = C_i P_i v − x_i`, batch order then mask order.
    resid: Vec<Complex64>,
}

fn data_pass(
    v: &[Complex64],
    z: Option<&[Complex64]>,
    batch: &[usize],
    stack: &ImageStack,
    proj: &Projector,
    scale: f64,
) -> Pass {
    let nvox = proj.spec().volume_len();
    let pixels = &proj.mask().pixels;
    tree_reduce(
        0..batch.len(),
        &|range| {
            let mut p = Pass {
                loss: 0.0,
                grad: vec![ZERO; nvox],
                hz: z.map(|_| vec![ZERO; nvox]),
                resid: Vec::with_capacity(range.len() * pixels.len()),
            };
            for &i in &batch[range] {
                let frame = proj.frame(&stack.poses[i], stack.ctf(i));
                let img = stack.image(i);
                for (k, &pix) in pixels.iter().enumerate() {
                    let st = proj.stencil(frame.rot(), k);
                    let f = frame.factor(k);
                    let u = st.gather(v) * f - img[pix];
                    p.loss += 0.5 * u.norm_sqr();
                    st.scatter(u * f.conj() * scale, &mut p.grad);
                    if let (Some(z), Some(hz)) = (z, p.hz.as_mut()) {
                        st.scatter(st.gather(z) * (scale * frame.ctf_sq(k)), hz);
                    }
                    p.resid.push(u);
                }
            }
            p
        },
        &|mut a, b| {
            a.loss += b.loss;
            a.grad = add_vectors(a.grad, b.grad);
            a.hz = match (a.hz, b.hz) {
                (Some(x), Some(y)) => Some(add_vectors(x, y)),
                _ => None,
            };
            a.resid.extend(b.resid);
            a
        },
    )
}

/// `C_i P_i d` for every image of the batch, concatenated in batch order.
fn project_batch(d: &[Complex64], batch: &[usize], stack: &ImageStack, proj: &Projector) -> Vec<Complex64> {
    let npix = proj.mask().len();
    tree_reduce(
        0..batch.len(),
        &|range| {
            let mut out = vec![ZERO; range.len() * npix];
            for (chunk, &i) in out.chunks_mut(npix).zip(&batch[range]) {
                let frame = proj.frame(&stack.poses[i], stack.ctf(i));
                proj.project_masked(d, &frame, chunk);
            }
            out
        },
        &|mut a, b| {
            a.extend(b);
            a
        },
    )
}

fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

fn check_batch(v: &[Complex64], batch: &[usize], stack: &ImageStack) -> Result<()> {
    if batch.is_empty() {
        return Err(FsldError::invalid("empty batch"));
    }
    if v.len() != stack.spec.volume_len() {
        return Err(FsldError::invalid("volume does not match the stack grid"));
    }
    if batch.iter().any(|&i| i >= stack.len()) {
        return Err(FsldError::invalid("batch index out of range"));
    }
    Ok(())
}

/// Batch loss and gradient, both scaled by `n_total / |batch|`.
pub fn loss_and_grad(
    v: &[Complex64],
    batch: &[usize],
    stack: &ImageStack,
    proj: &Projector,
    lambda: f64,
    n_total: usize,
) -> Result<(f64, Vec<Complex64>)> {
    check_batch(v, batch, stack)?;
    let scale = n_total as f64 / batch.len() as f64;
    let p = data_pass(v, None, batch, stack, proj, scale);
    let mut grad = p.grad;
    for (g, &x) in grad.iter_mut().zip(v) {
        *g += x * lambda;
    }
    Ok((scale * p.loss + 0.5 * lambda * norm_sqr(v), grad))
}

/// Full objective `½ Σ_i ‖x_i − C_i P_i v‖² + (λ/2)‖v‖²`.
pub fn full_objective(v: &[Complex64], stack: &ImageStack, proj: &Projector, lambda: f64) -> Result<f64> {
    if v.len() != stack.spec.volume_len() {
        return Err(FsldError::invalid("volume does not match the stack grid"));
    }
    let pixels = &proj.mask().pixels;
    let data = tree_reduce(
        0..stack.len(),
        &|range| {
            let mut acc = 0.0;
            let mut buf = vec![ZERO; pixels.len()];
            for i in range {
                let frame = proj.frame(&stack.poses[i], stack.ctf(i));
                proj.project_masked(v, &frame, &mut buf);
                let img = stack.image(i);
                for (y, &pix) in buf.iter().zip(pixels) {
                    acc += 0.5 * (y - img[pix]).norm_sqr();
                }
            }
            acc
        },
        &|a, b| a + b,
    );
    Ok(data + 0.5 * lambda * norm_sqr(v))
}

/// Right-hand side `b = Σ_i P_iᴴ C_i x_i`.
pub fn normal_rhs(stack: &ImageStack, proj: &Projector) -> Vec<Complex64> {
    let nvox = stack.spec.volume_len();
    tree_reduce(
        0..stack.len(),
        &|range| {
            let mut acc = vec![ZERO; nvox];
            for i in range {
                let frame = proj.frame(&stack.poses[i], stack.ctf(i));
                let masked = proj.gather_mask(stack.image(i));
                proj.backproject_masked_add(&masked, &frame, &mut acc);
            }
            acc
        },
        &add_vectors,
    )
}

/// Running Hutchinson average, its EMA and the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerState {
    pub d_avg: Vec<f64>,
    /// EMA estimate, initialised to all ones.
    pub d: Vec<f64>,
    /// Number of Hutchinson updates so far.
    pub k: u64,
    pub alpha: f64,
}

impl PreconditionerState {
    pub fn new(len: usize, alpha: f64) -> Self {
        PreconditionerState { d_avg: vec![0.0; len], d: vec![1.0; len], k: 0, alpha }
    }

    /// `D_avg ← ((k−1)/k) D_avg + (1/k) Re(z ⊙ Hz)` with `k` incremented first.
    pub fn hutchinson_update(&mut self, z: &[f64], hz: &[Complex64]) -> Result<()> {
        if z.len() != self.d_avg.len() || hz.len() != self.d_avg.len() {
            return Err(FsldError::invalid("probe length does not match the preconditioner"));
        }
        self.k += 1;
        let k = self.k as f64;
        let (keep, add) = ((k - 1.0) / k, 1.0 / k);
        for ((d, &zj), hj) in self.d_avg.iter_mut().zip(z).zip(hz) {
            *d = keep * *d + add * (zj * hj.re);
        }
        Ok(())
    }

    /// `D ← βD + (1−β) D_avg`.
    pub fn ema(&mut self, beta: f64) {
        for (d, &a) in self.d.iter_mut().zip(&self.d_avg) {
            *d = beta * *d + (1.0 - beta) * a;
        }
    }

    /// `max(|D|, α)`, or `max(|D|, 1e-12)` without thresholding.
    pub fn applied(&self, threshold: bool) -> Vec<f64> {
        let floor = if threshold { self.alpha } else { NO_THRESHOLD_FLOOR };
        self.d.iter().map(|d| d.abs().max(floor)).collect()
    }

    pub fn ema_and_threshold(&mut self, beta: f64, threshold: bool) -> Vec<f64> {
        self.ema(beta);
        self.applied(threshold)
    }
}

/// Expected Hessian diagonal at the mask radius `R`:
/// `P_x(R)/P_v(R) · Σ_i C_i(R)² + λ`.
pub fn threshold_alpha(stack: &ImageStack, shells: &ShellTable, lambda: f64) -> Result<f64> {
    let r = shells.max_radius;
    let (px, pv) = (shells.px_count[r], shells.vx_count[r]);
    if pv == 0 {
        return Err(FsldError::data(format!("no voxels in shell {r}")));
    }
    let sum_c2 = match &stack.ctfs {
        None => stack.len() as f64,
        Some(ctfs) => {
            let r_max = stack.mask_radius.max(1) as f64;
            ctfs.iter().map(|c| c.eval(r as f64, r_max).map(|v| v * v)).sum::<Result<f64>>()?
        }
    };
    Ok(px as f64 / pv as f64 * sum_c2 + lambda)
}

/// Outcome of one line search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArmijoStep {
    pub eta: f64,
    pub backtracks: u32,
    pub f_before: f64,
    pub f_after: f64,
    /// `c · η · ‖g‖²_{D̂⁻¹}` at the accepted `η`.
    pub required_decrease: f64,
}

impl ArmijoStep {
    pub fn satisfied(&self) -> bool {
        self.f_after <= self.f_before - self.required_decrease
    }
}

/// Halves `eta` from `eta_in` until `f(η) ≤ f0 − c·η·gnorm`.
fn backtrack(f0: f64, gnorm: f64, eta_in: f64, c: f64, mut f_at: impl FnMut(f64) -> f64) -> Result<ArmijoStep> {
    let mut eta = eta_in;
    for backtracks in 0..=MAX_BACKTRACKS {
        let f = f_at(eta);
        let required = c * eta * gnorm;
        if f <= f0 - required {
            return Ok(ArmijoStep { eta, backtracks, f_before: f0, f_after: f, required_decrease: required });
        }
        eta *= 0.5;
    }
    Err(FsldError::Numerical(format!(
        "Armijo line search failed after {MAX_BACKTRACKS} halvings from eta = {eta_in}"
    )))
}

/// Stochastic Armijo search along `−D̂⁻¹g` for a generic batch loss.
pub fn armijo_search(
    v: &[Complex64],
    grad: &[Complex64],
    precond: &[f64],
    mut loss: impl FnMut(&[Complex64]) -> f64,
    eta_in: f64,
    c: f64,
) -> Result<(ArmijoStep, Vec<Complex64>)> {
    if v.len() != grad.len() || v.len() != precond.len() {
        return Err(FsldError::invalid("line search inputs differ in length"));
    }
    if !(eta_in > 0.0) || precond.iter().any(|&d| !(d > 0.0)) {
        return Err(FsldError::invalid("line search needs eta > 0 and a positive preconditioner"));
    }
    let d: Vec<Complex64> = grad.iter().zip(precond).map(|(g, p)| g / p).collect();
    let gnorm: f64 = grad.iter().zip(precond).map(|(g, p)| g.norm_sqr() / p).sum();
    let trial = |eta: f64| -> Vec<Complex64> { v.iter().zip(&d).map(|(x, dj)| x - dj * eta).collect() };
    let f0 = loss(v);
    let step = backtrack(f0, gnorm, eta_in, c, |eta| loss(&trial(eta)))?;
    Ok((step, trial(step.eta)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub batch_len: usize,
    #[serde(flatten)]
    pub step: ArmijoStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Epochs completed; 0 is the starting point.
    pub epoch: usize,
    pub loss: f64,
    pub eta: f64,
    pub backtracks: u64,
    pub precond_rel_err: Option<f64>,
    pub fsc: Option<FscCurve>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub variant: Variant,
    pub alpha: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Preconditioner applied in the last iteration; `None` for `plain`.
    pub precond: Option<Vec<f64>>,
}

impl RunTrace {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }

    /// FSC after each epoch, starting with the initial volume.
    pub fn fsc_history(&self) -> Option<Vec<FscCurve>> {
        self.epochs.iter().map(|e| e.fsc.clone()).collect()
    }
}

/// Optional comparison data for [`run`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RunInputs<'a> {
    pub v0: Option<&'a FourierVolume>,
    /// FSC target recorded after every epoch.
    pub reference: Option<&'a FourierVolume>,
    /// Exact Hessian diagonal; computed on demand for `precomputed`.
    pub exact_diag: Option<&'a [f64]>,
}

pub fn run(config: &OptimConfig, stack: &ImageStack, inputs: RunInputs) -> Result<(FourierVolume, RunTrace)> {
    stack.validate()?;
    config.validate(stack.len())?;
    let spec = stack.spec;
    let nvox = spec.volume_len();
    let n = stack.len();
    let proj = stack.projector()?;
    let shells = shell_table(&spec, stack.mask_radius.max(1))?;
    let alpha = threshold_alpha(stack, &shells, config.lambda)?;
    let lambda = config.lambda;

    let mut v = match inputs.v0 {
        Some(v0) if v0.spec != spec => return Err(FsldError::invalid("initial volume does not match the stack grid")),
        Some(v0) => v0.values.clone(),
        None => vec![ZERO; nvox],
    };
    if let Some(r) = inputs.reference {
        if r.spec != spec {
            return Err(FsldError::invalid("reference volume does not match the stack grid"));
        }
    }
    let computed;
    let exact = match inputs.exact_diag {
        Some(d) if d.len() != nvox => return Err(FsldError::invalid("exact diagonal does not match the grid")),
        Some(d) => Some(d),
        None if config.variant == Variant::Precomputed => {
            computed = exact_diag(&stack.poses, stack.ctfs.as_deref(), lambda, &proj, DiagOptions::default())?;
            Some(computed.as_slice())
        }
        None => None,
    };
    let fixed: Option<Vec<f64>> = match config.variant {
        Variant::Plain => Some(vec![1.0; nvox]),
        Variant::Precomputed => Some(exact.unwrap().iter().map(|d| d.abs().max(alpha)).collect()),
        _ => None,
    };
    let mut state = PreconditionerState::new(nvox, alpha);

    let record = |v: &[Complex64], epoch, eta, backtracks, state: &PreconditionerState| -> Result<EpochRecord> {
        let precond_rel_err = match (config.variant.estimates() && epoch > 0, exact) {
            (true, Some(e)) => Some(relative_l2(&state.d_avg, e)?),
            _ => None,
        };
        let fsc = match inputs.reference {
            Some(r) => Some(fsc(&FourierVolume { spec, values: v.to_vec() }, r, &shells)?),
            None => None,
        };
        Ok(EpochRecord { epoch, loss: full_objective(v, stack, &proj, lambda)?, eta, backtracks, precond_rel_err, fsc })
    };

    let mut trace = RunTrace { variant: config.variant, alpha, epochs: Vec::new(), steps: Vec::new(), precond: None };
    let mut eta = config.eta0;
    trace.epochs.push(record(&v, 0, eta, 0, &state)?);
    let mut iteration = 0usize;
    for epoch in 0..config.epochs {
        if epoch > 0 {
            eta *= config.eta_growth;
        }
        let mut epoch_backtracks = 0u64;
        for batch in batch_schedule(n, config.batch_size, config.seed, epoch) {
            let scale = n as f64 / batch.len() as f64;
            let probe = config.variant.estimates().then(|| rademacher(config.seed, iteration as u64, nvox));
            let probe_c: Option<Vec<Complex64>> =
                probe.as_ref().map(|z| z.iter().map(|&x| Complex64::new(x, 0.0)).collect());
            let pass = data_pass(&v, probe_c.as_deref(), &batch, stack, &proj, scale);

            let applied = match &fixed {
                Some(d) => d.clone(),
                None => {
                    let z = probe.as_ref().unwrap();
                    let mut hz = pass.hz.unwrap();
                    for (h, &zj) in hz.iter_mut().zip(z) {
                        *h += zj * lambda;
                    }
                    state.hutchinson_update(z, &hz)?;
                    state.ema_and_threshold(config.beta, config.variant == Variant::Estimated)
                }
            };

            let mut grad = pass.grad;
            for (g, &x) in grad.iter_mut().zip(&v) {
                *g += x * lambda;
            }
            let d: Vec<Complex64> = grad.iter().zip(&applied).map(|(g, p)| g / p).collect();
            let gnorm: f64 = grad.iter().zip(&applied).map(|(g, p)| g.norm_sqr() / p).sum();
            let w = project_batch(&d, &batch, stack, &proj);
            let u = &pass.resid;
            let batch_loss = |eta: f64| -> f64 {
                let data: f64 = u.iter().zip(&w).map(|(a, b)| (a - b * eta).norm_sqr()).sum();
                let reg: f64 = v.iter().zip(&d).map(|(a, b)| (a - b * eta).norm_sqr()).sum();
                0.5 * scale * data + 0.5 * lambda * reg
            };
            let step = backtrack(batch_loss(0.0), gnorm, eta, config.c, batch_loss).map_err(|e| match e {
                FsldError::Numerical(m) => {
                    FsldError::Numerical(format!("{m} (variant {}, epoch {}, iteration {iteration})", config.variant, epoch + 1))
                }
                e => e,
            })?;
            debug_assert!(step.satisfied());
            eta = step.eta;
            for (x, dj) in v.iter_mut().zip(&d) {
                *x -= dj * eta;
            }
            epoch_backtracks += u64::from(step.backtracks);
            trace.steps.push(StepRecord { epoch: epoch + 1, iteration, batch_len: batch.len(), step });
            if config.variant != Variant::Plain {
                trace.precond = Some(applied);
            }
            iteration += 1;
        }
        if v.iter().any(|x| !(x.re.is_finite() && x.im.is_finite())) {
            return Err(FsldError::Numerical(format!("iterate diverged in epoch {}", epoch + 1)));
        }
        trace.epochs.push(record(&v, epoch + 1, eta, epoch_backtracks, &state)?);
    }
    Ok((FourierVolume { spec, values: v }, trace))
}

/// Relative error of the running Hutchinson average against `exact` after
/// each of `updates` batch probes, following the batch order of [`run`].
pub fn hutchinson_error_trace(
    stack: &ImageStack,
    batch_size: usize,
    updates: usize,
    seed: u64,
    lambda: f64,
    exact: &[f64],
) -> Result<Vec<f64>> {
    let proj = stack.projector()?;
    let nvox = stack.spec.volume_len();
    if exact.len() != nvox {
        return Err(FsldError::invalid("exact diagonal does not match the grid"));
    }
    if batch_size == 0 || batch_size > stack.len() {
        return Err(FsldError::Config(format!("batch_size = {batch_size} must be in [1, {}]", stack.len())));
    }
    let mut state = PreconditionerState::new(nvox, 0.0);
    let mut out = Vec::with_capacity(updates);
    let mut epoch = 0;
    while out.len() < updates {
        for batch in batch_schedule(stack.len(), batch_size, seed, epoch) {
            if out.len() == updates {
                break;
            }
            let z = rademacher(seed, out.len() as u64, nvox);
            let zc: Vec<Complex64> = z.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            let scale = stack.len() as f64 / batch.len() as f64;
            let mut hz = normal_apply(&zc, &batch, &stack.poses, stack.ctfs.as_deref(), &proj, scale);
            for (h, &zj) in hz.iter_mut().zip(&z) {
                *h += zj * lambda;
            }
            state.hutchinson_update(&z, &hz)?;
            out.push(relative_l2(&state.d_avg, exact)?);
        }
        epoch += 1;
    }
    Ok(out)
}

/// Result of [`reference_solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct CgReport {
    pub volume: FourierVolume,
    pub iterations: usize,
    /// `‖Hv − b‖ / ‖b‖` recomputed from scratch at exit.
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradient solve of `Hv = b`.
pub fn reference_solve(stack: &ImageStack, lambda: f64, tol: f64, max_iter: usize) -> Result<CgReport> {
    stack.validate()?;
    if !(lambda > 0.0) {
        return Err(FsldError::Config("reference solve needs lambda > 0".into()));
    }
    if !(tol > 0.0) {
        return Err(FsldError::Config("reference solve needs tol > 0".into()));
    }
    let proj = stack.projector()?;
    let spec = stack.spec;
    let all: Vec<usize> = (0..stack.len()).collect();
    let apply = |p: &[Complex64]| -> Vec<Complex64> {
        let mut out = normal_apply(p, &all, &stack.poses, stack.ctfs.as_deref(), &proj, 1.0);
        for (o, &x) in out.iter_mut().zip(p) {
            *o += x * lambda;
        }
        out
    };
    let jacobi = exact_diag(&stack.poses, stack.ctfs.as_deref(), lambda, &proj, DiagOptions::default())?;
    let b = normal_rhs(stack, &proj);
    let bnorm = norm_sqr(&b).sqrt();
    let mut x = vec![ZERO; b.len()];
    if bnorm == 0.0 {
        return Ok(CgReport { volume: FourierVolume { spec, values: x }, iterations: 0, rel_residual: 0.0 });
    }
    let dot = |a: &[Complex64], b: &[Complex64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum() };
    let precondition = |r: &[Complex64]| -> Vec<Complex64> { r.iter().zip(&jacobi).map(|(r, d)| r / d).collect() };

    let mut r = b.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..=max_iter {
        if norm_sqr(&r).sqrt() <= tol * bnorm {
            let hx = apply(&x);
            let true_r: Vec<Complex64> = b.iter().zip(&hx).map(|(b, h)| b - h).collect();
            let rel = norm_sqr(&true_r).sqrt() / bnorm;
            if rel <= tol {
                return Ok(CgReport { volume: FourierVolume { spec, values: x }, iterations: it, rel_residual: rel });
            }
            r = true_r;
            z = precondition(&r);
            p = z.clone();
            rz = dot(&r, &z);
        }
        if it == max_iter {
            break;
        }
        let q = apply(&p);
        let a = rz / dot(&p, &q);
        for ((xi, ri), (pi, qi)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&q)) {
            *xi += pi * a;
            *ri -= qi * a;
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + *pi * beta;
        }
    }
    Err(FsldError::Numerical(format!(
        "conjugate gradient did not reach tolerance {tol} in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{phantom, sample_uniform_poses, synthesize_dataset, Interp};
    use crate::grid::GridSpec;

    fn quad(v: &[Complex64]) -> f64 {
        0.5 * norm_sqr(v)
    }

    #[test]
    fn armijo_exact_equality_accepted() {
        let v = [Complex64::new(1.0, 0.0)];
        let (step, next) = armijo_search(&v, &v, &[1.0], quad, 1.0, 0.5).unwrap();
        assert_eq!(step.eta, 1.0);
        assert_eq!(step.backtracks, 0);
        assert_eq!(next[0], ZERO);
    }

    #[test]
    fn armijo_backtracks_to_one_eighth() {
        let v = [Complex64::new(1.0, 0.0)];
        let (step, next) = armijo_search(&v, &v, &[1.0], quad, 1.0, 0.9).unwrap();
        assert_eq!(step.eta, 0.125);
        assert_eq!(step.backtracks, 3);
        assert_eq!(next[0].re, 0.875);
    }

    #[test]
    fn armijo_zero_gradient_keeps_iterate() {
        let v = [Complex64::new(2.0, -1.0)];
        let (step, next) = armijo_search(&v, &[ZERO], &[1.0], quad, 0.7, 0.5).unwrap();
        assert_eq!(step.eta, 0.7);
        assert_eq!(next, v);
    }

    #[test]
    fn armijo_cap_is_an_error() {
        let v = [ZERO];
        // Ascent direction from the minimum: no step size gives a decrease.
        let g = [Complex64::new(-1.0, 0.0)];
        assert!(matches!(armijo_search(&v, &g, &[1.0], quad, 1.0, 0.5), Err(FsldError::Numerical(_))));
    }

    #[test]
    fn rademacher_is_signs_and_seeded() {
        let a = rademacher(3, 7, 1000);
        assert!(a.iter().all(|&x| x == 1.0 || x == -1.0));
        assert_eq!(a, rademacher(3, 7, 1000));
        assert_ne!(a, rademacher(3, 8, 1000));
        let mean = a.iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.15);
    }

    #[test]
    fn first_hutchinson_update_overwrites() {
        let mut s = PreconditionerState::new(2, 0.5);
        s.d_avg = vec![123.0, -4.0];
        s.hutchinson_update(&[1.0, -1.0], &[Complex64::new(2.0, 5.0), Complex64::new(-3.0, 1.0)]).unwrap();
        assert_eq!(s.d_avg, vec![2.0, 3.0]);
        assert_eq!(s.k, 1);
    }

    #[test]
    fn ema_and_threshold_cases() {
        let mut s = PreconditionerState::new(3, 0.5);
        s.d_avg = vec![2.0, -0.1, 0.3];
        assert_eq!(s.ema_and_threshold(0.0, true), vec![2.0, 0.5, 0.5]);
        assert_eq!(s.d, s.d_avg);
        assert_eq!(s.applied(false), vec![2.0, 0.1, 0.3]);
        let mut s = PreconditionerState::new(2, 0.5);
        s.d_avg = vec![3.0, 3.0];
        let applied = s.ema_and_threshold(0.5, true);
        assert_eq!(applied, vec![2.0, 2.0]);
        s.d = vec![0.0, -1e-20];
        assert_eq!(s.applied(false), vec![NO_THRESHOLD_FLOOR; 2]);
    }

    #[test]
    fn schedule_partitions_each_epoch() {
        for epoch in 0..3 {
            let b = batch_schedule(23, 5, 9, epoch);
            assert_eq!(b.len(), 5);
            assert_eq!(b[4].len(), 3);
            let mut all: Vec<usize> = b.concat();
            all.sort();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
        }
        assert_ne!(batch_schedule(23, 5, 9, 0), batch_schedule(23, 5, 9, 1));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("sgd".parse::<Variant>(), Err(FsldError::Config(_))));
    }

    fn tiny_stack(sigma: f64) -> (FourierVolume, ImageStack) {
        let spec = GridSpec::new(8).unwrap();
        let v = phantom(spec, 3, 1).unwrap();
        let proj = Projector::new(spec, 3, Interp::Trilinear).unwrap();
        let poses = sample_uniform_poses(12, 0.5, 2);
        let stack = synthesize_dataset(&v, &poses, None, sigma, &proj, 3).unwrap();
        (v, stack)
    }

    #[test]
    fn noiseless_truth_has_zero_loss_and_gradient() {
        let (v, stack) = tiny_stack(0.0);
        let proj = stack.projector().unwrap();
        let all: Vec<usize> = (0..stack.len()).collect();
        let (loss, grad) = loss_and_grad(&v.values, &all, &stack, &proj, 0.0, stack.len()).unwrap();
        assert!(loss < 1e-25);
        assert!(norm_sqr(&grad) < 1e-25);
    }

    #[test]
    fn loss_at_zero_is_half_data_norm() {
        let (_, stack) = tiny_stack(0.1);
        let proj = stack.projector().unwrap();
        let batch = [1, 4, 7];
        let zero = vec![ZERO; stack.spec.volume_len()];
        let (loss, _) = loss_and_grad(&zero, &batch, &stack, &proj, 2.0, stack.len()).unwrap();
        let data: f64 = batch.iter().map(|&i| norm_sqr(stack.image(i))).sum();
        assert!((loss - 4.0 * 0.5 * data).abs() <= 1e-12 * loss);
    }

    #[test]
    fn threshold_alpha_without_ctf() {
        let (_, stack) = tiny_stack(0.0);
        let shells = shell_table(&stack.spec, 3).unwrap();
        let a = threshold_alpha(&stack, &shells, 0.25).unwrap();
        let expect = 12.0 * shells.px_count[3] as f64 / shells.vx_count[3] as f64 + 0.25;
        assert_eq!(a, expect);
    }

    #[test]
    fn run_steps_satisfy_armijo_and_reduce_loss() {
        let (_, stack) = tiny_stack(0.05);
        for variant in Variant::ALL {
            let cfg = OptimConfig { lambda: 0.1, batch_size: 4, epochs: 3, variant, ..OptimConfig::default() };
            let (_, trace) = run(&cfg, &stack, RunInputs::default()).unwrap();
            assert_eq!(trace.epochs.len(), 4);
            assert_eq!(trace.steps.len(), 9);
            assert!(trace.steps.iter().all(|s| s.step.satisfied()));
            assert!(trace.steps.windows(2).all(|w| w[1].step.eta <= w[0].step.eta));
            assert!(trace.final_loss() < trace.epochs[0].loss);
        }
    }

    #[test]
    fn run_is_reproducible() {
        let (_, stack) = tiny_stack(0.05);
        let cfg = OptimConfig { lambda: 0.1, batch_size: 5, epochs: 2, ..OptimConfig::default() };
        let a = run(&cfg, &stack, RunInputs::default()).unwrap();
        let b = run(&cfg, &stack, RunInputs::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cg_reaches_tolerance() {
        let (_, stack) = tiny_stack(0.1);
        let rep = reference_solve(&stack, 0.05, 1e-10, 500).unwrap();
        assert!(rep.rel_residual <= 1e-10);
        assert!(reference_solve(&stack, 0.0, 1e-8, 10).is_err());
        assert!(matches!(reference_solve(&stack, 0.05, 1e-14, 1), Err(FsldError::Numerical(_))));
    }
}
