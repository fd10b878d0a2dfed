//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key may appear at most
//! once; unknown keys and out-of-range values are rejected at parse time.
//! `sigma`, `lambda` and `mask_radius` also accept `auto`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{FsldError, Result};
use crate::forward::{
    mean_signal_power, phantom, sample_concentrated_poses, sample_ctfs, sigma_for_snr, synthesize_dataset, CtfDistribution,
    FourierVolume, ImageStack, Interp, Projector,
};
use crate::grid::{shell_table, GridSpec};
use crate::optim::{OptimConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    /// `None` means `⌊M/2⌋ − 1`.
    pub mask_radius: Option<usize>,
    pub shift_bound: f64,
    pub pose_concentration: f64,
    pub phantom_seed: u64,
    pub phantom_blobs: usize,
    pub seed: u64,
    /// `None` derives σ from `snr`.
    pub sigma: Option<f64>,
    pub snr: f64,
    pub use_ctf: bool,
    pub defocus_min: f64,
    pub defocus_max: f64,
    pub amp_contrast: f64,
    pub b_factor: f64,
    pub interp_mode: Interp,
    /// `None` means `lambda_scale · N · P_x(R) / P_v(R)`.
    pub lambda: Option<f64>,
    pub lambda_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub c: f64,
    pub eta0: f64,
    pub variant: Variant,
    pub eta_growth: f64,
    pub replicates: usize,
    pub analyze_lambda: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            m: 48,
            n: 5000,
            mask_radius: None,
            shift_bound: 2.0,
            pose_concentration: 0.0,
            phantom_seed: 1,
            phantom_blobs: 8,
            seed: 0,
            sigma: None,
            snr: 0.5,
            use_ctf: true,
            defocus_min: 2.0,
            defocus_max: 6.0,
            amp_contrast: 0.1,
            b_factor: 2.0,
            interp_mode: Interp::Trilinear,
            lambda: None,
            lambda_scale: 1e-3,
            batch_size: 500,
            epochs: 20,
            beta: 0.9,
            c: 0.5,
            eta0: 1.0,
            variant: Variant::Estimated,
            eta_growth: 1.0,
            replicates: 10,
            analyze_lambda: 1e-8,
            cg_tol: 1e-8,
            cg_max_iter: 2000,
            threads: 0,
        }
    }
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> FsldError {
    FsldError::Config(format!("{key}: {msg}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| cfg_err(key, format!("cannot parse '{value}'")))
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(key, format!("expected true or false, got '{value}'"))),
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "M",
        "N",
        "mask_radius",
        "shift_bound",
        "pose_concentration",
        "phantom_seed",
        "phantom_blobs",
        "seed",
        "sigma",
        "snr",
        "use_ctf",
        "defocus_min",
        "defocus_max",
        "amp_contrast",
        "b_factor",
        "interp_mode",
        "lambda",
        "lambda_scale",
        "batch_size",
        "epochs",
        "beta",
        "c",
        "eta0",
        "variant",
        "eta_growth",
        "replicates",
        "analyze_lambda",
        "cg_tol",
        "cg_max_iter",
        "threads",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FsldError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(FsldError::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form, checking the value's own range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "M" => self.m = num(key, value)?,
            "N" => self.n = num(key, value)?,
            "mask_radius" => self.mask_radius = auto(key, value)?,
            "shift_bound" => self.shift_bound = num(key, value)?,
            "pose_concentration" => self.pose_concentration = num(key, value)?,
            "phantom_seed" => self.phantom_seed = num(key, value)?,
            "phantom_blobs" => self.phantom_blobs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sigma" => self.sigma = auto(key, value)?,
            "snr" => self.snr = num(key, value)?,
            "use_ctf" => self.use_ctf = boolean(key, value)?,
            "defocus_min" => self.defocus_min = num(key, value)?,
            "defocus_max" => self.defocus_max = num(key, value)?,
            "amp_contrast" => self.amp_contrast = num(key, value)?,
            "b_factor" => self.b_factor = num(key, value)?,
            "interp_mode" => self.interp_mode = value.parse()?,
            "lambda" => self.lambda = auto(key, value)?,
            "lambda_scale" => self.lambda_scale = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "c" => self.c = num(key, value)?,
            "eta0" => self.eta0 = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "eta_growth" => self.eta_growth = num(key, value)?,
            "replicates" => self.replicates = num(key, value)?,
            "analyze_lambda" => self.analyze_lambda = num(key, value)?,
            "cg_tol" => self.cg_tol = num(key, value)?,
            "cg_max_iter" => self.cg_max_iter = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            _ => return Err(FsldError::Config(format!("unknown key '{key}'"))),
        }
        self.check_key(key)
    }

    fn check_key(&self, key: &str) -> Result<()> {
        let fail = |msg: &str| Err(cfg_err(key, msg));
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        match key {
            "M" if self.m < 4 => fail("must be >= 4"),
            "N" if self.n == 0 => fail("must be >= 1"),
            "mask_radius" if self.mask_radius == Some(0) => fail("must be >= 1"),
            "shift_bound" if !nonneg(self.shift_bound) => fail("must be >= 0"),
            "pose_concentration" if !nonneg(self.pose_concentration) => fail("must be >= 0"),
            "phantom_blobs" if self.phantom_blobs == 0 => fail("must be >= 1"),
            "sigma" if self.sigma.is_some_and(|s| !nonneg(s)) => fail("must be >= 0"),
            "snr" if !pos(self.snr) => fail("must be > 0"),
            "defocus_min" | "defocus_max" if !self.defocus_min.is_finite() || !self.defocus_max.is_finite() => {
                fail("must be finite")
            }
            "amp_contrast" if !(self.amp_contrast > 0.0 && self.amp_contrast < 1.0) => fail("must be in (0, 1)"),
            "b_factor" if !nonneg(self.b_factor) => fail("must be >= 0"),
            "lambda" if self.lambda.is_some_and(|l| !nonneg(l)) => fail("must be >= 0"),
            "lambda_scale" if !pos(self.lambda_scale) => fail("must be > 0"),
            "batch_size" if self.batch_size == 0 => fail("must be >= 1"),
            "epochs" if self.epochs == 0 => fail("must be >= 1"),
            "beta" if !(self.beta >= 0.0 && self.beta < 1.0) => fail("must be in [0, 1)"),
            "c" if !(self.c > 0.0 && self.c < 1.0) => fail("must be in (0, 1)"),
            "eta0" if !pos(self.eta0) => fail("must be > 0"),
            "eta_growth" if !(self.eta_growth >= 1.0 && self.eta_growth.is_finite()) => fail("must be >= 1"),
            "replicates" if self.replicates == 0 => fail("must be >= 1"),
            "analyze_lambda" if !pos(self.analyze_lambda) => fail("must be > 0"),
            "cg_tol" if !pos(self.cg_tol) => fail("must be > 0"),
            "cg_max_iter" if self.cg_max_iter == 0 => fail("must be >= 1"),
            _ => Ok(()),
        }
    }

    /// Per-key checks plus the constraints that tie keys together.
    pub fn validate(&self) -> Result<()> {
        for key in Self::KEYS {
            self.check_key(key)?;
        }
        let max = self.m / 2 - 1;
        if self.mask_radius.is_some_and(|r| r > max) {
            return Err(cfg_err("mask_radius", format!("must be <= {max} for M={}", self.m)));
        }
        if self.batch_size > self.n {
            return Err(cfg_err("batch_size", format!("must be <= N={}", self.n)));
        }
        if self.defocus_max < self.defocus_min {
            return Err(cfg_err("defocus_max", "must be >= defocus_min"));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.m)
    }

    pub fn resolved_mask_radius(&self) -> usize {
        self.mask_radius.unwrap_or(self.m / 2 - 1)
    }

    pub fn ctf_distribution(&self) -> Option<CtfDistribution> {
        self.use_ctf.then_some(CtfDistribution {
            defocus_min: self.defocus_min,
            defocus_max: self.defocus_max,
            amp_contrast: self.amp_contrast,
            b_factor: self.b_factor,
        })
    }

    /// Explicit `lambda`, or `lambda_scale · N · P_x(R)/P_v(R)` for a stack
    /// of `n` images with mask radius `radius`.
    pub fn resolved_lambda(&self, spec: &GridSpec, radius: usize, n: usize) -> Result<f64> {
        match self.lambda {
            Some(l) => Ok(l),
            None => {
                let shells = shell_table(spec, radius)?;
                let ratio = shells
                    .shell_ratio(radius)
                    .ok_or_else(|| FsldError::Config(format!("no voxels in shell {radius}")))?;
                Ok(self.lambda_scale * n as f64 * ratio)
            }
        }
    }

    pub fn optim_config(&self, lambda: f64) -> OptimConfig {
        OptimConfig {
            lambda,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta: self.beta,
            c: self.c,
            eta0: self.eta0,
            variant: self.variant,
            seed: self.seed,
            eta_growth: self.eta_growth,
        }
    }

    /// Phantom, poses, CTFs and noisy images as configured.
    pub fn synthesize(&self) -> Result<(FourierVolume, ImageStack)> {
        self.validate()?;
        let spec = self.spec()?;
        let truth = phantom(spec, self.phantom_blobs, self.phantom_seed)?;
        let proj = Projector::new(spec, self.resolved_mask_radius(), self.interp_mode)?;
        let poses = sample_concentrated_poses(self.n, self.shift_bound, self.pose_concentration, self.seed);
        let ctfs = match self.ctf_distribution() {
            Some(d) => Some(sample_ctfs(self.n, &d, self.seed)?),
            None => None,
        };
        let sigma = match self.sigma {
            Some(s) => s,
            None => sigma_for_snr(mean_signal_power(&truth, &poses, ctfs.as_deref(), &proj), self.snr)?,
        };
        let stack = synthesize_dataset(&truth, &poses, ctfs.as_deref(), sigma, &proj, self.seed)?;
        Ok((truth, stack))
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_text(key));
        }
        out
    }

    fn value_text(&self, key: &str) -> String {
        match key {
            "M" => self.m.to_string(),
            "N" => self.n.to_string(),
            "mask_radius" => opt_str(&self.mask_radius),
            "shift_bound" => self.shift_bound.to_string(),
            "pose_concentration" => self.pose_concentration.to_string(),
            "phantom_seed" => self.phantom_seed.to_string(),
            "phantom_blobs" => self.phantom_blobs.to_string(),
            "seed" => self.seed.to_string(),
            "sigma" => opt_str(&self.sigma),
            "snr" => self.snr.to_string(),
            "use_ctf" => self.use_ctf.to_string(),
            "defocus_min" => self.defocus_min.to_string(),
            "defocus_max" => self.defocus_max.to_string(),
            "amp_contrast" => self.amp_contrast.to_string(),
            "b_factor" => self.b_factor.to_string(),
            "interp_mode" => self.interp_mode.to_string(),
            "lambda" => opt_str(&self.lambda),
            "lambda_scale" => self.lambda_scale.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "beta" => self.beta.to_string(),
            "c" => self.c.to_string(),
            "eta0" => self.eta0.to_string(),
            "variant" => self.variant.to_string(),
            "eta_growth" => self.eta_growth.to_string(),
            "replicates" => self.replicates.to_string(),
            "analyze_lambda" => self.analyze_lambda.to_string(),
            "cg_tol" => self.cg_tol.to_string(),
            "cg_max_iter" => self.cg_max_iter.to_string(),
            "threads" => self.threads.to_string(),
            _ => unreachable!("value_text called with unknown key {key}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("lambda", "0.25").unwrap();
        cfg.set("variant", "estimated_nothresh").unwrap();
        cfg.set("interp_mode", "nn").unwrap();
        cfg.set("use_ctf", "false").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_duplicate_and_out_of_range() {
        let e = |t: &str| matches!(ExperimentConfig::parse(t), Err(FsldError::Config(_)));
        assert!(e("bogus = 1"));
        assert!(e("M = 16\nM = 16"));
        assert!(e("beta = 1.0"));
        assert!(e("c = 0"));
        assert!(e("amp_contrast = 1.5"));
        assert!(e("M = 16\nmask_radius = 8"));
        assert!(e("N = 10\nbatch_size = 11"));
        assert!(e("defocus_min = 3\ndefocus_max = 1"));
        assert!(e("interp_mode = cubic"));
        assert!(e("sigma = -1"));
        assert!(e("epochs = many"));
        assert!(e("no equals sign"));
    }

    #[test]
    fn auto_values() {
        let cfg = ExperimentConfig::parse("M = 16\nN = 40\nbatch_size = 10\nlambda = auto\nmask_radius = auto").unwrap();
        assert_eq!(cfg.resolved_mask_radius(), 7);
        let spec = cfg.spec().unwrap();
        let shells = shell_table(&spec, 7).unwrap();
        let want = 1e-3 * 40.0 * shells.px_count[7] as f64 / shells.vx_count[7] as f64;
        assert_eq!(cfg.resolved_lambda(&spec, 7, 40).unwrap(), want);
    }

    #[test]
    fn synthesize_hits_requested_snr() {
        let cfg = ExperimentConfig::parse("M = 12\nN = 30\nbatch_size = 10\nsnr = 2.0").unwrap();
        let (truth, stack) = cfg.synthesize().unwrap();
        let proj = stack.projector().unwrap();
        let power = mean_signal_power(&truth, &stack.poses, stack.ctfs.as_deref(), &proj);
        assert!((power / (stack.sigma * stack.sigma) - 2.0).abs() < 1e-12);
        assert_eq!(stack.len(), 30);
        assert!(stack.ctfs.is_some());
    }
}
