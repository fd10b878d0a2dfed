use std::path::{Path, PathBuf};

use fsld_core::config::ExperimentConfig;
use fsld_core::error::{FsldError, Result};
use fsld_core::forward::{sample_uniform_poses, FourierVolume, ImageStack, Interp, Projector};
use fsld_core::grid::{shell_table, GridSpec, ShellTable};
use fsld_core::hessian::{
    cond_lower_bound, exact_diag, hit_counts, kappa_by_radius, pixel_voxel_ratio, BoundRegime, DiagOptions,
};
use fsld_core::io::{read_dataset, read_volume, write_dataset, write_volume};
use fsld_core::metrics::{epochs_to_threshold, fsc, grad_variance_shells, FscCurve};
use fsld_core::optim::{reference_solve, run, RunInputs, RunTrace, Variant};

use crate::report::{header, num, opt, read_fsc_matrix, write_csv, write_fsc_matrix, write_steps, write_trace};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub reference: Option<PathBuf>,
}

const THETAS: [f64; 2] = [0.5, 0.8];

fn lambda_for(cfg: &ExperimentConfig, stack: &ImageStack) -> Result<f64> {
    cfg.resolved_lambda(&stack.spec, stack.mask_radius, stack.len())
}

fn synthesize(ctx: &Context) -> Result<(FourierVolume, ImageStack)> {
    let (truth, stack) = ctx.cfg.synthesize()?;
    let path = ctx.out.join("dataset.fsd");
    let digest = write_dataset(&path, &stack)?;
    write_volume(&ctx.out.join("truth.fsv"), &truth)?;
    println!(
        "dataset {} M={} N={} R={} sigma={} digest {digest:016x}",
        path.display(),
        stack.spec.m(),
        stack.len(),
        stack.mask_radius,
        stack.sigma
    );
    Ok((truth, stack))
}

pub fn synth(ctx: &Context) -> Result<()> {
    synthesize(ctx).map(|_| ())
}

pub fn analyze(ctx: &Context, dataset: &Path) -> Result<()> {
    analyze_stack(ctx, &read_dataset(dataset)?)
}

fn kappa_row(spec: &GridSpec, n: usize, lambda: f64, radius: usize) -> Result<(f64, &'static str)> {
    let bound = cond_lower_bound(n, lambda, pixel_voxel_ratio(spec, radius)?)?;
    let regime = match bound.regime {
        BoundRegime::LowerBound => "lower",
        BoundRegime::Exact => "exact",
    };
    Ok((bound.value, regime))
}

fn analyze_stack(ctx: &Context, stack: &ImageStack) -> Result<()> {
    let (spec, r, n) = (stack.spec, stack.mask_radius, stack.len());
    let lambda = ctx.cfg.analyze_lambda;
    let nn = Projector::new(spec, r, Interp::Nearest)?;
    let opts = DiagOptions::default();
    let noctf = exact_diag(&stack.poses, None, lambda, &nn, opts)?;
    let ctf = exact_diag(&stack.poses, stack.ctfs.as_deref(), lambda, &nn, opts)?;
    let k_noctf = kappa_by_radius(&noctf, &spec, r)?;
    let k_ctf = kappa_by_radius(&ctf, &spec, r)?;
    let mut rows = Vec::with_capacity(r);
    for radius in 1..=r {
        let (bound, regime) = kappa_row(&spec, n, lambda, radius)?;
        rows.push(vec![
            radius.to_string(),
            num(k_noctf[radius - 1]),
            num(k_ctf[radius - 1]),
            num(bound),
            num(1.0 / lambda),
            regime.to_string(),
        ]);
    }
    let cols = ["radius", "kappa_measured_noctf", "kappa_measured_ctf", "lower_bound", "one_over_lambda", "bound_regime"];
    write_csv(&ctx.out.join("kappa.csv"), &header(&cols), &rows)?;

    if ctx.cfg.replicates > 0 {
        let reps = (0..ctx.cfg.replicates)
            .map(|i| {
                let poses = sample_uniform_poses(n, 0.0, ctx.cfg.seed.wrapping_add(1 + i as u64));
                kappa_by_radius(&exact_diag(&poses, None, lambda, &nn, opts)?, &spec, r)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(r);
        for radius in 1..=r {
            let ks: Vec<f64> = reps.iter().map(|k| k[radius - 1]).collect();
            let (bound, regime) = kappa_row(&spec, n, lambda, radius)?;
            rows.push(vec![
                radius.to_string(),
                num(ks.iter().copied().fold(f64::INFINITY, f64::min)),
                num(ks.iter().sum::<f64>() / ks.len() as f64),
                num(ks.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                num(bound),
                regime.to_string(),
            ]);
        }
        let cols = ["radius", "kappa_min", "kappa_mean", "kappa_max", "lower_bound", "bound_regime"];
        write_csv(&ctx.out.join("kappa_replicates.csv"), &header(&cols), &rows)?;
    }

    write_volume(&ctx.out.join("diag_noctf.fsv"), &FourierVolume::from_real(spec, &noctf)?)?;
    write_volume(&ctx.out.join("diag_ctf.fsv"), &FourierVolume::from_real(spec, &ctf)?)?;
    let m = spec.m();
    let mut rows = Vec::with_capacity(m * m);
    for py in 0..m {
        for px in 0..m {
            let j = py * m + px;
            rows.push(vec![
                spec.freq_of_pos(px).to_string(),
                spec.freq_of_pos(py).to_string(),
                num(noctf[j]),
                num(ctf[j]),
            ]);
        }
    }
    write_csv(&ctx.out.join("diag_z0.csv"), &header(&["kx", "ky", "noctf", "ctf"]), &rows)?;
    let hits = hit_counts(&stack.poses, &nn);
    println!(
        "analyze: {} of {} voxels hit, kappa(R={r}) = {} without CTF, {} with CTF",
        hits.nonzero(),
        spec.volume_len(),
        k_noctf[r - 1],
        k_ctf[r - 1]
    );
    Ok(())
}

struct VariantRun {
    volume: FourierVolume,
    trace: RunTrace,
}

fn run_variant(
    ctx: &Context,
    stack: &ImageStack,
    variant: Variant,
    reference: Option<&FourierVolume>,
    diag: &[f64],
) -> Result<VariantRun> {
    let mut oc = ctx.cfg.optim_config(lambda_for(&ctx.cfg, stack)?);
    oc.variant = variant;
    let inputs = RunInputs { v0: None, reference, exact_diag: Some(diag) };
    let (volume, trace) = run(&oc, stack, inputs)?;
    let name = variant.name();
    write_volume(&ctx.out.join(format!("volume_{name}.fsv")), &volume)?;
    write_trace(&ctx.out.join(format!("trace_{name}.csv")), &trace)?;
    write_steps(&ctx.out.join(format!("steps_{name}.csv")), &trace)?;
    if let Some(history) = trace.fsc_history() {
        write_fsc_matrix(&ctx.out.join(format!("fsc_{name}.csv")), &history)?;
    }
    println!(
        "{name}: final loss {} eta {} backtracks {}",
        trace.final_loss(),
        trace.epochs.last().map_or(f64::NAN, |e| e.eta),
        trace.steps.iter().map(|s| u64::from(s.step.backtracks)).sum::<u64>()
    );
    Ok(VariantRun { volume, trace })
}

fn tri_diag(ctx: &Context, stack: &ImageStack) -> Result<Vec<f64>> {
    let lambda = lambda_for(&ctx.cfg, stack)?;
    exact_diag(&stack.poses, stack.ctfs.as_deref(), lambda, &stack.projector()?, DiagOptions::default())
}

pub fn reconstruct(ctx: &Context, dataset: &Path) -> Result<()> {
    let stack = read_dataset(dataset)?;
    let reference = ctx.reference.as_deref().map(read_volume).transpose()?;
    let diag = tri_diag(ctx, &stack)?;
    run_variant(ctx, &stack, ctx.cfg.variant, reference.as_ref(), &diag).map(|_| ())
}

fn shells_for(ctx: &Context, spec: &GridSpec) -> Result<ShellTable> {
    shell_table(spec, ctx.cfg.mask_radius.unwrap_or(spec.max_mask_radius()))
}

fn write_e2t(ctx: &Context, histories: &[(Variant, Vec<FscCurve>)]) -> Result<()> {
    let shells = histories[0].1[0].len();
    for theta in THETAS {
        let tables = histories
            .iter()
            .map(|(_, h)| epochs_to_threshold(h, theta))
            .collect::<Result<Vec<_>>>()?;
        let mut cols = vec!["shell".to_string()];
        cols.extend(histories.iter().map(|(v, _)| v.name().to_string()));
        let rows = (0..shells)
            .map(|s| std::iter::once(s.to_string()).chain(tables.iter().map(|t| t[s].to_string())).collect())
            .collect::<Vec<_>>();
        write_csv(&ctx.out.join(format!("epochs_to_threshold_{theta}.csv")), &cols, &rows)?;
    }
    Ok(())
}

pub fn evaluate(ctx: &Context, volumes: &[PathBuf], history: Option<PathBuf>, check: Option<PathBuf>) -> Result<()> {
    let mut did = false;
    if let Some(ds) = check {
        let [vol] = volumes else {
            return Err(FsldError::Config("--check-noiseless takes exactly one VOLUME".into()));
        };
        check_noiseless(&read_dataset(&ds)?, &read_volume(vol)?)?;
        did = true;
    } else if let [a, b] = volumes {
        let (u, v) = (read_volume(a)?, read_volume(b)?);
        let shells = shells_for(ctx, &u.spec)?;
        let curve = fsc(&u, &v, &shells)?;
        let rows = (0..curve.len())
            .map(|s| vec![s.to_string(), curve.counts[s].to_string(), opt(curve.values[s])])
            .collect::<Vec<_>>();
        write_csv(&ctx.out.join("fsc.csv"), &header(&["shell", "voxels", "fsc"]), &rows)?;
        println!("fsc: {}", curve.values.iter().map(|v| opt(*v)).collect::<Vec<_>>().join(" "));
        did = true;
    } else if !volumes.is_empty() {
        return Err(FsldError::Config("evaluate compares exactly two volumes".into()));
    }
    if let Some(dir) = history {
        let mut histories = Vec::new();
        for v in Variant::ALL {
            let path = dir.join(format!("fsc_{}.csv", v.name()));
            if path.exists() {
                histories.push((v, read_fsc_matrix(&path)?));
            }
        }
        if histories.is_empty() || histories.iter().any(|(_, h)| h.is_empty()) {
            return Err(FsldError::Data(format!("no FSC histories in {}", dir.display())));
        }
        write_e2t(ctx, &histories)?;
        did = true;
    }
    if !did {
        return Err(FsldError::Config("nothing to evaluate: give two volumes, --history or --check-noiseless".into()));
    }
    Ok(())
}

fn check_noiseless(stack: &ImageStack, v: &FourierVolume) -> Result<()> {
    let proj = stack.projector()?;
    let mut mismatched = 0usize;
    let mut worst = 0.0f64;
    for (i, pose) in stack.poses.iter().enumerate() {
        let p = proj.project(v, pose, stack.ctf(i))?;
        let diff = p.iter().zip(stack.image(i)).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        if diff != 0.0 {
            mismatched += 1;
            worst = worst.max(diff);
        }
    }
    if mismatched > 0 {
        return Err(FsldError::Data(format!(
            "{mismatched} of {} images differ from their projections (max |diff| {worst})",
            stack.len()
        )));
    }
    println!("noiseless check: all {} images equal their projections", stack.len());
    Ok(())
}

fn shell_means(shells: &ShellTable, f: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..shells.num_shells())
        .map(|r| {
            let m = shells.voxels_in_shell(r);
            m.iter().map(|&j| f(j)).sum::<f64>() / m.len().max(1) as f64
        })
        .collect()
}

pub fn all(ctx: &Context, skip_analyze: bool) -> Result<()> {
    let (_, stack) = synthesize(ctx)?;
    let lambda = lambda_for(&ctx.cfg, &stack)?;
    let reference = match &ctx.reference {
        Some(p) => read_volume(p)?,
        None => {
            let rep = reference_solve(&stack, lambda, ctx.cfg.cg_tol, ctx.cfg.cg_max_iter)?;
            println!("reference: {} CG iterations, relative residual {}", rep.iterations, rep.rel_residual);
            rep.volume
        }
    };
    write_volume(&ctx.out.join("reference.fsv"), &reference)?;
    if !skip_analyze {
        analyze_stack(ctx, &stack)?;
    }
    let diag = tri_diag(ctx, &stack)?;
    let runs = Variant::ALL
        .iter()
        .map(|&v| run_variant(ctx, &stack, v, Some(&reference), &diag).map(|r| (v, r)))
        .collect::<Result<Vec<_>>>()?;
    let histories: Vec<(Variant, Vec<FscCurve>)> =
        runs.iter().map(|(v, r)| (*v, r.trace.fsc_history().unwrap_or_default())).collect();
    write_e2t(ctx, &histories)?;

    let shells = shell_table(&stack.spec, stack.mask_radius)?;
    let find = |v: Variant| &runs.iter().find(|(x, _)| *x == v).unwrap().1;
    let nothresh = find(Variant::EstimatedNoThresh);
    let estimated = find(Variant::Estimated);
    let oc = ctx.cfg.optim_config(lambda);
    let ones = vec![1.0; stack.spec.volume_len()];
    let gv = grad_variance_shells(&stack, &nothresh.volume, &shells, &oc, &ones)?;
    let inv = |p: &Option<Vec<f64>>| {
        let p = p.as_deref().unwrap_or(&ones);
        shell_means(&shells, |j| 1.0 / p[j])
    };
    let (inv_est, inv_nt) = (inv(&estimated.trace.precond), inv(&nothresh.trace.precond));
    let rows = (0..shells.num_shells())
        .map(|s| vec![s.to_string(), num(gv.variance[s]), num(inv_est[s]), num(inv_nt[s])])
        .collect::<Vec<_>>();
    let cols = ["shell", "grad_variance", "inv_precond_estimated", "inv_precond_nothresh"];
    write_csv(&ctx.out.join("variance.csv"), &header(&cols), &rows)?;

    let top = shells.top_third();
    let rows = runs
        .iter()
        .map(|(v, r)| {
            let e = &r.trace.epochs;
            let last = e.last().unwrap();
            let dec3 = if e.len() >= 4 {
                let before = e[e.len() - 4].loss;
                (before - last.loss) / before
            } else {
                f64::NAN
            };
            let curve = last.fsc.as_ref();
            vec![
                v.name().to_string(),
                num(last.loss),
                num(dec3),
                num(last.eta),
                r.trace.steps.iter().map(|s| u64::from(s.step.backtracks)).sum::<u64>().to_string(),
                r.trace.steps.iter().filter(|s| !s.step.satisfied()).count().to_string(),
                opt(curve.and_then(|c| c.mean_over(top.clone()))),
                opt(curve.and_then(|c| c.values.iter().flatten().copied().reduce(f64::min))),
            ]
        })
        .collect::<Vec<_>>();
    let cols = [
        "variant",
        "final_loss",
        "loss_decrease_last3",
        "final_eta",
        "backtracks",
        "armijo_violations",
        "fsc_top_third",
        "fsc_min",
    ];
    write_csv(&ctx.out.join("summary.csv"), &header(&cols), &rows)?;
    Ok(())
}
