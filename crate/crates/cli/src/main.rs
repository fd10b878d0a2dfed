//! `fsld`: synthesize datasets, analyze conditioning, run reconstructions and
//! evaluate them.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 data or I/O error,
//! 4 numerical failure.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use fsld_core::config::ExperimentConfig;
use fsld_core::error::FsldError;

fn cli() -> Command {
    let mut cmd = Command::new("fsld")
        .about("Fixed-pose Fourier-domain reconstruction experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").value_name("PATH").global(true).help("key = value config file"))
        .arg(
            Arg::new("reference")
                .long("reference")
                .value_name("PATH")
                .global(true)
                .help("FSV1 volume to track FSC against"),
        )
        .arg(Arg::new("out").long("out").value_name("DIR").global(true).help("output directory [default: .]"));
    for &key in ExperimentConfig::KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .global(true)
                .hide(!matches!(key, "seed" | "threads" | "variant"))
                .help(format!("override config key '{key}'")),
        );
    }
    cmd.subcommand(
        Command::new("synth").about("Write a synthetic dataset (dataset.fsd) and its ground truth (truth.fsv)"),
    )
    .subcommand(
        Command::new("analyze")
            .about("Condition-number report and Hessian diagonals for a dataset")
            .arg(Arg::new("dataset").required(true).value_name("DATASET")),
    )
    .subcommand(
        Command::new("reconstruct")
            .about("Run one optimizer variant on a dataset")
            .arg(Arg::new("dataset").required(true).value_name("DATASET")),
    )
    .subcommand(
        Command::new("evaluate")
            .about("Per-shell FSC between two volumes, or epochs-to-threshold tables from a run directory")
            .arg(Arg::new("volumes").value_name("VOLUME").num_args(0..=2))
            .arg(Arg::new("history").long("history").value_name("DIR").help("directory holding fsc_<variant>.csv files"))
            .arg(
                Arg::new("check-noiseless")
                    .long("check-noiseless")
                    .value_name("DATASET")
                    .help("verify that DATASET's images equal the projections of VOLUME exactly"),
            ),
    )
    .subcommand(
        Command::new("all")
            .about("Synthesize, analyze, solve the reference and run every variant")
            .arg(Arg::new("skip-analyze").long("skip-analyze").action(ArgAction::SetTrue)),
    )
}

/// Config file (if any) with every `--<key>` override applied.
fn resolve_config(m: &ArgMatches) -> fsld_core::error::Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| FsldError::Config(format!("cannot read config {path}: {e}")))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for &key in ExperimentConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if m.get_one::<String>("threads").is_none() {
        if let Ok(v) = std::env::var("FSLD_THREADS") {
            cfg.set("threads", &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &FsldError) -> u8 {
    match e {
        FsldError::Config(_) | FsldError::InvalidArgument(_) => 2,
        FsldError::Data(_) | FsldError::Io(_) => 3,
        FsldError::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve_config(sub).and_then(|cfg| {
        if cfg.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global()
                .map_err(|e| FsldError::Config(format!("thread pool: {e}")))?;
        }
        let out = PathBuf::from(sub.get_one::<String>("out").map_or(".", String::as_str));
        std::fs::create_dir_all(&out)?;
        let reference = sub.get_one::<String>("reference").map(PathBuf::from);
        let ctx = commands::Context { cfg, out, reference };
        match name {
            "synth" => commands::synth(&ctx),
            "analyze" => commands::analyze(&ctx, sub.get_one::<String>("dataset").unwrap().as_ref()),
            "reconstruct" => commands::reconstruct(&ctx, sub.get_one::<String>("dataset").unwrap().as_ref()),
            "evaluate" => {
                let vols: Vec<PathBuf> = sub.get_many::<String>("volumes").into_iter().flatten().map(PathBuf::from).collect();
                commands::evaluate(
                    &ctx,
                    &vols,
                    sub.get_one::<String>("history").map(PathBuf::from),
                    sub.get_one::<String>("check-noiseless").map(PathBuf::from),
                )
            }
            "all" => commands::all(&ctx, sub.get_flag("skip-analyze")),
            _ => unreachable!(),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsld {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
