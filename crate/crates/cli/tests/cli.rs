use std::path::Path;
use std::process::{Command, Output};

fn fsld(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsld"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FSLD_THREADS")
        .output()
        .unwrap()
}

const TINY: &[&str] = &["--M", "12", "--N", "40", "--batch_size", "10", "--epochs", "2", "--replicates", "2"];

fn with(sub: &[&str], extra: &[&str]) -> Vec<String> {
    sub.iter().chain(TINY).chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String], out: &Path) -> Output {
    fsld(&args.iter().map(String::as_str).collect::<Vec<_>>(), out)
}

fn digest_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).lines().find(|l| l.contains("digest")).unwrap().to_string()
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&with(&["synth"], &["--seed", "4"]), &tmp.path().join("a"));
    let b = run(&with(&["synth"], &["--seed", "4"]), &tmp.path().join("b"));
    let c = run(&with(&["synth"], &["--seed", "5"]), &tmp.path().join("c"));
    assert!(a.status.success() && b.status.success() && c.status.success());
    let strip = |s: String| s.split_whitespace().skip(2).collect::<Vec<_>>().join(" ");
    assert_eq!(strip(digest_line(&a)), strip(digest_line(&b)));
    assert_ne!(strip(digest_line(&a)), strip(digest_line(&c)));
    assert_eq!(
        std::fs::read(tmp.path().join("a/dataset.fsd")).unwrap(),
        std::fs::read(tmp.path().join("b/dataset.fsd")).unwrap()
    );
}

#[test]
fn noiseless_check_accepts_truth_and_rejects_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    assert!(run(&with(&["synth"], &["--sigma", "0"]), &clean).status.success());
    let truth = clean.join("truth.fsv");
    let ds = clean.join("dataset.fsd");
    let ok = fsld(&["evaluate", truth.to_str().unwrap(), "--check-noiseless", ds.to_str().unwrap()], &clean);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let noisy = tmp.path().join("noisy");
    assert!(run(&with(&["synth"], &["--sigma", "0.1"]), &noisy).status.success());
    let nds = noisy.join("dataset.fsd");
    let bad = fsld(&["evaluate", truth.to_str().unwrap(), "--check-noiseless", nds.to_str().unwrap()], &noisy);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let usage = fsld(&["reconstruct"], tmp.path());
    assert_eq!(usage.status.code(), Some(2));
    let bad_value = run(&with(&["synth"], &["--beta", "1.5"]), tmp.path());
    assert_eq!(bad_value.status.code(), Some(2));
    let bad_batch = fsld(&["synth", "--M", "12", "--N", "20", "--batch_size", "50"], tmp.path());
    assert_eq!(bad_batch.status.code(), Some(2));
    let missing = run(&with(&["reconstruct", "/nonexistent/dataset.fsd"], &[]), tmp.path());
    assert_eq!(missing.status.code(), Some(3));
    let garbage = tmp.path().join("garbage.fsd");
    std::fs::write(&garbage, b"not a dataset").unwrap();
    let corrupt = run(&with(&["analyze", garbage.to_str().unwrap()], &[]), tmp.path());
    assert_eq!(corrupt.status.code(), Some(3));
}

#[test]
fn pipeline_writes_expected_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let all = run(&with(&["all"], &[]), out);
    assert!(all.status.success(), "{}", String::from_utf8_lossy(&all.stderr));
    for f in [
        "dataset.fsd",
        "truth.fsv",
        "reference.fsv",
        "kappa.csv",
        "kappa_replicates.csv",
        "diag_z0.csv",
        "summary.csv",
        "variance.csv",
        "epochs_to_threshold_0.5.csv",
        "trace_estimated.csv",
        "steps_plain.csv",
        "fsc_precomputed.csv",
        "volume_estimated_nothresh.fsv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let steps = std::fs::read_to_string(out.join("steps_estimated.csv")).unwrap();
    assert!(steps.lines().skip(1).all(|l| l.ends_with(",1")));

    let again = tmp.path().join("again");
    let hist = fsld(&["evaluate", "--history", out.to_str().unwrap()], &again);
    assert!(hist.status.success());
    assert_eq!(
        std::fs::read(out.join("epochs_to_threshold_0.8.csv")).unwrap(),
        std::fs::read(again.join("epochs_to_threshold_0.8.csv")).unwrap()
    );

    let vols = [out.join("reference.fsv"), out.join("reference.fsv")];
    let same = fsld(&["evaluate", vols[0].to_str().unwrap(), vols[1].to_str().unwrap()], &again);
    assert!(same.status.success());
    let fsc = std::fs::read_to_string(again.join("fsc.csv")).unwrap();
    assert!(fsc.lines().skip(2).all(|l| l.ends_with(",1")));
}
