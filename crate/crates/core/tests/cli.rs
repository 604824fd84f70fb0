//! Drives the command-line binary through a short run and its follow-ups.

use std::path::Path;
use std::process::Command;

use osslab::harness::plot::load_run_log;

const SHORT: &[&str] = &[
    "--K",
    "300",
    "--K_p",
    "100",
    "--eval_every",
    "100",
    "--samples_per_class",
    "60",
    "--test_per_class",
    "20",
];

fn osslab(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_osslab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn osslab");
    assert!(
        out.status.success(),
        "osslab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn only_subdir(root: &Path) -> std::path::PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn train_eval_and_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let mut args = vec!["train", "--out-root", root.to_str().unwrap()];
    args.extend_from_slice(SHORT);
    let out = osslab(&args);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 300);

    let run = only_subdir(&root);
    for f in [
        "config.txt",
        "metrics.csv",
        "evals.csv",
        "snapshots.jsonl",
        "checkpoint.txt",
        "summary.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = load_run_log(&run).unwrap();
    assert_eq!(log.steps.len(), 300);
    assert_eq!(log.snapshots.len(), 3);

    let data = tmp.path().join("data.txt");
    let mut gen = vec!["generate", "--out", data.to_str().unwrap()];
    gen.extend_from_slice(SHORT);
    osslab(&gen);
    let ck = run.join("checkpoint.txt");
    let out = osslab(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--score",
        "subspace",
    ]);
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reported = reports[0]["auroc"].as_f64().unwrap();
    let logged = log
        .final_evals()
        .into_iter()
        .find(|r| r.score_kind.name() == "subspace")
        .unwrap()
        .auroc;
    assert_eq!(reported, logged);

    osslab(&["emit-plot-data", "--run-dir", run.to_str().unwrap()]);
    let curves = std::fs::read_to_string(run.join("plot/beta_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 256);
}

#[test]
fn config_file_and_overrides_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "# short\nK = 300\nK_p = 100\neval_every = 100\nsamples_per_class = 60\ntest_per_class = 20\n").unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    osslab(&[
        "train",
        "--out-root",
        a.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    let mut args = vec!["train", "--out-root", b.to_str().unwrap()];
    args.extend_from_slice(SHORT);
    osslab(&args);
    let (ra, rb) = (only_subdir(&a), only_subdir(&b));
    assert_eq!(ra.file_name(), rb.file_name());
    assert_eq!(
        std::fs::read(ra.join("metrics.csv")).unwrap(),
        std::fs::read(rb.join("metrics.csv")).unwrap()
    );
}

#[test]
fn bad_invocations_fail_cleanly() {
    for args in [
        &["train", "--no_such_key", "1"][..],
        &["train", "--pi", "1.5"],
        &["sweep", "--axis", "nope", "--values", "1"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_osslab"))
            .args(args)
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
}
