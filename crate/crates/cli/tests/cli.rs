use std::path::Path;
use std::process::{Command, Output};

fn grownet(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_grownet"));
    cmd.args(args);
    if let Some(o) = out {
        cmd.env("GROWNET_OUT", o);
    }
    cmd.output().expect("binary runs")
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const SMALL: [&str; 12] = [
    "--set",
    "widths=4,8,8,16",
    "--set",
    "classes=4",
    "--set",
    "dataset_size=160",
    "--set",
    "t0=1",
    "--set",
    "t_total=3",
    "--set",
    "b_base=16",
];

#[test]
fn plan_prints_table_and_ratio() {
    let out = grownet(&["plan"], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("stage  epochs  batch  cum_flops_pct  widths\n"));
    assert!(text.contains("train_cost_ratio:"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn cost_of_cifar_schedule_on_resnet20() {
    let cfg = configs().join("cifar10-schedule.txt");
    let out = grownet(
        &[
            "cost",
            "--model",
            "resnet20",
            "--config",
            cfg.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success());
    let r: f64 = String::from_utf8(out.stdout)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((r - 54.9).abs() <= 2.0, "{r}");
}

#[test]
fn config_errors_exit_with_two() {
    for bad in [
        ["plan", "--set", "bogus=1"],
        ["plan", "--set", "N=0"],
        ["run", "--set", "lr=-1"],
    ] {
        let out = grownet(&bad, Some(&tempfile::tempdir().unwrap().keep()));
        assert_eq!(out.status.code(), Some(2), "{bad:?}");
        assert!(String::from_utf8(out.stderr)
            .unwrap()
            .contains("config error"));
    }
    let dir = tempfile::tempdir().unwrap();
    let out = grownet(&["sweep", "--axis", "nope=1,2"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_is_deterministic_and_checkpoints_grow_cleanly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["run"];
    args.extend(SMALL);
    for d in [a.path(), b.path()] {
        let out = grownet(&args, Some(d));
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in ["metrics.csv", "summary.json", "config.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let ckpt = a.path().join("checkpoint.net");
    let out = grownet(
        &["grow-check", ckpt.to_str().unwrap(), "--extra", "2"],
        None,
    );
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("max_abs_diff_eval"));
}

#[test]
fn resume_flag_finishes_a_stopped_run() {
    let full = tempfile::tempdir().unwrap();
    let cut = tempfile::tempdir().unwrap();
    let mut args = vec!["run"];
    args.extend(SMALL);
    assert!(grownet(&args, Some(full.path())).status.success());
    let mut partial = args.clone();
    partial.extend(["--max-epochs", "2"]);
    assert!(grownet(&partial, Some(cut.path())).status.success());
    assert!(grownet(&["run", "--resume"], Some(cut.path()))
        .status
        .success());
    assert_eq!(
        std::fs::read(full.path().join("metrics.csv")).unwrap(),
        std::fs::read(cut.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn numeric_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("huge.csv");
    let mut text = String::from("a,b,label\n");
    for i in 0..40 {
        text.push_str(&format!("{}e307,-1.7e308,{}\n", 1 + i % 7, i % 2));
    }
    std::fs::write(&csv, text).unwrap();
    let source = format!("dataset=csv:{}", csv.display());
    let args = [
        "run",
        "--set",
        &source,
        "--set",
        "arch=mlp",
        "--set",
        "widths=8",
        "--set",
        "classes=2",
        "--set",
        "t0=1",
        "--set",
        "t_total=3",
        "--set",
        "b_base=8",
    ];
    let out = grownet(&args, Some(&dir.path().join("out")));
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("numeric failure") && err.contains("stage "),
        "{err}"
    );
}

#[test]
fn lr_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep",
        "--axis",
        "lr=0.01,0.02,0.05,0.1,0.2,0.3,0.5,0.8,1,1.5,2",
    ];
    args.extend(SMALL);
    args.extend(["--set", "dataset_size=48"]);
    let out = grownet(&args, Some(dir.path()));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
}
