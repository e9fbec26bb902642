//! Command-level behavior: artifacts, determinism, exit codes.

use std::path::Path;
use std::process::{Command, Output};

const TINY_DATA: &str = "synth:seed=1,n=256,classes=2,size=8";

fn recast_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recast"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    recast_bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn recast")
}

fn write_tiny_arch(dir: &Path) {
    std::fs::write(
        dir.join("arch.txt"),
        "input 3 8 8\nstem 8\nbasic 8 1\nbasic 8 1\n",
    )
    .unwrap();
}

fn train_tiny(dir: &Path, out: &str, seed: &str) -> Output {
    run(
        &[
            "train",
            "--arch",
            "file:arch.txt",
            "--data",
            TINY_DATA,
            "--classes",
            "2",
            "--epochs",
            "2",
            "--batch",
            "64",
            "--seed",
            seed,
            "--out",
            out,
        ],
        dir,
    )
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    let out = train_tiny(dir.path(), "a", "5");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["a/teacher.rcnet", "a/metrics.csv", "a/config.resolved", "a/norm.kv"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    // same config + seed: byte-identical artifacts
    let out2 = train_tiny(dir.path(), "b", "5");
    assert!(out2.status.success());
    for f in ["teacher.rcnet", "metrics.csv", "norm.kv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    // different seed: different checkpoint
    let out3 = train_tiny(dir.path(), "c", "6");
    assert!(out3.status.success());
    let a = std::fs::read(dir.path().join("a/teacher.rcnet")).unwrap();
    let c = std::fs::read(dir.path().join("c/teacher.rcnet")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn invalid_dataset_path_exits_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    let out = run(
        &[
            "train",
            "--arch",
            "file:arch.txt",
            "--data",
            "raw:/does/not/exist.rcdata",
            "--out",
            "x",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.contains("error:"));
}

#[test]
fn unknown_preset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["analyze", "--arch", "preset:bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_resnet56_reports_published_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["analyze", "--arch", "preset:resnet56", "--out", "report"],
        dir.path(),
    );
    assert!(out.status.success());
    let kv = std::fs::read_to_string(dir.path().join("report/cost.kv")).unwrap();
    let get = |key: &str| -> f64 {
        kv.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("missing {key}"))
            .parse()
            .unwrap()
    };
    assert!((get("params") - 0.85e6).abs() / 0.85e6 < 0.02);
    assert!((get("mults") - 125.75e6).abs() / 125.75e6 < 0.02);
    assert!((get("act_load") - 0.56e6).abs() / 0.56e6 < 0.15);
}

#[test]
fn all_keep_recast_is_identity_and_costs_match() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    assert!(train_tiny(dir.path(), "t", "7").status.success());
    std::fs::write(dir.path().join("keep.plan"), "block 0: keep\nblock 1: keep\n").unwrap();
    let out = run(
        &[
            "recast",
            "--teacher",
            "t/teacher.rcnet",
            "--plan",
            "file:keep.plan",
            "--data",
            TINY_DATA,
            "--batch",
            "64",
            "--out",
            "r",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ct = std::fs::read(dir.path().join("r/cost_teacher.kv")).unwrap();
    let cs = std::fs::read(dir.path().join("r/cost_student.kv")).unwrap();
    assert_eq!(ct, cs, "identity plan must not change costs");

    // teacher and all-keep student evaluate identically
    let summary = std::fs::read_to_string(dir.path().join("r/summary.kv")).unwrap();
    let get = |key: &str| -> f64 {
        summary
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(get("teacher_val_acc"), get("student_val_acc"));
}

#[test]
fn recast_then_export_plotdata_orders_by_act_load() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    assert!(train_tiny(dir.path(), "t", "9").status.success());
    let out = run(
        &[
            "recast",
            "--teacher",
            "t/teacher.rcnet",
            "--plan",
            "all-conv",
            "--data",
            TINY_DATA,
            "--epochs-per-block",
            "1",
            "--batch",
            "64",
            "--out",
            "r1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(
        &["export-plotdata", "--runs", "r1", "--out", "plot.tsv"],
        dir.path(),
    );
    assert!(out.status.success());
    let table = std::fs::read_to_string(dir.path().join("plot.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "two rows per run: {table}");
    let act = |row: &str| -> u64 { row.split('\t').nth(4).unwrap().parse().unwrap() };
    assert!(
        act(rows[0]) > act(rows[1]),
        "baseline then recast with decreasing act load: {table}"
    );
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    std::fs::write(
        dir.path().join("run.cfg"),
        format!(
            "[train]\narch = file:arch.txt\ndata = {TINY_DATA}\nclasses = 2\nepochs = 1\nbatch = 64\nseed = 3\nout = cfg_run\n"
        ),
    )
    .unwrap();
    let out = run(&["--config", "run.cfg", "train"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(dir.path().join("cfg_run/config.resolved")).unwrap();
    assert!(resolved.contains("epochs = 1"));

    // flag overrides the file value
    let out = run(
        &["--config", "run.cfg", "train", "--epochs", "2", "--out", "cfg_run2"],
        dir.path(),
    );
    assert!(out.status.success());
    let resolved = std::fs::read_to_string(dir.path().join("cfg_run2/config.resolved")).unwrap();
    assert!(resolved.contains("epochs = 2"));
}

#[test]
fn out_root_env_var_prefixes_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    let root = dir.path().join("artifacts");
    let out = recast_bin()
        .args([
            "train",
            "--arch",
            "file:arch.txt",
            "--data",
            TINY_DATA,
            "--classes",
            "2",
            "--epochs",
            "1",
            "--batch",
            "64",
            "--out",
            "envrun",
        ])
        .env("RECAST_OUT_ROOT", &root)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("envrun/teacher.rcnet").exists());
}

#[test]
fn recast_plan_mismatch_reports_block_index() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    assert!(train_tiny(dir.path(), "t", "11").status.success());
    // widen block 1: invalid compression direction
    std::fs::write(
        dir.path().join("bad.plan"),
        "block 0: keep\nblock 1: recast basic 99\n",
    )
    .unwrap();
    let out = run(
        &[
            "recast",
            "--teacher",
            "t/teacher.rcnet",
            "--plan",
            "file:bad.plan",
            "--data",
            TINY_DATA,
            "--out",
            "bad",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("block 1"), "stderr: {stderr}");
}

#[test]
fn eval_uses_sibling_norm_stats() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    assert!(train_tiny(dir.path(), "t", "13").status.success());
    let with_explicit = run(
        &[
            "eval",
            "--checkpoint",
            "t/teacher.rcnet",
            "--data",
            "synth:seed=2,n=128,classes=2,size=8",
            "--norm-data",
            TINY_DATA,
        ],
        dir.path(),
    );
    let with_sibling = run(
        &[
            "eval",
            "--checkpoint",
            "t/teacher.rcnet",
            "--data",
            "synth:seed=2,n=128,classes=2,size=8",
        ],
        dir.path(),
    );
    assert!(with_explicit.status.success());
    assert!(with_sibling.status.success());
    assert_eq!(
        String::from_utf8_lossy(&with_explicit.stdout),
        String::from_utf8_lossy(&with_sibling.stdout),
        "sibling norm.kv should reproduce explicit norm stats"
    );
}

#[test]
fn finetune_command_writes_student_and_preserves_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_arch(dir.path());
    assert!(train_tiny(dir.path(), "t", "15").status.success());
    let out = run(
        &[
            "recast",
            "--teacher",
            "t/teacher.rcnet",
            "--plan",
            "all-conv",
            "--data",
            TINY_DATA,
            "--epochs-per-block",
            "1",
            "--batch",
            "64",
            "--out",
            "r",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let teacher_before = std::fs::read(dir.path().join("t/teacher.rcnet")).unwrap();
    let student_before = std::fs::read(dir.path().join("r/student.rcnet")).unwrap();
    let out = run(
        &[
            "finetune",
            "--teacher",
            "t/teacher.rcnet",
            "--student",
            "r/student.rcnet",
            "--data",
            TINY_DATA,
            "--epochs",
            "1",
            "--batch",
            "64",
            "--out",
            "ft",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ft/student_ft.rcnet").exists());
    assert!(dir.path().join("ft/metrics.csv").exists());
    // no command mutates its input checkpoints
    assert_eq!(
        teacher_before,
        std::fs::read(dir.path().join("t/teacher.rcnet")).unwrap()
    );
    assert_eq!(
        student_before,
        std::fs::read(dir.path().join("r/student.rcnet")).unwrap()
    );
}
