//! End-to-end exercise of the `duin` binary: every subcommand runs against
//! a small synthetic dataset in a temp directory, and the documented exit
//! codes are checked on the common failure paths.

use std::path::Path;
use std::process::{Command, Output};

fn duin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_duin"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn duin");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small-model overrides shared by every training-shaped invocation.
const SMALL: &[&str] = &[
    "--set", "d=4",
    "--set", "n_heads=2",
    "--set", "t_max=6",
    "--set", "l_max=4",
    "--set", "batch_size=16",
    "--set", "epochs=1",
];

fn gen_small(dir: &Path, seed: u64) {
    run_ok(duin().args([
        "gen-synthetic",
        "--out",
        dir.to_str().unwrap(),
        "--sessions",
        "200",
        "--users",
        "24",
        "--items",
        "80",
        "--attributes",
        "4",
        "--seed",
        &seed.to_string(),
    ]));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let prep = tmp.path().join("prep");
    let graph = tmp.path().join("graph");
    let run = tmp.path().join("run");

    gen_small(&raw, 7);
    assert!(raw.join("events.tsv").is_file());
    assert!(raw.join("intents.tsv").is_file());

    let out = run_ok(
        duin()
            .args(["prepare", "--events"])
            .arg(raw.join("events.tsv"))
            .arg("--out")
            .arg(&prep)
            .args(SMALL),
    );
    let text = stdout_of(&out);
    assert!(text.contains("split train "), "prepare output: {text}");
    for name in [
        "samples_train.tsv",
        "samples_val.tsv",
        "samples_test.tsv",
        "split_meta.tsv",
        "config.resolved.txt",
        "vocab_item.tsv",
        "vocab_attr.tsv",
        "vocab_user.tsv",
    ] {
        assert!(prep.join(name).is_file(), "prepare should write {name}");
    }

    run_ok(
        duin()
            .args(["build-graph", "--events"])
            .arg(raw.join("events.tsv"))
            .arg("--prep")
            .arg(&prep)
            .arg("--out")
            .arg(&graph)
            .args(SMALL),
    );

    let out = run_ok(
        duin()
            .args(["train", "--prep"])
            .arg(&prep)
            .arg("--graph")
            .arg(&graph)
            .arg("--out")
            .arg(&run)
            .args(SMALL),
    );
    let text = stdout_of(&out);
    assert!(text.contains("steps "), "train output: {text}");
    assert!(text.contains("best_val_auc "), "train output: {text}");
    assert!(run.join("metrics.csv").is_file());
    let ckpt = run.join("checkpoint");
    assert!(ckpt.join("manifest.txt").is_file());

    let out = run_ok(
        duin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .arg("--data")
            .arg(prep.join("samples_test.tsv"))
            .args(["--base-auc", "0.6107"]),
    );
    let text = stdout_of(&out);
    assert!(text.contains("auc 0."), "eval output: {text}");
    assert!(text.contains("relaimpr_vs_base "), "eval output: {text}");
    assert!(text.contains("cross_segment_pairs "), "eval output: {text}");
}

#[test]
fn synthetic_generation_is_reproducible_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_small(&a, 11);
    gen_small(&b, 11);
    let left = std::fs::read(a.join("events.tsv")).unwrap();
    let right = std::fs::read(b.join("events.tsv")).unwrap();
    assert_eq!(left, right, "same seed must write identical bytes");

    let c = tmp.path().join("c");
    gen_small(&c, 12);
    let other = std::fs::read(c.join("events.tsv")).unwrap();
    assert_ne!(left, other, "different seed should change the log");
}

#[test]
fn ablate_and_report_share_the_runs_format() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let prep = tmp.path().join("prep");
    let graph = tmp.path().join("graph");
    let out = tmp.path().join("ablation");

    gen_small(&raw, 7);
    run_ok(
        duin()
            .args(["prepare", "--events"])
            .arg(raw.join("events.tsv"))
            .arg("--out")
            .arg(&prep)
            .args(SMALL),
    );
    run_ok(
        duin()
            .args(["build-graph", "--events"])
            .arg(raw.join("events.tsv"))
            .arg("--prep")
            .arg(&prep)
            .arg("--out")
            .arg(&graph)
            .args(SMALL),
    );

    let table = run_ok(
        duin()
            .args(["ablate", "--prep"])
            .arg(&prep)
            .arg("--graph")
            .arg(&graph)
            .arg("--out")
            .arg(&out)
            .args(["--seeds", "1"])
            .args(SMALL),
    );
    let text = stdout_of(&table);
    assert!(text.starts_with("variant,"), "ablate table: {text}");
    for variant in ["full", "no_eiem", "no_liem", "no_iumm", "no_ssl", "sii"] {
        assert!(text.contains(variant), "table misses {variant}: {text}");
    }
    assert!(out.join("ablation.csv").is_file());
    let runs = out.join("ablation_runs.csv");
    assert!(runs.is_file());

    let report = run_ok(duin().args(["report", "--runs"]).arg(&runs));
    let text = stdout_of(&report);
    assert!(text.contains("variant"), "report output: {text}");
    assert!(text.contains("full"), "report output: {text}");

    let report = run_ok(
        duin()
            .args(["report", "--runs"])
            .arg(&runs)
            .arg("--significance"),
    );
    let text = stdout_of(&report);
    assert!(text.contains("p_vs_full"), "significance output: {text}");
}

#[test]
fn sweep_writes_one_variant_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let prep = tmp.path().join("prep");
    let graph = tmp.path().join("graph");
    let out = tmp.path().join("sweep");

    gen_small(&raw, 7);
    run_ok(
        duin()
            .args(["prepare", "--events"])
            .arg(raw.join("events.tsv"))
            .arg("--out")
            .arg(&prep)
            .args(SMALL),
    );
    run_ok(
        duin()
            .args(["build-graph", "--events"])
            .arg(raw.join("events.tsv"))
            .arg("--prep")
            .arg(&prep)
            .arg("--out")
            .arg(&graph)
            .args(SMALL),
    );

    let table = run_ok(
        duin()
            .args(["sweep", "--param", "alpha", "--values", "0,1"])
            .args(["--prep"])
            .arg(&prep)
            .arg("--graph")
            .arg(&graph)
            .arg("--out")
            .arg(&out)
            .args(["--seeds", "1"])
            .args(SMALL),
    );
    let text = stdout_of(&table);
    assert!(text.contains("alpha=0"), "sweep table: {text}");
    assert!(text.contains("alpha=1"), "sweep table: {text}");
    assert!(out.join("sweep_alpha.csv").is_file());
    assert!(out.join("sweep_alpha_runs.csv").is_file());
}

#[test]
fn failure_paths_use_the_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown config key is a usage error.
    let out = duin()
        .args(["prepare", "--events", "/nonexistent.tsv", "--out"])
        .arg(tmp.path().join("x"))
        .args(["--set", "not_a_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown key should exit 1");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not_a_key"), "stderr: {err}");

    // Missing input file is a data error.
    let out = duin()
        .args(["prepare", "--events", "/nonexistent.tsv", "--out"])
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "missing events should exit 2");

    // Clap-level misuse: unknown subcommand.
    let out = duin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Help and version succeed.
    let out = duin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = duin().arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    // Prep and graph must travel together for ablate.
    let out = duin()
        .args(["ablate", "--prep", "/somewhere", "--out"])
        .arg(tmp.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "lone --prep should exit 1");
}
