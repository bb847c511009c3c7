//! End-to-end checks of the command-line interface against the bundled
//! toy pieces.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scoresep"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn scoresep");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn help_exits_zero() {
    run_ok(bin().arg("--help"));
}

#[test]
fn unknown_flag_rejected() {
    let out = bin().args(["synthesize", "--bogus"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn missing_notes_file_reports_error() {
    let out = bin()
        .args(["synthesize", "--notes", "/nonexistent.csv", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}

/// Full pipeline on bundled toy piece 1: synthesize, train both model
/// kinds, separate, evaluate. Small iteration counts; this checks plumbing,
/// not separation quality.
#[test]
fn pipeline_smoke_toy1() {
    let dir = tempfile::tempdir().unwrap();
    let render = dir.path().join("render");
    let notes = data("toy1.csv");
    let common = [
        "--window-len",
        "1024",
        "--hop",
        "256",
        "--onset-tolerance",
        "0.1",
        "--sustain-tolerance",
        "0.05",
    ];

    run_ok(bin().args([
        "synthesize",
        "--notes",
        notes.to_str().unwrap(),
        "--out",
        render.to_str().unwrap(),
        "--sample-rate",
        "8000",
    ]));
    let mixture = render.join("mixture.wav");
    assert!(mixture.is_file());
    assert!(render.join("stems/left.wav").is_file());
    assert!(render.join("stems/right.wav").is_file());

    let nmf_model = dir.path().join("a.model");
    run_ok(
        bin()
            .args(["train-nmf", "--audio"])
            .arg(&mixture)
            .arg("--notes")
            .arg(&notes)
            .arg("--model")
            .arg(&nmf_model)
            .args(common)
            .args(["--iters", "40"]),
    );

    let ae_model = dir.path().join("c.model");
    run_ok(
        bin()
            .args(["train", "--audio"])
            .arg(&mixture)
            .arg("--notes")
            .arg(&notes)
            .args(["--method", "c", "--model"])
            .arg(&ae_model)
            .args(common)
            .args(["--decoder-hidden", ""])
            .args(["--stage1-iters", "40", "--stage2-iters", "10"])
            .args(["--step-size", "5e-3"]),
    );

    for model in [&nmf_model, &ae_model] {
        let sep = dir.path().join(format!(
            "sep_{}",
            model.file_stem().unwrap().to_string_lossy()
        ));
        run_ok(
            bin()
                .args(["separate", "--model"])
                .arg(model)
                .arg("--audio")
                .arg(&mixture)
                .arg("--notes")
                .arg(&notes)
                .arg("--out")
                .arg(&sep)
                .args(common),
        );
        assert!(sep.join("left.wav").is_file());
        assert!(sep.join("right.wav").is_file());
        assert!(sep.join("residual.wav").is_file());

        let report = sep.join("report.csv");
        let out = run_ok(
            bin()
                .args(["evaluate", "--ref"])
                .arg(render.join("stems"))
                .arg("--est")
                .arg(&sep)
                .arg("--mix")
                .arg(&mixture)
                .arg("--out")
                .arg(&report),
        );
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("left.wav"), "stdout: {stdout}");
        let csv = std::fs::read_to_string(&report).unwrap();
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 3, "line: {line}");
            let nsdr: f64 = fields[2].parse().unwrap();
            assert!(nsdr.is_finite(), "line: {line}");
        }
    }
}

/// A model trained against a different note list (different unit count)
/// must be rejected with a shape diagnostic, not misused.
#[test]
fn separate_rejects_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let render = dir.path().join("render");
    let toy1 = data("toy1.csv");
    let toy2 = data("toy2.csv");
    let common = ["--window-len", "1024", "--hop", "256"];

    run_ok(bin().args([
        "synthesize",
        "--notes",
        toy1.to_str().unwrap(),
        "--out",
        render.to_str().unwrap(),
        "--sample-rate",
        "8000",
    ]));
    let mixture = render.join("mixture.wav");
    let model = dir.path().join("a.model");
    run_ok(
        bin()
            .args(["train-nmf", "--audio"])
            .arg(&mixture)
            .arg("--notes")
            .arg(&toy1)
            .arg("--model")
            .arg(&model)
            .args(common)
            .args(["--iters", "5"]),
    );

    let out = bin()
        .args(["separate", "--model"])
        .arg(&model)
        .arg("--audio")
        .arg(&mixture)
        .arg("--notes")
        .arg(&toy2)
        .arg("--out")
        .arg(dir.path().join("sep"))
        .args(common)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("shape") || stderr.contains("units") || stderr.contains("components"),
        "stderr: {stderr}"
    );
}

/// Identical argv and seed give byte-identical artifacts.
#[test]
fn artifacts_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let render = dir.path().join("render");
    let toy1 = data("toy1.csv");
    run_ok(bin().args([
        "synthesize",
        "--notes",
        toy1.to_str().unwrap(),
        "--out",
        render.to_str().unwrap(),
        "--sample-rate",
        "8000",
    ]));
    let mixture = render.join("mixture.wav");

    let mut models = Vec::new();
    for run in 0..2 {
        let model = dir.path().join(format!("m{run}.model"));
        run_ok(
            bin()
                .args(["--seed", "7", "--threads", "1"])
                .args(["train", "--audio"])
                .arg(&mixture)
                .arg("--notes")
                .arg(&toy1)
                .args(["--method", "b", "--model"])
                .arg(&model)
                .args(["--window-len", "1024", "--hop", "256"])
                .args(["--stage1-iters", "20", "--stage2-iters", "5"]),
        );
        models.push(std::fs::read(&model).unwrap());
    }
    assert_eq!(models[0], models[1]);
}
