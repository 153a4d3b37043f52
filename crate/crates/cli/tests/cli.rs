use std::path::Path;
use std::process::{Command, Output};

fn gatekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatekit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_input(dir: &Path, name: &str, values: &[f64]) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(values).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

/// Trains the toy net for a few epochs and saves it; returns (model, input a, input b).
fn toy_model(dir: &Path) -> (String, String, String) {
    let model = dir.join("toy.gkt");
    let report = dir.join("report.json");
    let o = gatekit(&[
        "train-stability",
        "--epochs",
        "3",
        "--snapshots",
        "0,3",
        "--out",
        report.to_str().unwrap(),
        "--save-model",
        model.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["snapshots"].as_array().unwrap().len(), 2);
    (
        model.to_str().unwrap().to_owned(),
        write_input(dir, "a.json", &[0.7, -0.4]),
        write_input(dir, "b.json", &[-1.5, 2.0]),
    )
}

#[test]
fn help_exits_zero() {
    let o = gatekit(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pullback"));
}

#[test]
fn missing_model_is_a_usage_error() {
    let o = gatekit(&["pullback", "--class", "0", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--model"));
}

#[test]
fn unknown_flag_suggests_the_close_one() {
    let o = gatekit(&["verify", "--net", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--nets"), "{}", stderr(&o));
}

#[test]
fn small_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("verify.json");
    let o = gatekit(&[
        "verify",
        "--nets",
        "5",
        "--inputs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(r["nets"], 5);
}

#[test]
fn missing_model_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let x = write_input(dir.path(), "x.json", &[0.0, 0.0]);
    let o = gatekit(&[
        "kernel",
        "--model",
        "/nonexistent/model.gkt",
        "--input",
        &x,
        "--input",
        &x,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pullback_gating_changes_the_dump_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let (model, a, b) = toy_model(dir.path());
    let run = |gate: &str, out: &Path| {
        let o = gatekit(&[
            "pullback",
            "--model",
            &model,
            "--input",
            &a,
            "--input",
            &b,
            "--class",
            "0",
            "--class",
            "1",
            "--gate",
            gate,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let hard = dir.path().join("hard");
    let soft = dir.path().join("soft");
    let again = dir.path().join("again.png");
    run("hard", &hard);
    run("sigmoid", &soft);
    run("sigmoid", &again);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_ne!(
        read(&hard.join("pullbacks.raw")),
        read(&soft.join("pullbacks.raw"))
    );
    assert_eq!(
        read(&soft.join("pullbacks.raw")),
        read(&dir.path().join("again.raw"))
    );
    assert_eq!(read(&soft.join("pullbacks.png")), read(&again));
    assert_eq!(&read(&again)[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn ascent_and_kernel_run_on_the_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let (model, a, b) = toy_model(dir.path());
    let out = dir.path().join("asc");
    let o = gatekit(&[
        "ascent",
        "--model",
        &model,
        "--input",
        &a,
        "--class",
        "1",
        "--steps",
        "5",
        "--step-norm",
        "0.2",
        "--radius",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("ascent.json")).unwrap()).unwrap();
    assert_eq!(log[0]["target_logits"].as_array().unwrap().len(), 6);
    assert!(log[0]["difference_norm"].as_f64().unwrap() <= 1.0 + 1e-9);

    let o = gatekit(&["kernel", "--model", &model, "--input", &a, "--input", &b]);
    assert!(o.status.success(), "{}", stderr(&o));
    let k: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (k, e) = (
        k["kernel"].as_f64().unwrap(),
        k["explicit_feature_product"].as_f64().unwrap(),
    );
    assert!((k - e).abs() <= 1e-9 * k.abs().max(1.0));

    let o = gatekit(&["kernel", "--model", &model, "--input", &a]);
    assert_eq!(o.status.code(), Some(2));
}
