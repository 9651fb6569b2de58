use std::path::Path;
use std::process::{Command, Output};

fn covshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covshift"))
        .args(args)
        .env("COVSHIFT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn strip_timestamp(stdout: &[u8]) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(stdout)
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("generated_at");
            v
        })
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_then_estimate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let out = covshift(&[
        "synth",
        "--preset",
        "unseen-cluster",
        "--seed",
        "7",
        "--out",
        p(&a),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let args = [
        "estimate",
        "--method",
        "atc-distcs",
        "--method",
        "atc",
        "--bundle",
        p(&a),
    ];
    let first = covshift(&args);
    let second = covshift(&args);
    assert_eq!(first.status.code(), Some(0));
    let r1 = strip_timestamp(&first.stdout);
    assert_eq!(r1, strip_timestamp(&second.stdout));
    assert_eq!(r1.len(), 2);
    assert_eq!(r1[0]["method"], "atc-distcs");
    assert_eq!(r1[0]["config"]["k"], 25);
    assert_eq!(r1[0]["run_config"]["estimate"]["quantile"], 0.99);
    assert_eq!(r1[0]["run_config"]["estimate"]["max_ref"], 50000);
    assert_eq!(r1[0]["run_config"]["estimate"]["cot"]["batch_size"], 2500);
    assert!(
        r1[0]["accuracy_estimate"].as_f64().unwrap()
            <= r1[1]["accuracy_estimate"].as_f64().unwrap()
    );
}

#[test]
fn gde_dist_without_second_bundle_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(covshift(&["synth", "--preset", "identity", "--out", p(&a)])
        .status
        .success());
    let out = covshift(&["estimate", "--method", "gde-dist", "--bundle", p(&a)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bundle-b"));
}

#[test]
fn exit_codes() {
    assert_eq!(covshift(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        covshift(&["estimate", "--bundle", "x", "--method", "atc", "--bogus"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(covshift(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(
        covshift(&["estimate", "--bundle", p(&missing), "--method", "atc"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        covshift(&["synth", "--preset", "no-such", "--out", p(&missing)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn scenario_file_and_corrupt_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(covshift(&[
        "synth",
        "--preset",
        "prior-shift",
        "--seed",
        "2",
        "--out",
        p(&a)
    ])
    .status
    .success());
    // regenerate from the scenario written next to the bundle
    let b = dir.path().join("b");
    let scenario = a.join("scenario.json");
    assert!(
        covshift(&["synth", "--scenario", p(&scenario), "--out", p(&b)])
            .status
            .success()
    );
    assert_eq!(
        std::fs::read(a.join("test_labels.npy")).unwrap(),
        std::fs::read(b.join("test_labels.npy")).unwrap()
    );
    std::fs::write(b.join("val_logits.npy"), b"not an array").unwrap();
    let out = covshift(&["estimate", "--method", "atc", "--bundle", p(&b)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("val_logits.npy"));
}
