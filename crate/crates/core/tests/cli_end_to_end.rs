use std::path::Path;

use tailhedge::cli::run;

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["tailhedge"];
    full.extend_from_slice(args);
    run(full)
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn empirical_risk_on_the_sequence_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let losses = dir.path().join("losses.txt");
    let body: String = (1..=100).map(|i| format!("{i}\n")).collect();
    std::fs::write(&losses, body).unwrap();
    let out = dir.path().join("out");
    let code =
        cli(&["risk", "--losses", &s(&losses), "--alpha", "0.99", "--method", "empirical", "--out-dir", &s(&out)]);
    assert_eq!(code, 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("risk.json")).unwrap()).unwrap();
    assert_eq!(json["var"], 100.0);
    assert_eq!(json["cvar"], 100.0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "risk");
    assert_eq!(manifest["config"]["risk"]["alpha"], 0.99);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["risk", "--losses", &s(&dir.path().join("nope.txt"))]), 1);
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "date,close\n2020-01-02,100\n2020-01-01,101\n").unwrap();
    assert_eq!(cli(&["train", "--data", &s(&bad), "--out-dir", &s(&dir.path().join("t"))]), 2);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    assert_eq!(cli(&["simulate", "--steps", "500", "--seed", "8", "--out-dir", &p("sim")]), 0);
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"train": {"hidden": "8x8", "iterations": 5, "scenarios": 150}}"#).unwrap();
    assert_eq!(
        cli(&[
            "--config",
            &s(&config),
            "train",
            "--data",
            &p("sim/prices.csv"),
            "--iters",
            "8",
            "--out-dir",
            &p("train")
        ]),
        0
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["hidden"], "8x8");
    assert_eq!(manifest["config"]["train"]["iterations"], 8);
    let history = std::fs::read_to_string(dir.path().join("train/loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 9);

    assert_eq!(
        cli(&[
            "backtest",
            "--policy",
            &p("train/policy.json"),
            "--data",
            &p("sim/prices.csv"),
            "--test-start",
            "2000-06-01",
            "--test-end",
            "2001-12-31",
            "--out-dir",
            &p("train"),
        ]),
        0
    );
    assert_eq!(cli(&["report", "--in-dir", &p("train"), "--out-dir", &p("train")]), 0);
    for name in ["networth.svg", "hedge_ratio.svg", "pnl_hist.svg", "metrics.svg", "loss.svg"] {
        let svg = std::fs::read_to_string(dir.path().join("train").join(name)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{name}");
    }
}
