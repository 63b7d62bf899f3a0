use std::path::Path;
use std::process::{Command, Output};

fn skybid(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skybid"))
        .args(args)
        .env("SKYBID_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn dry_run_prints_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = skybid(&["train", "--preset", "5sp-8svc", "--dry-run", "--set", "seed=7"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("n_services = 8"));
    assert!(text.contains("seed = 7"));
    assert!(text.contains("action_dim_delta = 48"));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn config_file_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    std::fs::write(&file, "preset = \"desk\"\nepochs = 5\nhorizon = 4\n").unwrap();
    let o = skybid(
        &["train", "--config", file.to_str().unwrap(), "--set", "epochs=2", "--dry-run"],
        tmp.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("epochs = 2"));
    assert!(text.contains("horizon = 4"));
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |dir: &str| {
        vec![
            "train".to_string(),
            "--preset".into(),
            "desk".into(),
            "--set".into(),
            "epochs=3".into(),
            "--set".into(),
            "horizon=4".into(),
            "--set".into(),
            "snapshot_every=2".into(),
            "--out".into(),
            tmp.path().join(dir).to_str().unwrap().to_string(),
        ]
    };
    for dir in ["a", "b"] {
        let a = args(dir);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        let o = skybid(&refs, tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.csv", "params.bin", "params_epoch0002.bin", "config.toml"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
    let metrics = std::fs::read_to_string(tmp.path().join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn validate_with_zero_episodes_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = skybid(
        &[
            "train", "--preset", "desk", "--set", "epochs=1", "--set", "horizon=3", "--out",
            run.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    let params = run.join("params.bin");
    let val = tmp.path().join("val");
    let o = skybid(
        &[
            "validate", "--preset", "desk", "--params", params.to_str().unwrap(), "--episodes",
            "0", "--out", val.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(val.join("validation.csv")).unwrap();
    assert_eq!(
        csv,
        "episode,mean_negative_utility,neg_utility_sp0,neg_utility_sp1,neg_utility_sp2\n"
    );

    let o = skybid(
        &[
            "validate", "--preset", "desk", "--params", params.to_str().unwrap(), "--episodes",
            "2", "--out", val.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(val.join("validation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    // A policy trained for H=2, K=2 does not fit a K=8 scenario.
    let o = skybid(
        &["validate", "--preset", "5sp-8svc", "--params", params.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_resumes_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("sweep");
    let args = [
        "sweep",
        "--presets",
        "desk,desk-byz",
        "--seeds",
        "0,1",
        "--set",
        "epochs=2",
        "--set",
        "horizon=3",
        "--set",
        "batch_min=4",
        "--set",
        "batch_max=4",
        "--set",
        "mini_batch=2",
        "--out",
        root.to_str().unwrap(),
    ];
    let o = skybid(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(root.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("desk,0,"));
    assert!(lines[4].starts_with("desk-byz,1,"));

    let metrics = root.join("desk/seed0/metrics.csv");
    let before = std::fs::metadata(&metrics).unwrap().modified().unwrap();
    let o = skybid(&args, tmp.path());
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stderr).matches("skip").count(), 4);
    assert_eq!(std::fs::metadata(&metrics).unwrap().modified().unwrap(), before);
    assert_eq!(std::fs::read_to_string(root.join("summary.csv")).unwrap(), summary);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(skybid(&["train", "--preset", "nope"], tmp.path()).status.code(), Some(1));
    assert_eq!(
        skybid(&["train", "--preset", "desk", "--set", "filter_mode=bogus"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        skybid(&["train", "--preset", "desk", "--set", "byz_ids=[0,1]"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    let missing = tmp.path().join("missing.bin");
    assert_eq!(
        skybid(&["validate", "--params", missing.to_str().unwrap()], tmp.path()).status.code(),
        Some(3)
    );
    // The sampled weighted-potential identity fails on multi-cell games.
    let o = skybid(
        &["oracle", "--levels", "3", "--inflations", "2", "--diagonal", "4", "--samples", "500",
          "--brd-starts", "5"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["authenticity"]["passed"], true);
    assert_eq!(report["potential_identity"]["winner_preserving"]["max_abs_residual"], 0.0);
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = skybid(&["train", "--preset", "desk", "--epochs", "1", "--set", "horizon=2"], tmp.path());
    assert!(o.status.success());
    let runs: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name();
    assert!(name.to_string_lossy().starts_with("desk-seed0-"));
}
