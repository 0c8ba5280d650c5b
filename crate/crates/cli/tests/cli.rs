use std::path::Path;
use std::process::{Command, Output};

fn jcdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jcdnet"))
        .args(args)
        .output()
        .expect("spawn jcdnet")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path) {
    let out = jcdnet(&[
        "synth",
        "--out",
        p(dir),
        "--set",
        "num_videos=16",
        "--set",
        "test_videos=6",
        "--set",
        "snippets_per_video=24",
        "--set",
        "common_len=[2,3]",
        "--set",
        "definite_len=[2,3]",
        "--set",
        "feature_dim=16",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_train(data: &Path, out: &Path) -> Output {
    jcdnet(&[
        "train",
        "--config",
        p(&data.join("run_config.json")),
        "--manifest",
        p(&data.join("manifest.json")),
        "--out",
        p(out),
        "--set",
        "epochs=2",
        "--set",
        "batch_size=8",
        "--set",
        "model.hidden_dim=8",
    ])
}

#[test]
fn help_exits_zero_and_bad_args_exit_one() {
    assert_eq!(jcdnet(&["--help"]).status.code(), Some(0));
    assert_eq!(jcdnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(jcdnet(&["train"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_fault_exits_three() {
    let ok = jcdnet(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("PASS conv1d"));
    assert!(!text.contains("FAIL"));

    let bad = jcdnet(&["gradcheck", "--fault", "sigmoid"]);
    assert_eq!(bad.status.code(), Some(3));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.contains("FAIL sigmoid"));
    assert!(text.contains("PASS matmul"));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_synth(&data);
    for f in [
        "manifest.json",
        "test_manifest.json",
        "synth_config.json",
        "run_config.json",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let out = small_train(&data, &run);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("checkpoint.jcdc").exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 2, "two epochs of two steps");

    let ev = dir.path().join("eval");
    let out = jcdnet(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint.jcdc")),
        "--manifest",
        p(&data.join("test_manifest.json")),
        "--out",
        p(&ev),
        "--traces",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["avg_0.3_0.9"].is_number());
    assert_eq!(report["sanity_gt_as_proposals"]["avg_0.3_0.9"], 100.0);
    let table = std::fs::read_to_string(ev.join("report.txt")).unwrap();
    assert!(table.contains("0.3:0.9"));
    assert!(ev.join("proposals.jsonl").exists());
    let csv = std::fs::read_to_string(ev.join("proposals.csv")).unwrap();
    assert!(csv.starts_with("video_id,t_start,t_end,score,label"));
    let traces = std::fs::read_to_string(ev.join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 6);
}

#[test]
fn eval_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_synth(&data);
    let run = dir.path().join("run");
    assert!(small_train(&data, &run).status.success());

    let ev = dir.path().join("eval");
    let out = jcdnet(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint.jcdc")),
        "--manifest",
        p(&data.join("test_manifest.json")),
        "--config",
        p(&data.join("run_config.json")),
        "--out",
        p(&ev),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cad."), "error should name tensors: {err}");
    assert!(!ev.exists(), "no outputs on validation failure");
}

#[test]
fn invalid_config_fails_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_synth(&data);
    let run = dir.path().join("run");
    let out = jcdnet(&[
        "train",
        "--config",
        p(&data.join("run_config.json")),
        "--manifest",
        p(&data.join("manifest.json")),
        "--out",
        p(&run),
        "--set",
        "ablation.use_tea=false",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!run.exists());

    let out = jcdnet(&[
        "train",
        "--config",
        p(&data.join("run_config.json")),
        "--manifest",
        p(&data.join("manifest.json")),
        "--out",
        p(&run),
        "--set",
        "model.feature_dim=32",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!run.exists());

    let out = jcdnet(&[
        "synth",
        "--out",
        p(&dir.path().join("x")),
        "--set",
        "snippets_per_video=4",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn ablate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_synth(&data);
    let out_dir = dir.path().join("abl");
    let out = jcdnet(&[
        "ablate",
        "--config",
        p(&data.join("run_config.json")),
        "--manifest",
        p(&data.join("manifest.json")),
        "--eval-manifest",
        p(&data.join("test_manifest.json")),
        "--out",
        p(&out_dir),
        "--experiments",
        "1,7",
        "--num-seeds",
        "2",
        "--set",
        "epochs=1",
        "--set",
        "batch_size=8",
        "--set",
        "model.hidden_dim=8",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["experiment"], 7);
    assert_eq!(rows[0]["seeds"].as_array().unwrap().len(), 2);

    let bad = jcdnet(&[
        "ablate",
        "--config",
        p(&data.join("run_config.json")),
        "--manifest",
        p(&data.join("manifest.json")),
        "--out",
        p(&dir.path().join("abl2")),
        "--experiments",
        "11",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
