use std::path::Path;
use std::process::Command;

fn talkflow(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_talkflow"))
        .arg("--out")
        .arg(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"experiment": "small", "data": {"train_sequences": 6, "held_sequences": 3, "seq_len": 12}, "sample": {"length": 12}}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"expflow": {"nu": 2.0, "stepz": 3}}"#).unwrap();
    let (code, _, err) = talkflow(
        tmp.path(),
        &["--config", bad.to_str().unwrap(), "synth-data"],
    );
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("stepz"));
    assert_eq!(
        talkflow(tmp.path(), &["--preset", "laptop", "synth-data"]).0,
        2
    );
    assert_eq!(
        talkflow(tmp.path(), &["--config", "/nonexistent.json", "synth-data"]).0,
        2
    );
    assert_eq!(talkflow(tmp.path(), &["no-such-command"]).0, 2);
    assert_eq!(talkflow(tmp.path(), &["eval", "--criteria", "13"]).0, 2);
}

#[test]
fn missing_inputs_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in [
        "train-expflow",
        "sample",
        "export-latents",
        "train-vqig",
        "animate",
    ] {
        let (code, _, err) = talkflow(tmp.path(), &[cmd]);
        assert_eq!(code, 3, "{cmd}: {err}");
        assert!(err.starts_with("error: data error"), "{cmd}: {err}");
    }
}

#[test]
fn synth_data_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b, &a] {
        let (code, _, err) = talkflow(dir, &["--config", &cfg, "--seed", "3", "synth-data"]);
        assert_eq!(code, 0, "{err}");
    }
    for f in [
        "dataset/train/manifest.json",
        "dataset/held/seq_00002.bin",
        "synth-data/metrics.json",
        "synth-data/config.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let echoed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("synth-data/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["data"]["seq_len"], 12);
}

#[test]
fn short_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let steps = [
        vec!["synth-data"],
        vec!["train-expflow", "--steps", "3"],
        vec!["train-poseflow", "--steps", "3"],
        vec!["sample", "--seeds", "3"],
        vec!["transfer", "--reference", "0", "--target", "1"],
        vec!["export-latents"],
    ];
    for s in &steps {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend(s.iter().copied());
        let (code, _, err) = talkflow(&run, &args);
        assert_eq!(code, 0, "{s:?}: {err}");
    }
    for f in [
        "expflow.ckpt",
        "expflow.bank",
        "poseflow.ckpt",
        "train-expflow/losses.csv",
        "sample/seed_002.csv",
        "sample/pose_000.csv",
        "sample/metrics.json",
        "transfer/transfer.csv",
        "export-latents/latents.csv",
        "export-latents/pca.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("sample/seed_000.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.lines().next().unwrap().starts_with("t,beta0,"));
    let metrics = std::fs::read_to_string(run.join("sample/metrics.csv")).unwrap();
    assert!(metrics.contains("mean pairwise L2"));

    let mut args = vec![
        "--config",
        cfg.as_str(),
        "train-expflow",
        "--steps",
        "5",
        "--resume",
    ];
    let (code, _, _) = talkflow(&run, &args);
    assert_eq!(code, 0);
    assert!(std::fs::read_to_string(run.join("train-expflow/log.txt"))
        .unwrap()
        .contains("resuming expflow from step 3"));
    args.truncate(2);
    args.extend(["eval", "--criteria", "8,9,12"]);
    let (code, out, err) = talkflow(&run, &args);
    assert_eq!(code, 0, "{err}");
    assert!(
        out.contains("criterion  8") && out.contains("criterion  9"),
        "{out}"
    );
    assert!(out.contains("[PASS] criterion  8"), "{out}");
}
