use std::path::Path;
use std::process::{Command, Output};

fn rltrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rltrack"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawning rltrack")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(rltrack(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[agent]\ngamma = 1.5\n").unwrap();
    let out = dir.path().join("ph");
    assert_eq!(rltrack(&["--config", path(&cfg), "phantom", "--out", path(&out)]).status.code(), Some(2));
    std::fs::write(&cfg, "[agent]\nno_such_key = 1\n").unwrap();
    assert_eq!(rltrack(&["--config", path(&cfg), "phantom", "--out", path(&out)]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = rltrack(&[
        "score",
        "--phantom",
        path(&dir.path().join("absent")),
        "--tractogram",
        path(&dir.path().join("absent.trx")),
        "--out",
        path(&dir.path().join("s")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn manifest_records_hashes_and_replay_detects_changes() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    assert!(rltrack(&["--seed", "5", "phantom", "--out", path(&ph)]).status.success());
    let text = std::fs::read_to_string(ph.join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["command"], "phantom");
    assert_eq!(m["seed"], 5);
    let outputs = m["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("volume.shv") && outputs.contains_key("tracking.msk"));
    assert!(!outputs.contains_key("manifest.json"));

    let again = dir.path().join("again");
    let o = rltrack(&["replay", path(&ph), "--out", path(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // a recorded hash that no longer matches the rerun
    let mut bad = m.clone();
    bad["outputs"]["volume.shv"] = serde_json::Value::String("0".repeat(64));
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let o = rltrack(&["replay", path(&bad_path), "--out", path(&dir.path().join("r2"))]);
    assert_eq!(o.status.code(), Some(5));

    // an edited configuration no longer matches its hash
    let mut edited = m.clone();
    edited["config"] = serde_json::Value::String(m["config"].as_str().unwrap().replace("size = 32", "size = 16"));
    std::fs::write(&bad_path, serde_json::to_string(&edited).unwrap()).unwrap();
    let o = rltrack(&["replay", path(&bad_path), "--out", path(&dir.path().join("r3"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn replay_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    assert!(rltrack(&["phantom", "--out", path(&ph)]).status.success());
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, "[ae]\nc1 = 4\nc2 = 4\n\n[ae_training]\nn_patches = 8\nepochs = 1\n").unwrap();
    let ae = dir.path().join("ae");
    let o = rltrack(&["--config", path(&cfg), "train-ae", "--phantom", path(&ph), "--out", path(&ae)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ae.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["latent_len"], 864);
    assert_eq!(report["compression_ratio"], 23.625);

    let mut vol = std::fs::read(ph.join("volume.shv")).unwrap();
    let last = vol.len() - 1;
    vol[last] ^= 1;
    std::fs::write(ph.join("volume.shv"), vol).unwrap();
    let o = rltrack(&["replay", path(&ae), "--out", path(&dir.path().join("again"))]);
    assert_eq!(o.status.code(), Some(2));
}
