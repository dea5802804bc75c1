use std::process::Command;

fn agrifuse(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_agrifuse")).args(args).output().unwrap()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let o = agrifuse(&["cv", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error: cli:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_dataset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    let o = agrifuse(&["ingest", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("fields.json"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(agrifuse(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_then_fuse_writes_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cubes = dir.path().join("cubes");
    let d = data.to_str().unwrap();
    let o = agrifuse(&["synth", "--out", d, "--farms", "1", "--fields-per-farm", "2", "--size", "6", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = agrifuse(&["fuse", "--data", d, "--out", cubes.to_str().unwrap(), "--modalities", "s2,dem"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(cubes.join("farm00_field00.fcb").is_file());
    assert!(cubes.join("farm00_field01.fcb").is_file());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(cubes.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "fuse");
    assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn bad_modalities_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    assert!(agrifuse(&["synth", "--out", d, "--farms", "1", "--fields-per-farm", "1", "--size", "4"]).status.success());
    let o = agrifuse(&["fuse", "--data", d, "--out", dir.path().join("c").to_str().unwrap(), "--modalities", "dem"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("s2"), "{}", stderr(&o));
}
