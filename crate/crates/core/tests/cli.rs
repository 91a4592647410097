use std::path::Path;
use std::process::{Command, Output};

fn attnlab(storage: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(["--backbone", "tiny-test", "--device", "cpu", "--storage-root"])
        .arg(storage)
        .args(args)
        .output()
        .expect("run attnlab")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn edit_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("edit");
    let out = attnlab(
        dir.path(),
        &[
            "edit", "--seed", "3", "--src", "a red car", "--dst", "a blue car", "--steps", "4", "--out",
            out_dir.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["src.png", "dst.png", "manifest.json"] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["status"], "done");
}

#[test]
fn out_of_range_ratio_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnlab(dir.path(), &["edit", "--src", "a cat", "--dst", "a dog", "--ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("--ratio") && err.contains("[0, 1]"), "{err}");
}

#[test]
fn unknown_site_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnlab(dir.path(), &["edit", "--src", "a cat", "--dst", "a dog", "--sites", "9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--sites"), "{}", stderr(&out));
}

#[test]
fn missing_image_is_a_runtime_error_with_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("real");
    let missing = dir.path().join("nowhere.png");
    let mut args = vec!["edit", "--dst", "a dog", "--steps", "2", "--image"];
    args.push(missing.to_str().unwrap());
    args.extend(["--out", out_dir.to_str().unwrap()]);
    let out = attnlab(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("job log"), "{}", stderr(&out));
    assert!(out_dir.join("job.log").is_file());
}

#[test]
fn probe_sanity_prints_its_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sanity");
    let out = attnlab(dir.path(), &["probe", "sanity", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn sites_lists_the_fixture_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnlab(dir.path(), &["sites"]);
    assert!(out.status.success());
    let rows = String::from_utf8_lossy(&out.stdout).lines().count();
    assert_eq!(rows, 9, "header plus eight sites");
}
