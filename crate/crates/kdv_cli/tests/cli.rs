use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdvctl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdvctl")).args(args).current_dir(cwd).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

const GRAMIAN: &str = "task = \"gramian\"\n[grid]\nn_x = 16\n[time]\nn_t = 32\n";

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "g.toml", GRAMIAN);
    let out = kdvctl(&["validate", &f], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: task gramian"));
}

#[test]
fn config_errors_exit_with_two_and_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.toml", "task = \"gramian\"\n[grid]\nn_x = 3\n");
    for cmd in ["validate", "run"] {
        let out = kdvctl(&[cmd, &f], dir.path());
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    }
}

#[test]
fn run_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "g.toml", GRAMIAN);
    let out = kdvctl(&["run", &f, "-o", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let id = stdout.lines().next().unwrap().strip_prefix("run_id ").unwrap();
    assert!(dir.path().join("out").join(id).join("manifest.json").is_file());
    assert_eq!(fs::read_to_string(dir.path().join("out/manifests.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "g.toml", GRAMIAN);
    let out = kdvctl(&["sweep", &f, "-p", "L", "-v", "1,1.5,2", "-o", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let table = stdout.lines().find_map(|l| l.strip_prefix("table ")).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join(table)).unwrap().lines().count(), 4);
}

#[test]
fn atlas_exports_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdvctl(&["atlas", "--set", "S", "--k-max", "3", "-o", "s.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("set,k,l,length"));
}

#[test]
fn task_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "nl.toml", "task = \"nonlinear\"\n[grid]\nn_x = 16\n[time]\nn_t = 32\n[initial]\nkind = \"sine\"\namplitude = 1.0\n");
    let out = kdvctl(&["run", &f], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonlinear"));
}
