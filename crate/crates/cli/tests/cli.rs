use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tavlab_cli::artifacts::{sha256_hex, Manifest, MANIFEST};
use tavlab_cli::validate::validate_dir;

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.json")
}

fn tavlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tavlab")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_into(cmd: &str, out: &Path) -> Output {
    tavlab(&[
        cmd,
        "--config",
        reference().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn missing_field_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(reference()).unwrap()).unwrap();
    v["train"].as_object_mut().unwrap().remove("eta");
    let cfg = dir.path().join("broken.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = tavlab(&[
        "merge",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.eta"), "{}", stderr(&o));
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tavlab(&[
        "merge",
        "--config",
        reference().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--eta=-1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.eta"));
}

#[test]
fn bad_thread_count_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_tavlab"))
        .args(["validate", "."])
        .env("TAVLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("TAVLAB_THREADS"));
}

#[test]
fn empty_directory_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = tavlab(&["validate", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no artifacts"));
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run_into("gap-scan", d.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["gap_scan.json", "gap.csv", "fits.csv", "lemma.csv", MANIFEST] {
        let x = fs::read(a.path().join("gap_scan").join(name)).unwrap();
        let y = fs::read(b.path().join("gap_scan").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn eta_override_changes_config_hash() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run_into("merge", a.path()).status.success());
    let cfg = reference();
    let o = tavlab(&[
        "merge",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
        "--eta",
        "0.25",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read =
        |d: &Path| -> Manifest { serde_json::from_slice(&fs::read(d.join("merge").join(MANIFEST)).unwrap()).unwrap() };
    let (ma, mb) = (read(a.path()), read(b.path()));
    assert_ne!(ma.config_hash, mb.config_hash);
    assert_eq!(mb.config.train.eta, 0.25);
}

fn failed(dir: &Path) -> Vec<String> {
    validate_dir(dir)
        .into_iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect()
}

#[test]
fn corrupted_artifacts_are_caught() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into("gap-scan", dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v = tavlab(&["validate", dir.path().to_str().unwrap()]);
    assert!(v.status.success(), "{}", stderr(&v));
    assert!(failed(dir.path()).is_empty());

    let sub = dir.path().join("gap_scan");
    let gap = sub.join("gap.csv");
    let original = fs::read_to_string(&gap).unwrap();
    let mut rows: Vec<Vec<String>> = original
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    // bend the smallest-η gap of the first α upward so its slope leaves the band
    let last_first_alpha = rows.iter().rposition(|r| r[0] == rows[1][0]).unwrap();
    let g: f64 = rows[last_first_alpha][2].parse().unwrap();
    rows[last_first_alpha][2] = format!("{}", g * 50.0);
    let edited: String = rows.iter().map(|r| r.join(",") + "\n").collect();
    fs::write(&gap, &edited).unwrap();

    // the digest no longer matches
    assert!(failed(dir.path()).contains(&"gap_scan/gap.csv integrity".to_string()));

    // with the manifest re-signed only the slope check trips
    let mpath = sub.join(MANIFEST);
    let mut m: Manifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
    let entry = m.files.iter_mut().find(|f| f.name == "gap.csv").unwrap();
    entry.sha256 = sha256_hex(edited.as_bytes());
    entry.bytes = edited.len();
    fs::write(&mpath, serde_json::to_vec_pretty(&m).unwrap()).unwrap();
    assert_eq!(failed(dir.path()), vec!["gap_scan/gap slope".to_string()]);
    let v = tavlab(&["validate", dir.path().to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(1));

    fs::write(&gap, "not,a,table\n").unwrap();
    let names = failed(dir.path());
    assert!(names.iter().any(|n| n.contains("gap.csv")), "{names:?}");
}

#[test]
fn corrupt_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_into("gen-tasks", dir.path()).status.success());
    fs::write(dir.path().join("gen_tasks").join(MANIFEST), "{").unwrap();
    let names = failed(dir.path());
    assert_eq!(names, vec![format!("gen_tasks/{MANIFEST}")]);
}
