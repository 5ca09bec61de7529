use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

const MICRO: &str = r#"{
  "model": {"grid": {"h": 8, "d": 8, "w": 8, "n": 2, "k": 1}, "enc_channels": [4, 4, 4, 4],
            "gru_layers": 2, "gru_hidden": 4, "decoder_channels": [4, 4, 4, 4, 3], "gn_groups": 2},
  "dataset": {"train": 20, "val": 4, "test": 4, "point_count": 512},
  "epochs_phase1": 3, "epochs_phase2": 0
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_symslice"));
    c.env_remove("SYMSLICE_DATA_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn symslice")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn field(s: &str, key: &str) -> f64 {
    let tok = s
        .split_whitespace()
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {s}"));
    tok.parse().unwrap()
}

#[test]
fn micro_training_is_fast_and_learns() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "c.json", MICRO);
    let start = Instant::now();
    ok(t.path(), &["--config", "c.json", "train", "--out", "run"]);
    assert!(start.elapsed().as_secs() < 60);
    assert!(t.path().join("run/model.symw").exists());
    let rows = csv_rows(&t.path().join("run/train_log.csv"));
    let train_loss = |epoch: &str| -> f64 {
        rows.iter()
            .find(|r| &r[0] == epoch && &r[1] == "train")
            .map(|r| r[2].parse().unwrap())
            .unwrap()
    };
    assert!(train_loss("3") < train_loss("1"));
}

#[test]
fn same_seed_gives_identical_logs() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "c.json", MICRO);
    ok(t.path(), &["--config", "c.json", "--seed", "7", "--deterministic", "train", "--out", "a"]);
    ok(t.path(), &["--config", "c.json", "--seed", "7", "--deterministic", "train", "--out", "b"]);
    let a = fs::read(t.path().join("a/train_log.csv")).unwrap();
    let b = fs::read(t.path().join("b/train_log.csv")).unwrap();
    assert_eq!(a, b);
    let ma = fs::read(t.path().join("a/model.symw")).unwrap();
    let mb = fs::read(t.path().join("b/model.symw")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn zero_phase_one_epochs_start_in_phase_two() {
    let t = TempDir::new().unwrap();
    let cfg = MICRO.replace(r#""epochs_phase1": 3, "epochs_phase2": 0"#, r#""epochs_phase1": 0, "epochs_phase2": 1"#);
    write_config(t.path(), "c.json", &cfg);
    ok(t.path(), &["--config", "c.json", "train", "--out", "run"]);
    let rows = csv_rows(&t.path().join("run/train_log.csv"));
    let first = rows.iter().find(|r| &r[1] == "train").unwrap();
    assert_eq!(&first[0], "1");
    assert!(!first[3].is_empty(), "phase-2 rows carry a GTE value");
}

#[test]
fn unknown_config_key_is_rejected() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "c.json", r#"{"epochs": 3}"#);
    let out = run(t.path(), &["--config", "c.json", "gradcheck"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn eval_oracle_and_empty_split() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "c.json", r#"{"dataset": {"noise_sigma": 0.0, "test": 6}}"#);
    let s = ok(t.path(), &["--config", "c.json", "eval", "--gt-as-pred"]);
    assert_eq!(field(&s, "count"), 6.0);
    assert_eq!(field(&s, "gte_mean"), 0.0);
    assert!(field(&s, "sde_mean") < 1e-20, "{s}");
    assert_eq!(csv_rows(&t.path().join("metrics.csv")).len(), 6);

    write_config(t.path(), "e.json", r#"{"dataset": {"test": 0}}"#);
    let s = ok(t.path(), &["--config", "e.json", "eval", "--gt-as-pred", "--out", "e.csv"]);
    assert!(s.contains("count=0") && s.contains("no samples"), "{s}");
}

#[test]
fn eval_with_checkpoint_writes_rows() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "c.json", MICRO);
    ok(t.path(), &["--config", "c.json", "train", "--out", "run"]);
    let s = ok(
        t.path(),
        &["--config", "c.json", "eval", "--checkpoint", "run/model.symw", "--split", "val"],
    );
    assert_eq!(field(&s, "count"), 4.0);
    let rows = csv_rows(&t.path().join("metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[0].starts_with("val_")));
}

#[test]
fn data_dir_env_supplies_the_manifest() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "g.json", r#"{"dataset": {"train": 2, "val": 1, "test": 3}}"#);
    ok(t.path(), &["--config", "g.json", "gen-data", "--out", "ds", "--clouds"]);
    assert_eq!(csv_rows(&t.path().join("ds/manifest.csv")).len(), 6);
    assert!(t.path().join("ds/clouds/test_00002.xyz").exists());
    // The default config would give 100 test rows; the manifest wins.
    let out = bin()
        .current_dir(t.path())
        .env("SYMSLICE_DATA_DIR", t.path().join("ds"))
        .args(["eval", "--gt-as-pred"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(field(&String::from_utf8_lossy(&out.stdout), "count"), 3.0);
}

#[test]
fn estimate_prints_plane_and_writes_consistent_ply() {
    let t = TempDir::new().unwrap();
    write_config(t.path(), "c.json", MICRO);
    ok(t.path(), &["--config", "c.json", "train", "--out", "run"]);
    ok(t.path(), &["--config", "c.json", "gen-data", "--out", "ds", "--clouds"]);
    let s = ok(
        t.path(),
        &["estimate", "ds/clouds/test_00000.xyz", "--checkpoint", "run/model.symw", "--ply", "o.ply"],
    );
    assert!(s.starts_with("n=(") && s.contains("gte=? sde=?"), "{s}");
    let inner = s.trim_start_matches("n=(").split(')').next().unwrap();
    let n: Vec<f64> = inner.split(',').map(|v| v.parse().unwrap()).collect();
    let d = field(&s, "d");

    let ply = fs::read_to_string(t.path().join("o.ply")).unwrap();
    let body: Vec<&str> = ply.split("end_header\n").nth(1).unwrap().lines().collect();
    let face: Vec<usize> = body.last().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert!(face[0] >= 3 && face.len() == face[0] + 1);
    for &i in &face[1..] {
        let p: Vec<f64> = body[i].split_whitespace().map(|v| v.parse().unwrap()).collect();
        let r = n[0] * p[0] + n[1] * p[1] + n[2] * p[2] - d;
        assert!(r.abs() < 1e-9, "vertex {i} off plane by {r}");
    }

    let s = ok(
        t.path(),
        &["estimate", "ds/clouds/test_00000.xyz", "--checkpoint", "run/model.symw", "--gt", "1,0,0,0"],
    );
    assert!(!s.contains("gte=?"));
}

#[test]
fn estimate_missing_file_exits_two() {
    let t = TempDir::new().unwrap();
    let out = run(t.path(), &["estimate", "no_such_cloud.xyz", "--checkpoint", "m.symw"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_cloud.xyz"));
}

#[test]
fn refine_oracle_modes() {
    let t = TempDir::new().unwrap();
    let s = ok(
        t.path(),
        &["refine", "--simulate", "12", "--yaw-sigma-deg", "0", "--center-sigma", "0", "--oracle-planes", "--out", "zero"],
    );
    assert_eq!(field(&s, "mean_error_before_deg"), 0.0);
    assert_eq!(field(&s, "mean_error_after_deg"), 0.0);

    let s = ok(
        t.path(),
        &["refine", "--simulate", "30", "--oracle-planes", "--save-clouds", "--out", "noisy"],
    );
    assert!(field(&s, "mean_error_before_deg") > 1.0);
    assert!(field(&s, "mean_error_after_deg") < 1e-9);
    let report = csv_rows(&t.path().join("noisy/report.csv"));
    assert_eq!(report.len(), 30);

    // The same scene through the file-based path.
    let s = ok(
        t.path(),
        &[
            "refine",
            "--boxes",
            "noisy/detections.csv",
            "--clouds",
            "noisy/clouds",
            "--gt",
            "noisy/gt_boxes.csv",
            "--oracle-planes",
            "--no-translate",
            "--out",
            "files",
        ],
    );
    assert!(field(&s, "mean_error_after_deg") < 1e-9);
    let before = csv_rows(&t.path().join("noisy/detections.csv"));
    let after = csv_rows(&t.path().join("files/refined.csv"));
    for (b, a) in before.iter().zip(&after) {
        for c in 1..4 {
            assert_eq!(&b[c], &a[c], "--no-translate keeps centres");
        }
    }
}

#[test]
fn gradcheck_table() {
    let t = TempDir::new().unwrap();
    let s = ok(t.path(), &["gradcheck", "--out", "g.csv"]);
    let mut lines = s.lines();
    assert_eq!(lines.next(), Some("op,max_rel_err,tol,status,note"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.starts_with("micro_model,") && r.contains(",PASS,")));
    assert!(rows.iter().any(|r| r.contains(",SKIPPED,")));
    assert!(!rows.iter().any(|r| r.contains(",FAIL,")));
    assert_eq!(csv_rows(&t.path().join("g.csv")).len(), rows.len());
}
