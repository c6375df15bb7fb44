use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedstack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedstack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 11
methods = ["kmeans", "agglomerative", "gmm"]

[dataset]
source = "synthetic"
dim = 4

[counts]
source = "uniform"
clients = 4
per_label = 12
num_labels = 3

[clients]
architectures = [[8, 4], [6, 4]]
epochs = 5

[meta]
epochs = 5

[selection]
k_max = 3
restarts = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn schedule_prints_one_row_per_epoch() {
    let o = fedstack(&["schedule", "--epochs", "9", "--base-lr", "0.1", "--max-lr", "0.5", "--step-size", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr");
    assert_eq!(lines.len(), 10);
    let lr = |i: usize| lines[i + 1].split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!((lr(0) - 0.1).abs() < 1e-12);
    assert!((lr(2) - 0.5).abs() < 1e-12);
    assert!((lr(4) - 0.1).abs() < 1e-12);
    assert!((lr(6) - 0.3).abs() < 1e-12);
}

#[test]
fn bad_schedule_exits_with_config_code() {
    let o = fedstack(&["schedule", "--base-lr", "0.5", "--max-lr", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{SMALL}\nbogus = 1\n"));
    let o = fedstack(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
}

#[test]
fn missing_csv_dataset_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        "source = \"synthetic\"\ndim = 4",
        "source = \"csv\"\npath = \"/nonexistent/data.csv\"\nlabel_column = \"label\"",
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let o = fedstack(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_then_recluster_reproduces_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("run");
    let o = fedstack(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--k", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "weights.csv", "distance_matrix.csv", "bic_curve.csv", "metrics.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let weights = out.join("weights.csv");
    let again = dir.path().join("again");
    let o = fedstack(&[
        "cluster",
        "--weights",
        weights.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "11",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["kmeans", "agglomerative", "gmm"] {
        let name = format!("assignments_{m}.csv");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap(), "{m}");
    }
    assert_eq!(
        fs::read(out.join("distance_matrix.csv")).unwrap(),
        fs::read(again.join("distance_matrix.csv")).unwrap()
    );

    let o = fedstack(&["select-k", "--weights", weights.to_str().unwrap(), "--k-max", "3", "--restarts", "2", "--seed", "11"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), fs::read_to_string(out.join("bic_curve.csv")).unwrap());
}
