use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmrm::cli::{EPOCHS_FILE, MARGINS_FILE, MODEL_FILE, REPORT_FILE, SWEEP_FILE};
use tempfile::TempDir;

const BASE: &str = r#"
seed = 5

[data.synth]
num_classes = 3
dim = 4
per_class_count = 60
class_separation = 2.5

[noise]
kind = "symmetric"
rate = 0.2

[model]
architecture = "linear"

[train]
epochs = 4
batch_size = 32
"#;

fn cmrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmrm"))
        .args(args)
        .output()
        .expect("binary should start")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let out = dir.path().join("out");
    let o = cmrm(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [EPOCHS_FILE, MODEL_FILE, REPORT_FILE, MARGINS_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let epochs = fs::read_to_string(out.join(EPOCHS_FILE)).unwrap();
    assert_eq!(epochs.lines().count(), 5);
    assert!(!epochs.contains('\r'));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["num_classes"], 3);
    assert!(report["test"]["accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn rerun_is_byte_identical_and_seed_flag_changes_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        &format!("{BASE}\n[cmrm]\nkind = \"multiclass\"\n"),
    );
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for d in [&a, &b] {
        assert_eq!(
            cmrm(&["train", "--config", s(&cfg), "--out", s(d)])
                .status
                .code(),
            Some(0)
        );
    }
    assert_eq!(
        cmrm(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "6"])
            .status
            .code(),
        Some(0)
    );
    for f in [EPOCHS_FILE, MODEL_FILE, REPORT_FILE, MARGINS_FILE] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join(MODEL_FILE)).unwrap(),
        fs::read(c.join(MODEL_FILE)).unwrap()
    );
}

#[test]
fn zero_lambda_matches_plain_training() {
    let dir = TempDir::new().unwrap();
    let plain = write(dir.path(), "plain.toml", BASE);
    let zero = write(
        dir.path(),
        "zero.toml",
        &format!("{BASE}\n[cmrm]\nkind = \"multiclass\"\nlambda = 0.0\n"),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmrm(&["train", "--config", s(&plain), "--out", s(&a)]);
    cmrm(&["train", "--config", s(&zero), "--out", s(&b)]);
    assert_eq!(
        fs::read(a.join(MODEL_FILE)).unwrap(),
        fs::read(b.join(MODEL_FILE)).unwrap()
    );
    let report = |d: &Path| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(REPORT_FILE)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("config");
        v
    };
    assert_eq!(report(&a), report(&b));
}

#[test]
fn missing_csv_is_an_input_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "csv.toml",
        "[data.csv]\npath = \"/nonexistent/adult.csv\"\n",
    );
    let o = cmrm(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/adult.csv"));
}

#[test]
fn bad_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &BASE.replace("epochs = 4", "epochs = \"four\""),
    );
    let o = cmrm(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochs"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(cmrm(&["verify", "nonsense"]).status.code(), Some(64));
    assert_eq!(cmrm(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(cmrm(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_bruteforce_passes_and_writes_json() {
    let dir = TempDir::new().unwrap();
    let o = cmrm(&["verify", "bruteforce", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("verify_bruteforce.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(v["passed"], true);
    let o = cmrm(&["verify", "quantile", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("verify_quantile.csv").is_file());
}

fn labelled_csv(dir: &Path, n: usize, k: usize) -> PathBuf {
    let mut text = String::from("x1,label,x2\n");
    for i in 0..n {
        text.push_str(&format!("{}.5,{},{}\n", i, i % k, n - i));
    }
    write(dir, "in.csv", &text)
}

fn labels(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect()
}

#[test]
fn inject_noise_rewrites_labels_only() {
    let dir = TempDir::new().unwrap();
    let input = labelled_csv(dir.path(), 50, 4);
    let out = dir.path().join("noisy.csv");
    let o = cmrm(&[
        "inject-noise",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--kind",
        "symmetric",
        "--rate",
        "0.3",
        "--seed",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));

    let mask = fs::read_to_string(out.with_file_name("noisy.mask.csv")).unwrap();
    assert_eq!(mask.lines().count() - 1, cmrm::noise::flip_count(0.3, 50));
    let before = fs::read_to_string(&input).unwrap();
    let after = fs::read_to_string(&out).unwrap();
    let strip = |t: &str| -> Vec<String> {
        t.lines()
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                format!("{},{}", c[0], c[2])
            })
            .collect()
    };
    assert_eq!(strip(&before), strip(&after));
    let changed = labels(&input)
        .iter()
        .zip(labels(&out))
        .filter(|(a, b)| **a != *b)
        .count();
    assert_eq!(changed, mask.lines().count() - 1);
}

#[test]
fn inject_noise_rate_zero_is_identity() {
    let dir = TempDir::new().unwrap();
    let input = labelled_csv(dir.path(), 20, 3);
    let out = dir.path().join("same.csv");
    cmrm(&[
        "inject-noise",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--kind",
        "circular",
        "--rate",
        "0",
    ]);
    assert_eq!(fs::read(&input).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn circular_binary_flip_twice_restores_labels() {
    let dir = TempDir::new().unwrap();
    let input = labelled_csv(dir.path(), 30, 2);
    let once = dir.path().join("once.csv");
    let twice = dir.path().join("twice.csv");
    cmrm(&[
        "inject-noise",
        "--input",
        s(&input),
        "--output",
        s(&once),
        "--kind",
        "circular",
        "--rate",
        "1",
    ]);
    cmrm(&[
        "inject-noise",
        "--input",
        s(&once),
        "--output",
        s(&twice),
        "--kind",
        "circular",
        "--rate",
        "1",
    ]);
    assert!(labels(&input)
        .iter()
        .zip(labels(&once))
        .all(|(a, b)| *a != b));
    assert_eq!(fs::read(&input).unwrap(), fs::read(&twice).unwrap());
}

#[test]
fn inject_noise_reports_bad_label_row() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "bad.csv", "x,label\n1,0\n2,cat\n");
    let o = cmrm(&[
        "inject-noise",
        "--input",
        s(&input),
        "--output",
        s(&dir.path().join("o.csv")),
        "--kind",
        "symmetric",
        "--rate",
        "0.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 3") && err.contains("label"), "{err}");
}

const SWEEP: &str = r#"
[sweep]
lambdas = [0.05, 0.2]
alphas = [0.1, 0.2]
seeds = [0, 1]
"#;

#[test]
fn sweep_writes_grid_rows_and_best() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        &format!("{BASE}\n[cmrm]\nkind = \"multiclass\"\n{SWEEP}"),
    );
    let out = dir.path().join("sweep");
    let o = cmrm(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--workers",
        "3",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = fs::read_to_string(out.join(SWEEP_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines.iter().filter(|l| l.starts_with("run,")).count(), 8);
    assert!(lines[9].starts_with("best,"));
    assert!(lines[1].starts_with("run,0.05,0.1,0,"));
    assert!(lines[8].starts_with("run,0.2,0.2,1,"));
}

#[test]
fn single_point_sweep_equals_train() {
    let dir = TempDir::new().unwrap();
    let point = format!("{BASE}\n[cmrm]\nkind = \"multiclass\"\nlambda = 0.2\nalpha = 0.1\n");
    let cfg = write(dir.path(), "t.toml", &point);
    let sw = write(
        dir.path(),
        "s.toml",
        &format!("{point}\n[sweep]\nlambdas = [0.2]\nalphas = [0.1]\nseeds = [5]\n"),
    );
    let (t, w) = (dir.path().join("t"), dir.path().join("w"));
    cmrm(&["train", "--config", s(&cfg), "--out", s(&t)]);
    cmrm(&["sweep", "--config", s(&sw), "--out", s(&w)]);
    let run = w.join("l0_a0_s5");
    for f in [EPOCHS_FILE, MODEL_FILE] {
        assert_eq!(
            fs::read(t.join(f)).unwrap(),
            fs::read(run.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gce_preset_scales_lambdas() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{}\n[cmrm]\nkind = \"multiclass\"\n[sweep]\nlambdas = [0.5]\nalphas = [0.1]\npreset = \"gce\"\n",
        BASE.replace("epochs = 4", "epochs = 2\nbase_loss = \"gce\"")
    );
    let cfg = write(dir.path(), "g.toml", &text);
    let out = dir.path().join("g");
    assert_eq!(
        cmrm(&["sweep", "--config", s(&cfg), "--out", s(&out)])
            .status
            .code(),
        Some(0)
    );
    let text = fs::read_to_string(out.join(SWEEP_FILE)).unwrap();
    assert!(
        text.lines().nth(1).unwrap().starts_with("run,0.05,0.1,"),
        "{text}"
    );
}
