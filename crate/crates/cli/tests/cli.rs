use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"k": 16, "p": 8, "m": 4},
  "train": {"epochs": 2, "batch_size": 8, "view_points": 64, "checkpoint_every": 4}
}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointsmile"))
        .args(args)
        .env_remove("POINTSMILE_THREADS")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, classes: &str, per_class: &str, points: &str) -> Output {
    bin(&["gen-data", "--classes", classes, "--per-class", per_class, "--points", points, "--out", p(dir)])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file under `dir` with its path relative to `dir`.
fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                v.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn gen_data_counts_files_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, "6", "3", "64").status.success());
    assert!(gen(&b, "6", "3", "64").status.success());
    let snap = dir_snapshot(&a);
    assert_eq!(snap.iter().filter(|(n, _)| n.ends_with(".xyz")).count(), 18);
    assert!(snap.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(snap, dir_snapshot(&b));
}

#[test]
fn gen_data_rejects_a_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gen(tmp.path(), "1", "3", "64");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pretrain_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "4", "8", "96").status.success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let o = bin(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["loss"]["tau1"], 0.5);
    assert_eq!(resolved["model"]["k"], 16);

    let ck = run.join("final.psml");
    let csv = tmp.path().join("features.csv");
    let args = ["eval", "--checkpoint", p(&ck), "--data", p(&data), "--seed", "1"];
    let first = bin(&[&args[..], &["--export", p(&csv)]].concat());
    assert!(first.status.success(), "{}", stderr(&first));
    let json: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let acc = json["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(json["probe"], "linear");
    assert_eq!(first.stdout, bin(&args).stdout);
    let header = fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("label,f0,"));
    assert_eq!(header.lines().count(), 1 + 32);

    for probe in ["hinge", "knn"] {
        let o = bin(&[&args[..], &["--probe", probe]].concat());
        assert!(o.status.success(), "{probe}: {}", stderr(&o));
    }

    let resumed = tmp.path().join("resumed");
    let o = bin(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&resumed)]);
    assert!(o.status.success());
    assert_eq!(fs::read(&ck).unwrap(), fs::read(resumed.join("final.psml")).unwrap());
}

#[test]
fn empty_config_resolves_every_default() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "2", "16", "64").status.success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    let run = tmp.path().join("run");
    let o = bin(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    for section in ["data", "augment", "model", "loss", "train", "eval"] {
        assert!(resolved[section].is_object(), "{section}");
    }
    assert_eq!(resolved["train"]["batch_size"], 16);
    assert_eq!(resolved["train"]["momentum"], 0.9);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "2", "16", "64").status.success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"loss": {"taul": 0.3}}"#).unwrap();
    let o = bin(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("taul") && msg.contains("loss"), "{msg}");
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["eval", "--checkpoint", p(&tmp.path().join("none.psml")), "--data", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augment_is_reproducible_and_checks_hard_size() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "2", "1", "80").status.success());
    let input = data.join("clouds").join("cube_0000.xyz");
    let (a, b) = (tmp.path().join("a.xyz"), tmp.path().join("b.xyz"));
    for family in ["easy", "hard"] {
        for out in [&a, &b] {
            let o = bin(&["augment", "--in", p(&input), "--family", family, "--seed", "7", "--out", p(out)]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    let text = fs::read_to_string(&input).unwrap();
    let small = tmp.path().join("small.xyz");
    fs::write(&small, text.lines().take(32).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let o = bin(&["augment", "--in", p(&small), "--family", "hard", "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = bin(&["augment", "--in", p(&small), "--family", "easy", "--out", p(&a)]);
    assert!(o.status.success());
}

#[test]
fn gradcheck_passes() {
    let o = bin(&["gradcheck", "--trials", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().count() >= 30);
    assert!(!out.contains("FAIL"));
    assert_eq!(bin(&["gradcheck", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn help_lists_flags_and_defaults() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen-data", &["--classes", "--per-class", "--points", "--seed", "--out", "default: 100"]),
        ("pretrain", &["--config", "--data", "--out", "--resume"]),
        ("eval", &["--checkpoint", "--data", "--probe", "--seed", "default: linear"]),
        ("augment", &["--in", "--family", "--seed", "--out", "default: easy"]),
        ("gradcheck", &["--trials", "default: 20"]),
    ];
    for (cmd, flags) in cases {
        let o = bin(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
    }
}

#[test]
fn threads_flag_is_checked() {
    assert_eq!(bin(&["--threads", "0", "gradcheck", "--trials", "1"]).status.code(), Some(2));
    assert!(bin(&["--threads", "1", "gradcheck", "--trials", "1"]).status.success());
}
