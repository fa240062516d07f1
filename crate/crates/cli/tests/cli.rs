use std::path::Path;
use std::process::{Command, Output};

fn radmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radmamba"))
        .args(args)
        .env("RADMAMBA_THREADS", "1")
        .output()
        .expect("spawn radmamba")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for class in std::fs::read_dir(dir).unwrap() {
        let class = class.unwrap().path();
        if class.is_dir() {
            for f in std::fs::read_dir(&class).unwrap() {
                let f = f.unwrap().path();
                out.push((f.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&f).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_subcommand_has_help() {
    for cmd in ["synth", "train", "eval", "count", "flops", "corr", "ablate", "calibrate-dim"] {
        let o = radmamba(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help");
        assert!(stdout(&o).contains("Usage"));
    }
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = radmamba(&["synth", "--out", d.to_str().unwrap(), "--per-class", "5"]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("walk: 4 train, 1 test"));
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 20);
    assert_eq!(fa, files(&b));
    assert_eq!(
        std::fs::read(a.join("dataset.json")).unwrap(),
        std::fs::read(b.join("dataset.json")).unwrap()
    );
}

#[test]
fn errors_are_json_on_stderr() {
    let o = radmamba(&["count", "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().contains("unknown preset"));

    let o = radmamba(&["eval", "--checkpoint", "/nonexistent/model.ckpt", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "io");
}

#[test]
fn count_json_totals_match_rows() {
    let o = radmamba(&["count", "--preset", "uog20", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["report"]["rows"].as_array().unwrap();
    let sum: u64 = rows.iter().map(|r| r["params"].as_u64().unwrap()).sum();
    assert_eq!(sum, v["report"]["total_params"].as_u64().unwrap());
    assert_eq!(sum, 6258);
}

#[test]
fn dim_override_changes_the_count() {
    let o = radmamba(&["count", "--preset", "uog20", "--dim", "32"]);
    assert!(o.status.success());
    let total = stdout(&o)
        .lines()
        .find(|l| l.starts_with("total"))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<u64>().unwrap())
        .unwrap();
    assert!(total > 6258);
}

#[test]
fn calibrate_dim_reports_nearest() {
    let o = radmamba(&["calibrate-dim", "--preset", "ci4r", "--target-params", "71400"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["dim"], 80);
    assert_eq!(v["params"], 70663);
}
