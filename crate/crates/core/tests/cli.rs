use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MINIMAL: &str = r#"
[problem]
loss = "least-squares"
workers = 2
d = 3
per_worker = 10

[topology]
kind = "complete"

[algorithm]
id = "dproxsgt"

[run]
iters = 10
"#;

const STOCHASTIC: &str = r#"
[problem]
loss = "least-squares"
workers = 4
d = 5
per_worker = 20
seed = 3

[topology]
kind = "ring"

[algorithm]
id = "cdproxsgt"
batch = 2
compressor = { kind = "randk", ratio = 0.4 }

[run]
iters = 30
cadence = 5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dproxsgt"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn exec(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csvs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn run_writes_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "minimal.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = exec(bin().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).args(["--set", "algorithm.eta=0.05"]));
    assert!(o.status.success(), "{}", stderr(&o));

    let files = csvs(&out);
    assert_eq!(files.len(), 1);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 12, "header plus t = 0..=10");
    assert!(lines[0].starts_with("t,"));

    let meta = std::fs::read_to_string(out.join("dproxsgt_seed0.meta")).unwrap();
    assert!(meta.lines().any(|l| l == "eta=5e-2"), "{meta}");
    assert!(meta.lines().any(|l| l.starts_with("problem_fingerprint=")));
}

#[test]
fn seeds_give_distinct_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "stoch.toml", STOCHASTIC);
    let out = dir.path().join("out");
    let o = exec(bin().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).args(["--seeds", "1,2,3"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let files = csvs(&out);
    assert_eq!(files.len(), 3);
    let texts: Vec<String> = files.iter().map(|f| std::fs::read_to_string(f).unwrap()).collect();
    let header = |t: &String| t.lines().next().unwrap().to_string();
    assert!(texts.iter().all(|t| header(t) == header(&texts[0])));
    assert_ne!(texts[0], texts[1]);
    assert_ne!(texts[1], texts[2]);
}

#[test]
fn invalid_config_names_the_key_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "minimal.toml", MINIMAL);
    let out = dir.path().join("never");
    let o = exec(bin().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).args(["--set", "algorithm.eta=-1"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("algorithm.eta"), "{}", stderr(&o));
    assert!(!out.exists());

    let typo = write(dir.path(), "typo.toml", &MINIMAL.replace("per_worker", "per_wroker"));
    let o = exec(bin().args(["run", "--config"]).arg(&typo).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("per_wroker"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn compare_refuses_mismatched_problems() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", MINIMAL);
    let b = write(dir.path(), "b.toml", &MINIMAL.replace("per_worker = 10", "per_worker = 11"));
    let out = dir.path().join("cmp");
    let o = exec(bin().args(["compare", "--config"]).arg(&a).arg("--config").arg(&b).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("refusing to compare"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn compare_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", MINIMAL);
    let out = dir.path().join("cmp");
    let o = exec(
        bin().args(["compare", "--config"]).arg(&a).args(["--algorithms", "dproxsgt,dproxsgd-baseline", "--svg"]).arg("--out").arg(&out),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.contains("dproxsgd-baseline"));
    assert!(out.join("stationarity_vs_bits.svg").exists());
}

#[test]
fn certify_passes_and_rejects_bad_matrix() {
    let o = exec(bin().args(["certify", "--trials", "1000"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);

    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.txt", "0.45 0.45\n0.45 0.45\n");
    let o = exec(bin().args(["certify", "--trials", "1000", "--matrix"]).arg(&bad));
    assert!(!o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let last = report["checks"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["passed"], false);
    assert!((last["detail"]["max_deviation"].as_f64().unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn serial_and_parallel_outputs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "stoch.toml", STOCHASTIC);
    let go = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let o = exec(bin().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).args(["--seeds", "4,5"]).args(extra));
        assert!(o.status.success(), "{}", stderr(&o));
        csvs(&out).iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let serial = go("s", &[]);
    assert_eq!(serial.len(), 2);
    assert_eq!(serial, go("p", &["--parallel"]));
    assert_eq!(serial, go("s2", &["--svg"]));
}
