use std::fs;
use std::path::Path;
use std::process::Command;

use noether_core::bounds::closed_form_m0;
use noether_core::cli::{run_with_args, CliError};

fn run<S: AsRef<str>>(args: &[S]) -> Result<String, CliError> {
    let mut log = Vec::new();
    let full = std::iter::once("noether").chain(args.iter().map(|a| a.as_ref()));
    run_with_args(full, &mut log).map(|_| String::from_utf8(log).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gen_data_is_reproducible_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&["--system", "ideal-spring", "--seed", "7", "gen-data", "--out", p(out)]).unwrap();
    }
    for f in ["train.csv", "test.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_trajectories"], 25);
    assert_eq!(manifest["config"]["pipeline"]["data"]["train_trajectories"], 25);
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config"]["pipeline"]["seed"], 7);

    let report = run(&["--system", "ideal-spring", "verify", "--data", p(&a)]).unwrap();
    assert!(report.contains("\"failures\": []"), "{report}");
}

#[test]
fn verify_flags_energy_drift() {
    let dir = tempfile::tempdir().unwrap();
    run(&["--system", "ideal-pendulum", "gen-data", "--out", p(dir.path())]).unwrap();
    let path = dir.path().join("train.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    // push the momentum of one state off the energy shell
    let mut cols: Vec<String> = lines[5].split(',').map(str::to_string).collect();
    cols[2] = (cols[2].parse::<f64>().unwrap() + 0.5).to_string();
    lines[5] = cols.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = run(&["--system", "ideal-pendulum", "verify", "--data", p(dir.path())]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn bound_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    run(&["bound", "--var", "m", "--values", "0,1,2,3", "--d", "3", "--n", "100", "--out", p(&out)]).unwrap();
    let rows = csv_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 4);
    let conserved: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(conserved.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(conserved[0], closed_form_m0(1.0, 0.05, 100));
    let gaps: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(gaps.iter().all(|&g| g >= 0.0) && gaps[3] == 0.0);
    assert!(dir.path().join("m.csv.meta.json").exists());

    let single = run(&["bound", "--var", "n", "--values", "50"]).unwrap();
    assert_eq!(single.lines().count(), 2);

    // R = 0 breaks the logarithm for every ξ ≥ 1 row
    let err = run(&["bound", "--var", "r", "--values", "0"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = run(&["bound", "--var", "bogus", "--values", "1"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn discover_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--system", "ideal-pendulum", "--hidden", "8", "--baseline-epochs", "10"];
    let mut args = common.to_vec();
    args.extend(["discover", "--out", p(dir.path()), "--max-depth", "3", "--metatailor-epochs", "2"]);
    let first = run(&args).unwrap();
    let result = fs::read_to_string(dir.path().join("discovery.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&result).unwrap();
    assert_eq!(v["config"]["max_depth"], 3);
    assert!(v["counts"]["enumerated"].as_u64().unwrap() < 100);
    assert!(dir.path().join("screen.csv.meta.json").exists());

    args.push("--resume");
    let second = run(&args).unwrap();
    assert_eq!(first, second);
    assert_eq!(result, fs::read_to_string(dir.path().join("discovery.json")).unwrap());
}

#[test]
fn train_noether_eval_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["--system", "ideal-spring", "gen-data", "--out", p(&data)]).unwrap();
    let base = dir.path().join("base.json");
    let small = ["--system", "ideal-spring", "--hidden", "8", "--baseline-epochs", "20"];
    let with = |extra: &[&str]| -> Vec<String> { small.iter().chain(extra).map(|s| s.to_string()).collect() };
    run(&with(&["train-baseline", "--data", p(&data), "--out", p(&base)])).unwrap();

    // λ_in = 0: tailored and untailored validation curves coincide
    let zero = dir.path().join("zero");
    run(&with(&[
        "--inner-lr", "0", "train-noether", "--data", p(&data), "--baseline", p(&base), "--epochs", "3", "--out", p(&zero),
    ]))
    .unwrap();
    let rows = csv_rows(&fs::read_to_string(zero.join("history.csv")).unwrap());
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[2] == r[3]));

    let nn = dir.path().join("nn");
    run(&with(&["train-noether", "--data", p(&data), "--baseline", p(&base), "--epochs", "2", "--out", p(&nn)])).unwrap();
    let ck = nn.join("checkpoint.json");
    let metrics = dir.path().join("eval.json");
    run(&with(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&metrics)])).unwrap();
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let curve: Vec<f64> = m["untailored"]["rmse_per_step"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(curve.len(), 10);
    assert!(curve[0] <= curve[9]);
    assert!(m["tailored"]["rmse"].is_number());
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));

    let probe = dir.path().join("probe.csv");
    run(&with(&["probe-inner-steps", "--checkpoint", p(&ck), "--data", p(&data), "--steps", "5", "--out", p(&probe)])).unwrap();
    assert_eq!(csv_rows(&fs::read_to_string(&probe).unwrap()).len(), 6);

    // empty test split
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::copy(data.join("train.csv"), empty.join("train.csv")).unwrap();
    fs::write(empty.join("test.csv"), "t,q,p\n").unwrap();
    let err = run(&with(&["eval", "--checkpoint", p(&ck), "--data", p(&empty)])).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("empty"));

    // incompatible checkpoint version
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
    v["version"] = serde_json::json!(42);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    assert!(run(&with(&["eval", "--checkpoint", p(&bad), "--data", p(&data)])).is_err());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"system": "ideal-pendulum", "pipeline": {"seed": 3, "data": {"train_trajectories": 2, "test_trajectories": 1}}}"#).unwrap();
    let out = dir.path().join("d");
    run(&["--config", p(&cfg), "--seed", "5", "gen-data", "--out", p(&out)]).unwrap();
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["train_trajectories"], 2);
    assert_eq!(m["config"]["system"], "ideal-pendulum");
    assert_eq!(m["seed"], 5);

    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(run(&["--config", p(&cfg), "gen-data", "--out", p(&out)]).unwrap_err().exit_code(), 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_noether");
    let ok = Command::new(bin).args(["bound", "--var", "m", "--values", "0"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("m,conserved"));
    let domain = Command::new(bin).args(["bound", "--var", "r", "--values", "0"]).output().unwrap();
    assert_eq!(domain.status.code(), Some(1));
    let io = Command::new(bin).args(["verify", "--data", "/nonexistent/dir.csv"]).output().unwrap();
    assert_eq!(io.status.code(), Some(2));
    let usage = Command::new(bin).args(["no-such-command"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}
