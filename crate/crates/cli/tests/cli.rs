use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rnamf::dataset::MultiFidelityDataset;
use rnamf::emulator::RnaEmulator;
use rnamf::{FitOptions, KernelKind};

fn rnamf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnamf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small two-level Perdikaris dataset in `dir`.
fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data.json");
    let o = rnamf(&["design", "--problem", "perdikaris", "--sizes", "10,5", "--seed", "4", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

fn light_config(dir: &Path, budget: f64, strategy: &str) -> PathBuf {
    let cfg = dir.join(format!("cfg-{strategy}-{budget}.json"));
    let body = serde_json::json!({
        "strategy": strategy,
        "budget": budget,
        "n_test": 0,
        "fit": { "restarts": 2 },
        "optimizer": { "starts": 3, "refine": 1, "grid_per_dim": 11, "max_iters": 8 },
        "alc": { "integration_points": 50, "imputations": 5 }
    });
    fs::write(&cfg, body.to_string()).unwrap();
    cfg
}

fn read_dataset(path: &Path) -> MultiFidelityDataset {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let model = dir.path().join("model.json");
    let out = dir.path().join("pred.csv");
    assert_eq!(code(&rnamf(&["fit", "--data", p(&data), "--out", p(&model), "--report", p(&dir.path().join("r.json"))])), 0);
    let o = rnamf(&["predict", "--model", p(&model), "--data", p(&data), "--grid", "9", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let ds = read_dataset(&data);
    let em = RnaEmulator::fit(&ds, KernelKind::SqExp, &FitOptions::default()).unwrap();
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let headers: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(headers, ["x1", "mean", "var", "V1", "V2", "extrapolated"]);
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let x: f64 = rec[0].parse().unwrap();
        let want = em.predict_with_decomposition(&[x]).unwrap();
        let mean: f64 = rec[1].parse().unwrap();
        let var: f64 = rec[2].parse().unwrap();
        assert!((mean - want.mean).abs() <= 1e-12 * want.mean.abs().max(1.0), "{x}: {mean} vs {}", want.mean);
        assert!((var - want.var).abs() <= 1e-12 * want.var.abs().max(1e-12), "{x}: {var} vs {}", want.var);
        let v1: f64 = rec[3].parse().unwrap();
        let v2: f64 = rec[4].parse().unwrap();
        assert!((v1 + v2 - var).abs() <= 1e-8 * var.max(1e-300));
        n += 1;
    }
    assert_eq!(n, 9);
}

#[test]
fn refitting_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for m in [&a, &b] {
        let o = rnamf(&["fit", "--data", p(&data), "--out", p(m), "--report", p(&dir.path().join("r.json"))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn model_is_stale_after_the_data_change() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let model = dir.path().join("model.json");
    assert_eq!(code(&rnamf(&["fit", "--data", p(&data), "--out", p(&model), "--report", p(&dir.path().join("r.json"))])), 0);
    let mut ds = read_dataset(&data);
    ds.outputs[1][0] += 1.0;
    fs::write(&data, serde_json::to_string(&ds).unwrap()).unwrap();
    let out = dir.path().join("pred.csv");
    let o = rnamf(&["predict", "--model", p(&model), "--data", p(&data), "--grid", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stale_model"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn empty_points_file_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let model = dir.path().join("model.json");
    assert_eq!(code(&rnamf(&["fit", "--data", p(&data), "--out", p(&model), "--report", p(&dir.path().join("r.json"))])), 0);
    let pts = dir.path().join("pts.json");
    fs::write(&pts, "[]").unwrap();
    let out = dir.path().join("pred.csv");
    let o = rnamf(&["predict", "--model", p(&model), "--data", p(&data), "--points", p(&pts), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().trim_end(), "x1,mean,var,V1,V2,extrapolated");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    assert_eq!(code(&rnamf(&["frobnicate"])), 1);
    assert_eq!(code(&rnamf(&["--help"])), 0);
    assert_eq!(code(&rnamf(&["validate", "--data", p(&dir.path().join("missing.json"))])), 2);

    let mut ds = read_dataset(&data);
    ds.designs[1][0][0] = 0.123_456_7;
    let broken = dir.path().join("broken.json");
    fs::write(&broken, serde_json::to_string(&ds).unwrap()).unwrap();
    let o = rnamf(&["validate", "--data", p(&broken)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"valid\": false"));
    assert_eq!(code(&rnamf(&["validate", "--data", p(&data)])), 0);

    let cfg = dir.path().join("bad-cfg.json");
    fs::write(&cfg, r#"{"budgett": 3}"#).unwrap();
    let o = rnamf(&["al", "--data", p(&data), "--config", p(&cfg), "--builtin", "perdikaris", "--trace", "t.csv", "--out", "o.json"]);
    assert_eq!(code(&o), 2, "unknown config keys are rejected: {}", stderr(&o));
}

fn adapter_script(dir: &Path) -> (PathBuf, PathBuf) {
    let script = dir.join("perdikaris.py");
    let calls = dir.join("calls.log");
    let body = format!(
        r#"import json, math, sys
req = json.loads(sys.stdin.readline())
x = req["x"][0]
f1 = math.sin(8 * math.pi * x)
y = f1 if req["level"] == 1 else (x - math.sqrt(2)) * f1 * f1
with open({calls:?}, "a") as fh:
    fh.write("call\n")
print(json.dumps({{"y": y}}))
"#,
        calls = calls.to_str().unwrap()
    );
    fs::write(&script, body).unwrap();
    (script, calls)
}

fn python_available() -> bool {
    Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn external_adapter_matches_builtin_and_cache_is_reused() {
    if !python_available() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = light_config(dir.path(), 5.0, "alm");
    let (script, calls) = adapter_script(dir.path());
    let adapter = format!("python3 {}", script.display());

    let (tb, ob) = (dir.path().join("builtin.csv"), dir.path().join("builtin.json"));
    let o = rnamf(&["al", "--data", p(&data), "--config", p(&cfg), "--builtin", "perdikaris", "--trace", p(&tb), "--out", p(&ob)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ta, oa) = (dir.path().join("adapter.csv"), dir.path().join("adapter.json"));
    let o = rnamf(&["al", "--data", p(&data), "--config", p(&cfg), "--adapter", &adapter, "--trace", p(&ta), "--out", p(&oa)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&tb).unwrap(), fs::read(&ta).unwrap());
    assert_eq!(fs::read(&ob).unwrap(), fs::read(&oa).unwrap());
    let first = fs::read_to_string(&calls).unwrap().lines().count();
    assert!(first >= 5, "{first} adapter calls");

    // Same run again: every evaluation comes from the cache.
    let o = rnamf(&["al", "--data", p(&data), "--config", p(&cfg), "--adapter", &adapter, "--trace", p(&ta), "--out", p(&oa)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&calls).unwrap().lines().count(), first);
    assert_eq!(fs::read(&tb).unwrap(), fs::read(&ta).unwrap());
}

#[test]
fn adapter_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = |cfg: &Path, adapter: &str, tag: &str| {
        let trace = dir.path().join(format!("{tag}.csv"));
        rnamf(&["al", "--data", p(&data), "--config", p(cfg), "--adapter", adapter, "--trace", p(&trace), "--out", p(&dir.path().join(format!("{tag}.json")))])
    };
    let cfg = light_config(dir.path(), 3.0, "ald");

    let o = run(&cfg, "echo hello", "garbage");
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("adapter"), "{}", stderr(&o));

    let o = run(&cfg, "false", "nonzero");
    assert_eq!(code(&o), 3);

    let slow = dir.path().join("slow.json");
    fs::write(&slow, r#"{"strategy": "ald", "budget": 3, "timeout_secs": 0.3, "optimizer": {"starts": 3, "refine": 1, "grid_per_dim": 11, "max_iters": 8}}"#).unwrap();
    let t = std::time::Instant::now();
    let o = run(&slow, "sleep 5", "slow");
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("timed out"), "{}", stderr(&o));
    assert!(t.elapsed().as_secs_f64() < 4.5);

    // The partial trace and dataset are still written.
    let trace = fs::read_to_string(dir.path().join("slow.csv")).unwrap();
    assert!(trace.starts_with("step,strategy,level,x1,imputed,y1,y2,criterion,cost,rmse,crps"));
    assert_eq!(read_dataset(&dir.path().join("slow.json")), read_dataset(&data));
}

#[test]
fn zero_budget_acquires_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = light_config(dir.path(), 0.0, "almc");
    let (trace, out) = (dir.path().join("t.csv"), dir.path().join("o.json"));
    let o = rnamf(&["al", "--data", p(&data), "--config", p(&cfg), "--builtin", "perdikaris", "--trace", p(&trace), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 1);
    assert_eq!(read_dataset(&out), read_dataset(&data));
}

#[test]
fn builtin_run_keeps_budget_and_nesting() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = light_config(dir.path(), 10.0, "ald");
    let (trace, out) = (dir.path().join("t.csv"), dir.path().join("o.json"));
    let o = rnamf(&["al", "--data", p(&data), "--config", p(&cfg), "--builtin", "perdikaris", "--trace", p(&trace), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(&trace).unwrap();
    let costs: Vec<f64> = reader.records().map(|r| r.unwrap()[8].parse().unwrap()).collect();
    assert!(!costs.is_empty());
    assert!(costs.windows(2).all(|w| w[0] < w[1]));
    assert!(*costs.last().unwrap() <= 10.0);
    assert!(10.0 - costs.last().unwrap() < 1.0, "stopped early at {costs:?}");
    assert_eq!(code(&rnamf(&["validate", "--data", p(&out)])), 0);
}

#[test]
fn benchmark_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.json");
    fs::write(
        &cfg,
        r#"{"problem": "perdikaris", "reps": 2, "n_test": 50, "mode": "al", "strategy": "alm", "budget": 4,
            "al": {"fit": {"restarts": 2}, "optimizer": {"starts": 3, "refine": 1, "grid_per_dim": 11, "max_iters": 8}}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = rnamf(&["benchmark", "--config", p(&cfg), "--out-dir", p(&out), "--jobs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["results.csv", "curves.csv", "summary.json", "rmse_vs_cost.svg", "crps_vs_cost.svg"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let svg = fs::read_to_string(out.join("rmse_vs_cost.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}
