use std::path::Path;
use std::process::{Command, Output};

use gpmpc::sim::ScenarioConfig;

fn gpmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpmpc")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ScenarioConfig::reference();
    cfg.samples_per_step = 10;
    cfg.training_samples = 600;
    cfg.max_steps = 20;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gpmpc(&["gen-data", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ca = std::fs::read(a.join("training.csv")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("training.csv")).unwrap());
    let text = String::from_utf8(ca).unwrap();
    assert!(text.starts_with("ego_pos,ego_vel,lead_pos,lead_vel,delay,step_tag"));
    assert_eq!(text.lines().count(), 601);

    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["training_samples"], 600);

    let c = dir.path().join("c");
    let o = gpmpc(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--data-seed", "77"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(std::fs::read(c.join("training.csv")).unwrap(), std::fs::read(a.join("training.csv")).unwrap());
    assert_eq!(json(&c.join("manifest.json"))["seed_overrides"]["data"], 77);
}

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::reference();
    cfg.training_samples = cfg.samples_per_step * (cfg.controller.horizon + 1) - 1;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = gpmpc(&["gen-data", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("samples_per_step * (horizon + 1)"));

    std::fs::write(&path, "{ not json").unwrap();
    let o = gpmpc(&["gen-data", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let mut cfg = ScenarioConfig::reference();
    cfg.controller.bounds.u_min = 1.0;
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = gpmpc(&["gen-data", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(gpmpc(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.code(), Some(0));
    let csv = data.join("training.csv");

    let run = dir.path().join("run");
    let o = gpmpc(&["run", "--config", s(&cfg), "--data", s(&csv), "--out", s(&run), "--svg"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&run.join("summary.json"));
    assert!(summary["min_gap"].as_f64().unwrap() >= 2.0);
    assert_eq!(summary["steps"], 20);
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time,ego_pos,ego_vel,lead_pos,lead_vel,control,gap,n_eff"));
    assert_eq!(trace.lines().count(), 21);
    assert!(std::fs::read_to_string(run.join("gap.svg")).unwrap().starts_with("<svg"));

    let base = dir.path().join("base");
    let o = gpmpc(&["run", "--config", s(&cfg), "--data", s(&csv), "--out", s(&base), "--baseline"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&base.join("summary.json"))["channel_cost_total"], 0.0);
    assert_eq!(json(&base.join("manifest.json"))["config"]["controller"]["weights"]["channel"], 0.0);
}

#[test]
fn paired_run_reports_both_costs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::reference();
    cfg.samples_per_step = 20;
    cfg.training_samples = 20 * 130;
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = dir.path().join("data");
    assert_eq!(gpmpc(&["gen-data", "--config", s(&path), "--out", s(&data)]).status.code(), Some(0));
    let out = dir.path().join("paired");
    let o = gpmpc(&["run", "--config", s(&path), "--data", s(&data.join("training.csv")), "--out", s(&out), "--paired"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sm = json(&out.join("summary.json"));
    let (aware, base) = (sm["delay_cost_aware"].as_f64().unwrap(), sm["delay_cost_baseline"].as_f64().unwrap());
    assert!(aware < base, "{aware} vs {base}");
    assert!(out.join("trace_aware.csv").exists() && out.join("trace_baseline.csv").exists());
}

#[test]
fn collision_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::reference();
    cfg.samples_per_step = 5;
    cfg.training_samples = 300;
    cfg.lead.initial_position = 6.0;
    cfg.lead.velocity = 0.0;
    cfg.ego.velocity = 10.0;
    cfg.data.lead_velocity_jitter = 0.0;
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = dir.path().join("data");
    assert_eq!(gpmpc(&["gen-data", "--config", s(&path), "--out", s(&data)]).status.code(), Some(0));
    let out = dir.path().join("run");
    let o = gpmpc(&["run", "--config", s(&path), "--data", s(&data.join("training.csv")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(json(&out.join("summary.json"))["outcome"]["kind"], "collision");
}

#[test]
fn bench_and_fit_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.csv");
    let o = gpmpc(&["bench-inverse", "--sizes", "10,40", "--nu", "5", "--reps", "3", "--out", s(&bench)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&bench).unwrap();
    assert!(text.starts_with("window,nu,reps,recursive_median_s,dense_median_s,speedup,max_rel_error"));
    assert_eq!(text.lines().count(), 3);

    let o = gpmpc(&["bench-inverse", "--sizes", "8", "--nu", "5", "--out", s(&bench)]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(gpmpc(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.code(), Some(0));
    let fit = dir.path().join("hyper.json");
    let o = gpmpc(&["fit-hyper", "--config", s(&cfg), "--data", s(&data.join("training.csv")), "--out", s(&fit)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&fit);
    assert_eq!(v["candidates"], 108);
    assert!(v["log_marginal_likelihood"].as_f64().unwrap().is_finite());
}
