use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coopt_core::coopt::TrainConfig;
use coopt_core::library::builtin;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "episodes_per_update": 2,
  "rollouts_per_env_grad": 2,
  "model": {"policy_hidden": [8], "policy_features": 8, "value_hidden": 8, "value_embed": 4, "generator_trunk": [8]},
  "threads": 1
}"#;

fn coopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coopt"))
        .args(args)
        .env("COOPT_LOG", "error")
        .output()
        .expect("binary runs")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn train_tiny(dir: &Path, scenario: &str, out: &str, seed: &str) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join(out);
    let o = coopt(&[
        "train",
        "--scenario",
        scenario,
        "--config",
        s(&cfg),
        "--iterations",
        "1",
        "--seed",
        seed,
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn smoke_run_writes_one_record() {
    let tmp = TempDir::new().unwrap();
    let out = train_tiny(tmp.path(), "poc", "run", "0");
    let text = fs::read_to_string(out.join("record.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let rec: Value = serde_json::from_str(lines[0]).unwrap();
    for key in [
        "k",
        "objective",
        "policy_loss",
        "value_loss",
        "env_grad_norm",
        "wallclock",
    ] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert!(manifest["outputs"]["final.json"].is_string());
}

#[test]
fn same_config_and_seed_give_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let a = train_tiny(tmp.path(), "poc", "a", "7");
    let b = train_tiny(tmp.path(), "poc", "b", "7");
    let c = train_tiny(tmp.path(), "poc", "c", "8");
    let hash = |d: &Path| {
        json(&d.join("manifest.json"))["outputs"]["final.json"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&a), hash(&b));
    assert_ne!(hash(&a), hash(&c));
    assert_eq!(
        fs::read(a.join("final.json")).unwrap(),
        fs::read(b.join("final.json")).unwrap()
    );
}

#[test]
fn manifest_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let first = train_tiny(tmp.path(), "poc", "first", "3");
    let manifest = json(&first.join("manifest.json"));
    let cfg_path = tmp.path().join("from_manifest.json");
    fs::write(&cfg_path, manifest["config"].to_string()).unwrap();
    let again = tmp.path().join("again");
    let o = coopt(&[
        "train",
        "--scenario",
        "poc",
        "--config",
        s(&cfg_path),
        "--out",
        s(&again),
    ]);
    assert!(o.status.success());
    assert_eq!(
        json(&again.join("manifest.json"))["outputs"]["final.json"],
        manifest["outputs"]["final.json"]
    );
}

#[test]
fn shipped_configs_validate() {
    for name in ["env1.json", "desk_poc.json", "desk_circular8.json"] {
        let text = fs::read_to_string(repo_root().join("configs").join(name)).unwrap();
        let cfg: TrainConfig =
            serde_json::from_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap();
    }
    let sc = builtin("env1").unwrap();
    assert_eq!(sc.obstacle_templates.len(), 4);
    for t in &sc.obstacle_templates {
        assert_eq!(t.y.range(), (-4.0, 4.0));
    }
}

#[test]
fn invalid_config_exits_two() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"gamma": 1.5}"#).unwrap();
    let o = coopt(&[
        "train",
        "--scenario",
        "poc",
        "--config",
        s(&bad),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));

    fs::write(&bad, r#"{"polcy_lr": 0.1}"#).unwrap();
    let o = coopt(&["train", "--scenario", "poc", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));

    let o = coopt(&["train", "--scenario", "no_such_place"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_counts_episodes_and_exports() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(tmp.path(), "poc", "run", "0");
    let ck = run.join("final.json");
    let out = tmp.path().join("eval");
    let o = coopt(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--tasks",
        "1",
        "--trials",
        "1",
        "--export",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("report.json"));
    assert_eq!(report["n_episodes"], 1);
    assert!(out.join("episodes/task000_trial000.csv").is_file());

    let small = tmp.path().join("short.json");
    let mut sc = json(&repo_root().join("configs/poc_desk.json"));
    sc["max_steps"] = 20.into();
    fs::write(&small, sc.to_string()).unwrap();
    let out = tmp.path().join("eval300");
    let o = coopt(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--scenario",
        s(&small),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out.join("report.json"))["n_episodes"], 300);
}

#[test]
fn hand_designed_mode_uses_the_regular_layout() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(tmp.path(), "env1", "run", "0");
    let out = tmp.path().join("eval");
    let o = coopt(&[
        "eval",
        "--checkpoint",
        s(&run.join("final.json")),
        "--mode",
        "hand-designed",
        "--tasks",
        "2",
        "--trials",
        "1",
        "--export",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let regular = serde_json::to_value(builtin("env1").unwrap().hand_designed.unwrap()).unwrap();
    for j in 0..2 {
        let side = json(&out.join(format!("episodes/task{j:03}_trial000.json")));
        assert_eq!(side["layout"], regular);
    }
}

#[test]
fn eval_refuses_other_schema_with_diff() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(tmp.path(), "poc", "run", "0");
    let o = coopt(&[
        "eval",
        "--checkpoint",
        s(&run.join("final.json")),
        "--scenario",
        "env2",
        "--tasks",
        "1",
        "--trials",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("- templates[0]") && err.contains("+ templates[7]"),
        "{err}"
    );
}

#[test]
fn replay_draws_one_point_per_step_and_agent() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(tmp.path(), "circular8", "run", "0");
    let out = tmp.path().join("eval");
    let o = coopt(&[
        "eval",
        "--checkpoint",
        s(&run.join("final.json")),
        "--tasks",
        "1",
        "--trials",
        "1",
        "--export",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("episodes/task000_trial000.csv");
    let o = coopt(&["replay", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(csv.with_extension("svg")).unwrap();
    let steps = fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(steps % 8, 0);
    for i in 0..8 {
        let group = svg
            .split(&format!(r#"id="agent{i}""#))
            .nth(1)
            .unwrap()
            .split("</g>")
            .next()
            .unwrap();
        assert_eq!(group.matches(r#"class="step""#).count(), steps / 8);
    }
    let radius = json(&csv.with_extension("json"))["layout"]["obstacles"][0]["radius"]
        .as_f64()
        .unwrap();
    let drawn: f64 = svg
        .lines()
        .find(|l| l.starts_with(r#"<circle class="obstacle""#))
        .and_then(|l| l.split(r#" r=""#).nth(1))
        .and_then(|r| r.split('"').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((drawn / 40.0 - radius).abs() < 1e-3, "{drawn} vs {radius}");
}

#[test]
fn replay_of_empty_episode_draws_layout_only() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("empty.csv");
    fs::write(&csv, "t,agent,x,y,vx,vy,reward,collided\n").unwrap();
    let o = coopt(&["replay", s(&csv), "--scenario", "poc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(tmp.path().join("empty.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="step""#).count(), 0);
    assert_eq!(svg.matches(r#"class="obstacle""#).count(), 4);
}

#[test]
fn malformed_csv_reports_line() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("bad.csv");
    fs::write(
        &csv,
        "t,agent,x,y,vx,vy,reward,collided\n1,0,0,0,0,0,0,0\n1,1,zero,0,0,0,0,0\n",
    )
    .unwrap();
    let o = coopt(&["replay", s(&csv), "--scenario", "poc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn sweep(dir: &Path, body: &str) -> (Output, String) {
    let cfg = dir.join("sweep.json");
    fs::write(&cfg, body).unwrap();
    let out = dir.join("out");
    let o = coopt(&["convlab", s(&cfg), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap_or_default();
    (o, csv)
}

#[test]
fn convlab_single_quadratic_row() {
    let tmp = TempDir::new().unwrap();
    let (o, csv) = sweep(
        tmp.path(),
        r#"{"problems":[{"kind":"moving_quadratic","start":[0.0],"velocity":[1.0],"theta0":[0.0]}],"steps":[0.05]}"#,
    );
    assert!(o.status.success());
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].split(',').nth(6), Some("true"));
}

#[test]
fn convlab_empty_sweep() {
    let tmp = TempDir::new().unwrap();
    let (o, csv) = sweep(tmp.path(), r#"{"problems":[],"steps":[]}"#);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        csv,
        "problem,step,eta,eps,max_error,bound,satisfied,ratio\n"
    );
}

#[test]
fn convlab_halving_ratios() {
    let tmp = TempDir::new().unwrap();
    let (o, csv) = sweep(
        tmp.path(),
        r#"{"problems":[{"kind":"moving_quadratic","start":[0.0],"velocity":[1.0],"theta0":[0.0]}],"steps":[0.1,0.05,0.025]}"#,
    );
    assert!(o.status.success());
    let ratios: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(7))
        .filter(|r| !r.is_empty())
        .map(|r| r.parse().unwrap())
        .collect();
    assert_eq!(ratios.len(), 2);
    assert!(
        ratios.iter().all(|r| (0.35..=0.65).contains(r)),
        "{ratios:?}"
    );
}

#[test]
fn convlab_bad_input_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("x.json");
    fs::write(&cfg, "{not json").unwrap();
    assert_eq!(coopt(&["convlab", s(&cfg)]).status.code(), Some(2));
    let o = coopt(&["convlab"]);
    assert_eq!(o.status.code(), Some(2));
}
