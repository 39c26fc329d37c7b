use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use coopt_core::convlab::{run_sweep, write_sweep_csv, SweepConfig};
use coopt_core::coopt::{
    coordinate_in, IterationRecord, LayoutSource, Models, Observer, TrainConfig,
};
use coopt_core::library;
use coopt_core::metrics::{eval_episodes, EpisodeMetrics, EvalMode, EvalPlan, MetricReport};
use coopt_core::world::{Scenario, Trajectory};
use coopt_core::{Error, Result};
use serde_json::json;

use crate::artifacts::{
    load_config, load_scenario, read_json, sha256_file, sidecar_path, write_json, Checkpoint,
    EpisodeSidecar, RunManifest,
};
use crate::svg;
use crate::{ConvlabArgs, EvalArgs, Global, Mode, ReplayArgs, TrainArgs, TrainLayout};

fn require_scenario(g: &Global) -> Result<Scenario> {
    let id = g
        .scenario
        .as_deref()
        .ok_or_else(|| Error::Usage("--scenario is required".into()))?;
    load_scenario(id)
}

fn out_dir(g: &Global, default: &str) -> Result<PathBuf> {
    let dir = g
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn install_threads(threads: usize) {
    if threads > 0 {
        // A second install in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// Streams iteration records and writes periodic checkpoints.
struct Recorder {
    root: PathBuf,
    lines: BufWriter<File>,
    every: usize,
    scenario: Scenario,
    cfg: TrainConfig,
    checkpoints: Vec<(PathBuf, String)>,
}

impl Observer for Recorder {
    fn on_iteration(&mut self, record: &IterationRecord, models: &Models) -> Result<()> {
        serde_json::to_writer(&mut self.lines, record)?;
        self.lines.write_all(b"\n")?;
        self.lines.flush()?;
        let done = record.k + 1;
        if self.every > 0 && done % self.every == 0 {
            let path = self
                .root
                .join("checkpoints")
                .join(format!("k{done:05}.json"));
            let hash = write_json(
                &path,
                &Checkpoint::new(&self.scenario, &self.cfg, done, models),
            )?;
            self.checkpoints.push((path, hash));
        }
        Ok(())
    }
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<u8> {
    let scenario = require_scenario(g)?;
    let mut cfg = load_config(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(k) = a.iterations {
        cfg.iterations = k;
    }
    if let Some(e) = a.checkpoint_every {
        cfg.checkpoint_every = e;
    }
    cfg.validate()?;
    let source = match a.layout {
        TrainLayout::Generated => LayoutSource::Generated,
        TrainLayout::HandDesigned => {
            LayoutSource::Fixed(scenario.hand_designed.clone().ok_or_else(|| {
                Error::Config(format!(
                    "scenario '{}' has no hand-designed layout",
                    scenario.id
                ))
            })?)
        }
    };
    let root = out_dir(g, "train")?;
    let record_path = root.join("record.jsonl");
    let mut recorder = Recorder {
        root: root.clone(),
        lines: BufWriter::new(File::create(&record_path)?),
        every: cfg.checkpoint_every,
        scenario: scenario.clone(),
        cfg: cfg.clone(),
        checkpoints: Vec::new(),
    };
    let mut models = Models::init(&scenario, &cfg);
    log::info!(
        "training '{}' for {} iterations, config {}",
        scenario.id,
        cfg.iterations,
        &cfg.hash()[..12]
    );
    let record = coordinate_in(&scenario, &mut models, &cfg, &source, &mut recorder)?;
    drop(recorder.lines);

    let final_path = root.join("final.json");
    let final_hash = write_json(
        &final_path,
        &Checkpoint::new(&scenario, &cfg, record.iterations.len(), &models),
    )?;
    let mut manifest = RunManifest::new(
        "train",
        Some(&scenario),
        serde_json::to_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    );
    manifest.config_hash = cfg.hash();
    manifest.add_output(&root, &record_path, sha256_file(&record_path)?);
    for (p, h) in recorder.checkpoints {
        manifest.add_output(&root, &p, h);
    }
    manifest.add_output(&root, &final_path, final_hash.clone());
    manifest.write(&root)?;

    let failed = record
        .iterations
        .iter()
        .filter(|r| r.failed.is_some())
        .count();
    let last = record
        .iterations
        .last()
        .map(|r| r.objective)
        .unwrap_or(f64::NAN);
    println!(
        "{} iterations ({failed} failed), final objective {last:.4}",
        record.iterations.len()
    );
    println!(
        "final checkpoint {} sha256 {final_hash}",
        final_path.display()
    );
    Ok(if failed == record.iterations.len() && failed > 0 {
        1
    } else {
        0
    })
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<u8> {
    let ck: Checkpoint = read_json(&a.checkpoint)?;
    let scenario = match &g.scenario {
        Some(s) => load_scenario(s)?,
        None => library::builtin(&ck.scenario_id)?,
    };
    ck.check_scenario(&scenario)?;
    let threads = g.threads.unwrap_or(0);
    install_threads(threads);
    let plan = EvalPlan {
        tasks: a.tasks,
        trials: a.trials,
        seed: g.seed.unwrap_or(0),
    };
    let mode = match a.mode {
        Mode::Generated => EvalMode::Generated {
            spec: &ck.models.gen_spec,
            params: &ck.models.gen,
        },
        Mode::HandDesigned => EvalMode::HandDesigned,
        Mode::RandomLayout => EvalMode::RandomLayout,
    };
    let policy = ck.models.sampler();
    let logs = eval_episodes(&scenario, &policy, mode, &plan)?;
    let report = MetricReport::aggregate(
        logs.iter()
            .map(|l| EpisodeMetrics::of(&l.trajectory(), &scenario))
            .collect(),
    );

    let root = out_dir(g, "eval")?;
    let mode_name = format!("{:?}", a.mode).to_lowercase();
    let effective = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_sha256": sha256_file(&a.checkpoint)?,
        "mode": mode_name,
        "plan": plan,
    });
    let mut manifest = RunManifest::new("eval", Some(&scenario), effective, plan.seed, threads);
    let report_path = root.join("report.json");
    manifest.add_output(&root, &report_path, write_json(&report_path, &report)?);
    if a.export {
        let dir = root.join("episodes");
        fs::create_dir_all(&dir)?;
        for (idx, log) in logs.iter().enumerate() {
            let (j, r) = (idx / plan.trials, idx % plan.trials);
            let csv_path = dir.join(format!("task{j:03}_trial{r:03}.csv"));
            log.trajectory()
                .write_csv(BufWriter::new(File::create(&csv_path)?))?;
            manifest.add_output(&root, &csv_path, sha256_file(&csv_path)?);
            let side = EpisodeSidecar {
                scenario_id: scenario.id.clone(),
                task: log.task.clone(),
                layout: log.layout.clone(),
            };
            let side_path = sidecar_path(&csv_path);
            manifest.add_output(&root, &side_path, write_json(&side_path, &side)?);
        }
    }
    manifest.write(&root)?;
    println!(
        "{} episodes  SPL {:.4}  PCTSpeed {:.4}  NumCOLL {:.4}  DiffACC {:.4}",
        report.n_episodes, report.spl, report.pctspeed, report.numcoll, report.diffacc
    );
    Ok(0)
}

pub fn replay(g: &Global, a: &ReplayArgs) -> Result<u8> {
    let side_path = sidecar_path(&a.episode);
    let side: Option<EpisodeSidecar> = if side_path.is_file() {
        Some(read_json(&side_path)?)
    } else {
        None
    };
    let scenario = match (&g.scenario, &side) {
        (Some(s), _) => load_scenario(s)?,
        (None, Some(sd)) => library::builtin(&sd.scenario_id)?,
        (None, None) => {
            return Err(Error::Usage(
                "replay needs --scenario when the episode has no sidecar".into(),
            ))
        }
    };
    let (task, layout) = match side {
        Some(sd) => (sd.task, sd.layout),
        None => (
            scenario.task(),
            scenario
                .hand_designed
                .clone()
                .unwrap_or_else(|| scenario.midpoint_layout()),
        ),
    };
    scenario.check_task(&task)?;
    scenario.validate_layout(&layout)?;
    let traj = Trajectory::read_csv(BufReader::new(File::open(&a.episode)?), &scenario, &task)?;
    let dir = match &g.out {
        Some(d) => d.clone(),
        None => a
            .episode
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let stem = a
        .episode
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "episode".into());
    let path = dir.join(format!("{stem}.svg"));
    fs::write(&path, svg::render(&scenario, &layout, &traj))?;
    println!(
        "{} ({} steps, {} agents)",
        path.display(),
        traj.len(),
        traj.n()
    );
    Ok(0)
}

pub fn convlab(g: &Global, a: &ConvlabArgs) -> Result<u8> {
    let path = a
        .sweep
        .as_ref()
        .or(g.config.as_ref())
        .ok_or_else(|| Error::Usage("convlab needs a sweep file".into()))?;
    let cfg: SweepConfig = read_json(path)?;
    let threads = g.threads.unwrap_or(0);
    install_threads(threads);
    let rows = run_sweep(&cfg)?;
    let root = out_dir(g, "convlab")?;
    let csv_path = root.join("sweep.csv");
    write_sweep_csv(&rows, BufWriter::new(File::create(&csv_path)?))?;
    let mut manifest = RunManifest::new(
        "convlab",
        None,
        serde_json::to_value(&cfg)?,
        g.seed.unwrap_or(0),
        threads,
    );
    manifest.add_output(&root, &csv_path, sha256_file(&csv_path)?);
    manifest.write(&root)?;
    let failed = rows.iter().filter(|r| !r.satisfied).count();
    for r in &rows {
        println!(
            "{:<18} step {:<8} eta {:<6} eps {:<6} max_error {:.3e} bound {:.3e} {}",
            r.problem,
            r.step,
            r.eta,
            r.eps,
            r.max_error,
            r.bound,
            if r.satisfied { "ok" } else { "VIOLATED" }
        );
    }
    println!(
        "{} rows, {} satisfied, {failed} violated",
        rows.len(),
        rows.len() - failed
    );
    Ok(u8::from(failed > 0))
}

pub fn scenarios() -> Result<u8> {
    for id in library::ids() {
        let sc = library::builtin(id)?;
        println!(
            "{id:<14} {:>2} agents  {:>2} obstacle templates",
            sc.n_agents(),
            sc.obstacle_templates.len()
        );
    }
    Ok(0)
}
