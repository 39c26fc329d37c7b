//! Alternating agent-environment co-optimization.
//!
//! Each outer iteration samples one layout from the generator, improves the
//! navigation policy in it with actor-critic updates, then freezes the policy
//! and improves the generator by likelihood-ratio gradient ascent on the
//! discounted team return.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{
    action_logprob_raw, policy_backward, policy_dist, value, value_backward, Policy, PolicyParams,
    PolicySpec, ValueSpec, HEAD_OUT,
};
use crate::envgen::{gen_dist, gen_logprob_grad, layout_sample_logprob, GenSpec};
use crate::error::{config, numeric, Error, Result};
use crate::net::{AdamHyper, AdamState, ParamBlock};
use crate::rng::{derive_seed, seeded, substream, Rng};
use crate::world::{rollout, EpisodeLog, ObstacleLayout, Scenario, Task, Termination};

/// One-step temporal-difference residual; pass `v_next = 0` at terminal steps.
pub fn td_error(r: f64, v_t: f64, v_next: f64, gamma: f64) -> f64 {
    r + gamma * v_next - v_t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    /// Samples per minibatch; 0 uses the whole batch.
    pub minibatch: usize,
    pub gae_lambda: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            gae_lambda: 0.95,
            max_grad_norm: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub enabled: bool,
    pub ema: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ema: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths shared by the GNN message and update MLPs.
    pub policy_hidden: Vec<usize>,
    pub policy_features: usize,
    pub include_position: bool,
    pub value_hidden: usize,
    pub value_embed: usize,
    pub generator_trunk: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![64, 64, 64],
            policy_features: 64,
            include_position: false,
            value_hidden: 64,
            value_embed: 32,
            generator_trunk: vec![32, 64, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Policy step size.
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Generator step size.
    pub env_lr: f64,
    /// Policy updates per outer iteration.
    pub policy_rounds: usize,
    /// Generator updates per outer iteration.
    pub generator_steps: usize,
    /// Rollouts per generator-gradient estimate.
    pub rollouts_per_env_grad: usize,
    /// Outer iterations.
    pub iterations: usize,
    pub episodes_per_update: usize,
    pub ppo: PpoConfig,
    pub baseline: BaselineConfig,
    /// Plain score-function ascent on TD errors instead of PPO.
    pub vanilla_pg: bool,
    pub env_optimizer: EnvOptimizer,
    /// Critic outputs are multiplied by this scale.
    pub value_scale: f64,
    /// Draw a fresh task per iteration from the scenario's task sampler.
    pub sample_tasks: bool,
    pub model: ModelConfig,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// Checkpoint period in outer iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            env_lr: 0.05,
            policy_rounds: 1,
            generator_steps: 1,
            rollouts_per_env_grad: 8,
            iterations: 200,
            episodes_per_update: 4,
            ppo: PpoConfig::default(),
            baseline: BaselineConfig::default(),
            vanilla_pg: false,
            env_optimizer: EnvOptimizer::Adam,
            value_scale: 10.0,
            sample_tasks: false,
            model: ModelConfig::default(),
            seed: 0,
            threads: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(config("gamma must lie in (0, 1)"));
        }
        for (name, v) in [
            ("policy_lr", self.policy_lr),
            ("value_lr", self.value_lr),
            ("env_lr", self.env_lr),
            ("value_scale", self.value_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.value_scale == 0.0 {
            return Err(config("value_scale must be positive"));
        }
        if !(self.ppo.clip > 0.0
            && self.ppo.gae_lambda >= 0.0
            && self.ppo.gae_lambda <= 1.0
            && self.ppo.max_grad_norm >= 0.0)
        {
            return Err(config("ppo settings out of range"));
        }
        if !(self.baseline.ema >= 0.0 && self.baseline.ema < 1.0) {
            return Err(config("baseline ema must lie in [0, 1)"));
        }
        if self.policy_rounds > 0 && self.episodes_per_update == 0 {
            return Err(config(
                "episodes_per_update must be positive when policy updates run",
            ));
        }
        if self.generator_steps > 0 && self.rollouts_per_env_grad == 0 {
            return Err(config(
                "rollouts_per_env_grad must be positive when generator updates run",
            ));
        }
        if self.model.policy_features == 0
            || self.model.value_hidden == 0
            || self.model.value_embed == 0
        {
            return Err(config("model widths must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        ))
    }
}

/// Everything the coordinator learns, plus optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub policy_spec: PolicySpec,
    pub policy: PolicyParams,
    pub value_spec: ValueSpec,
    pub value: ParamBlock,
    pub gen_spec: GenSpec,
    pub gen: ParamBlock,
    pub opt: OptimizerState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub gnn: AdamState,
    pub head: AdamState,
    pub value: AdamState,
    pub gen: AdamState,
    /// EMA of generator-gradient returns; `None` before the first estimate.
    pub baseline: Option<f64>,
}

impl Models {
    pub fn init(scenario: &Scenario, cfg: &TrainConfig) -> Self {
        let m = &cfg.model;
        let policy_spec = PolicySpec::new(
            scenario,
            &m.policy_hidden,
            m.policy_features,
            m.include_position,
        );
        let value_spec = ValueSpec::new(scenario, m.value_hidden, m.value_embed);
        let gen_spec = GenSpec::new(scenario, &m.generator_trunk);
        let policy = PolicyParams::init(&policy_spec, &mut substream(cfg.seed, &[0, 0]));
        let value = value_spec.init(&mut substream(cfg.seed, &[0, 1]));
        let gen = gen_spec.init(&mut substream(cfg.seed, &[0, 2]));
        let opt = OptimizerState {
            gnn: AdamState::new(policy.gnn.len()),
            head: AdamState::new(policy.head.len()),
            value: AdamState::new(value.len()),
            gen: AdamState::new(gen.len()),
            baseline: None,
        };
        Self {
            policy_spec,
            policy,
            value_spec,
            value,
            gen_spec,
            gen,
            opt,
        }
    }

    pub fn sampler(&self) -> Policy<'_> {
        Policy {
            spec: &self.policy_spec,
            params: &self.policy,
            deterministic: false,
        }
    }

    fn value_of(&self, task: &Task, state: &crate::world::WorldState, scale: f64) -> Result<f64> {
        Ok(scale * value(&self.value_spec, &self.value, task, state)?)
    }

    /// One layout and its log-probability from the current generator.
    pub fn sample_layout(
        &self,
        scenario: &Scenario,
        task: &Task,
        rng: &mut Rng,
    ) -> Result<(ObstacleLayout, f64)> {
        let (dist, _) = gen_dist(&self.gen_spec, &self.gen, scenario, task)?;
        layout_sample_logprob(&dist, scenario, rng)
    }
}

/// Rolls out `count` episodes in parallel; episode `e` draws from the
/// substream `path ++ [e]`.
pub fn collect(
    models: &Models,
    scenario: &Scenario,
    task: &Task,
    layout: &ObstacleLayout,
    count: usize,
    seed: u64,
    path: &[u64],
) -> Result<Vec<EpisodeLog>> {
    let policy = models.sampler();
    (0..count)
        .into_par_iter()
        .map(|e| {
            let mut p = path.to_vec();
            p.push(e as u64);
            rollout(scenario, task, layout, &policy, &mut substream(seed, &p))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub samples: usize,
    pub clip_fraction: f64,
}

struct Sample<'a> {
    log: &'a EpisodeLog,
    t: usize,
    advantage: f64,
    target: f64,
}

fn gather_samples<'a>(
    models: &Models,
    logs: &'a [EpisodeLog],
    cfg: &TrainConfig,
) -> Result<Vec<Sample<'a>>> {
    let per_log: Vec<Vec<Sample<'a>>> = logs
        .par_iter()
        .map(|log| -> Result<Vec<Sample<'a>>> {
            let n = log.len();
            if n == 0 {
                return Ok(Vec::new());
            }
            let mut values = Vec::with_capacity(n + 1);
            for t in 0..=n {
                values.push(models.value_of(&log.task, log.state_before(t), cfg.value_scale)?);
            }
            if log.termination == Termination::AllArrived {
                values[n] = 0.0;
            }
            let lambda = if cfg.vanilla_pg {
                0.0
            } else {
                cfg.ppo.gae_lambda
            };
            let mut adv = vec![0.0; n];
            let mut next = 0.0;
            for t in (0..n).rev() {
                let delta = td_error(
                    log.steps[t].team_reward,
                    values[t],
                    values[t + 1],
                    cfg.gamma,
                );
                next = delta + cfg.gamma * lambda * next;
                adv[t] = next;
            }
            Ok((0..n)
                .map(|t| Sample {
                    log,
                    t,
                    advantage: adv[t],
                    target: adv[t] + values[t],
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let samples: Vec<Sample<'a>> = per_log.into_iter().flatten().collect();
    if samples
        .iter()
        .any(|s| !s.advantage.is_finite() || !s.target.is_finite())
    {
        return Err(numeric("non-finite advantage; policy update skipped"));
    }
    Ok(samples)
}

fn normalize(samples: &mut [Sample<'_>]) {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| (s.advantage - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    for s in samples.iter_mut() {
        s.advantage = if std > 1e-8 {
            (s.advantage - mean) / std
        } else {
            s.advantage - mean
        };
    }
}

struct PolicyGrad {
    grad: PolicyParams,
    loss: f64,
    count: usize,
    clipped: usize,
}

fn policy_grad_chunk(
    models: &Models,
    chunk: &[&Sample<'_>],
    cfg: &TrainConfig,
) -> Result<PolicyGrad> {
    let spec = &models.policy_spec;
    let mut out = PolicyGrad {
        grad: models.policy.zeros_like(),
        loss: 0.0,
        count: 0,
        clipped: 0,
    };
    for s in chunk {
        let state = s.log.state_before(s.t);
        let step = &s.log.steps[s.t];
        let graph = spec.observe(&s.log.task, state);
        let (_, tape) = policy_dist(spec, &models.policy, &graph)?;
        let mut ups = vec![[0.0; HEAD_OUT]; state.n()];
        for i in 0..state.n() {
            if state.arrived[i] {
                continue;
            }
            let (lp, g) = action_logprob_raw(spec, &tape.raw()[i], step.actions[i])?;
            // Coefficient on d(log pi) of the surrogate being maximized.
            let coef = if cfg.vanilla_pg {
                out.loss -= lp * s.advantage;
                s.advantage
            } else {
                let ratio = (lp - step.logprobs[i]).exp();
                let clipped = ratio.clamp(1.0 - cfg.ppo.clip, 1.0 + cfg.ppo.clip);
                let (u, c) = (ratio * s.advantage, clipped * s.advantage);
                out.loss -= u.min(c);
                if u <= c {
                    ratio * s.advantage
                } else {
                    out.clipped += 1;
                    0.0
                }
            };
            out.count += 1;
            // Descent direction on the negated surrogate.
            ups[i] = g.map(|v| -coef * v);
        }
        policy_backward(spec, &models.policy, tape, &ups, &mut out.grad)?;
    }
    Ok(out)
}

fn value_grad_chunk(
    models: &Models,
    chunk: &[&Sample<'_>],
    scale: f64,
) -> Result<(ParamBlock, f64)> {
    let mut grad = ParamBlock::zeros_like(&models.value);
    let mut loss = 0.0;
    for s in chunk {
        let state = s.log.state_before(s.t);
        let target = s.target / scale;
        let v = value(&models.value_spec, &models.value, &s.log.task, state)?;
        let err = v - target;
        loss += 0.5 * err * err;
        value_backward(
            &models.value_spec,
            &models.value,
            &s.log.task,
            state,
            err,
            &mut grad,
        )?;
    }
    Ok((grad, loss))
}

const CHUNK: usize = 16;

fn clip_global(blocks: &mut [&mut ParamBlock], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = blocks
        .iter()
        .map(|b| b.values.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        blocks.iter_mut().for_each(|b| b.scale(max_norm / norm));
    }
}

/// Actor-critic update on episodes collected under the current policy.
/// Parameters change only if the whole update succeeds.
pub fn policy_update(
    models: &mut Models,
    logs: &[EpisodeLog],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let mut samples = gather_samples(models, logs, cfg)?;
    if samples.is_empty() {
        return Ok(UpdateStats::default());
    }
    if !cfg.vanilla_pg {
        normalize(&mut samples);
    }
    let mut next = models.clone();
    let mut stats = UpdateStats {
        samples: samples.len(),
        ..Default::default()
    };
    let epochs = if cfg.vanilla_pg { 1 } else { cfg.ppo.epochs };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut clipped, mut counted, mut batches) = (0usize, 0usize, 0usize);
    for _ in 0..epochs {
        if !cfg.vanilla_pg {
            order.shuffle(rng);
        }
        let mb = if cfg.ppo.minibatch == 0 || cfg.vanilla_pg {
            order.len()
        } else {
            cfg.ppo.minibatch
        };
        for idx in order.chunks(mb) {
            let batch: Vec<&Sample<'_>> = idx.iter().map(|&i| &samples[i]).collect();
            let parts: Vec<PolicyGrad> = batch
                .par_chunks(CHUNK)
                .map(|c| policy_grad_chunk(&next, c, cfg))
                .collect::<Result<_>>()?;
            let vparts: Vec<(ParamBlock, f64)> = batch
                .par_chunks(CHUNK)
                .map(|c| value_grad_chunk(&next, c, cfg.value_scale))
                .collect::<Result<_>>()?;
            let mut g = next.policy.zeros_like();
            let mut loss = 0.0;
            let mut count = 0;
            for p in &parts {
                g.gnn.axpy(1.0, &p.grad.gnn)?;
                g.head.axpy(1.0, &p.grad.head)?;
                loss += p.loss;
                count += p.count;
                clipped += p.clipped;
            }
            counted += count;
            let mut vg = ParamBlock::zeros_like(&next.value);
            let mut vloss = 0.0;
            for (p, l) in &vparts {
                vg.axpy(1.0, p)?;
                vloss += l;
            }
            let inv = 1.0 / batch.len() as f64;
            stats.policy_loss += loss / count.max(1) as f64;
            stats.value_loss += vloss * inv;
            batches += 1;
            vg.scale(inv);
            if cfg.vanilla_pg {
                // theta <- theta + lr * sum_t grad log pi * delta
                for (p, d) in next.policy.gnn.values.iter_mut().zip(&g.gnn.values) {
                    *p -= cfg.policy_lr * d;
                }
                for (p, d) in next.policy.head.values.iter_mut().zip(&g.head.values) {
                    *p -= cfg.policy_lr * d;
                }
            } else {
                let pinv = 1.0 / count.max(1) as f64;
                g.gnn.scale(pinv);
                g.head.scale(pinv);
                clip_global(&mut [&mut g.gnn, &mut g.head], cfg.ppo.max_grad_norm);
                let h = AdamHyper::with_lr(cfg.policy_lr);
                next.opt
                    .gnn
                    .step(&mut next.policy.gnn.values, &g.gnn.values, &h)?;
                next.opt
                    .head
                    .step(&mut next.policy.head.values, &g.head.values, &h)?;
            }
            clip_global(&mut [&mut vg], cfg.ppo.max_grad_norm.max(0.0) * 10.0);
            next.opt.value.step(
                &mut next.value.values,
                &vg.values,
                &AdamHyper::with_lr(cfg.value_lr),
            )?;
        }
    }
    if !next.policy.all_finite() || !next.value.all_finite() {
        return Err(numeric("policy update produced non-finite parameters"));
    }
    if batches > 0 {
        stats.policy_loss /= batches as f64;
        stats.value_loss /= batches as f64;
    }
    stats.clip_fraction = clipped as f64 / counted.max(1) as f64;
    *models = next;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvGradient {
    pub grad: ParamBlock,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

/// Likelihood-ratio estimate `(1/T) sum_tau (R_tau - b) grad log pi_o(layout_tau)`.
/// `returns` maps a sampled (task, layout) to its return; the estimate uses
/// substream `path ++ [tau]` for sample `tau`.
pub fn env_gradient_with<F>(
    models: &Models,
    scenario: &Scenario,
    tasks: &[Task],
    baseline: f64,
    returns: F,
    seed: u64,
    path: &[u64],
) -> Result<EnvGradient>
where
    F: Fn(&Task, &ObstacleLayout, &mut Rng) -> Result<f64> + Sync,
{
    if tasks.is_empty() {
        return Err(config("generator gradient needs at least one rollout"));
    }
    let parts: Vec<(f64, ParamBlock)> = tasks
        .par_iter()
        .enumerate()
        .map(|(tau, task)| {
            let mut p = path.to_vec();
            p.push(tau as u64);
            let mut rng = substream(seed, &p);
            let (layout, _) = models.sample_layout(scenario, task, &mut rng)?;
            let r = returns(task, &layout, &mut rng)?;
            let (_, g) = gen_logprob_grad(&models.gen_spec, &models.gen, scenario, task, &layout)?;
            Ok((r, g))
        })
        .collect::<Result<_>>()?;
    let t = parts.len() as f64;
    let mut grad = ParamBlock::zeros_like(&models.gen);
    let mut rs = Vec::with_capacity(parts.len());
    for (r, g) in &parts {
        if !r.is_finite() {
            return Err(numeric("non-finite return in generator gradient"));
        }
        grad.axpy((r - baseline) / t, g)?;
        rs.push(*r);
    }
    let mean_return = rs.iter().sum::<f64>() / t;
    Ok(EnvGradient {
        grad,
        mean_return,
        returns: rs,
    })
}

/// Generator gradient from full navigation rollouts under the frozen policy.
pub fn env_gradient(
    models: &Models,
    scenario: &Scenario,
    tasks: &[Task],
    baseline: f64,
    cfg: &TrainConfig,
    path: &[u64],
) -> Result<EnvGradient> {
    let policy = models.sampler();
    env_gradient_with(
        models,
        scenario,
        tasks,
        baseline,
        |task, layout, rng| {
            Ok(rollout(scenario, task, layout, &policy, rng)?.discounted_return(cfg.gamma))
        },
        cfg.seed,
        path,
    )
}

/// Ascent step on the generator parameters; returns the gradient norm.
pub fn env_update(models: &mut Models, grad: &ParamBlock, cfg: &TrainConfig) -> Result<f64> {
    let norm = grad.norm();
    if !norm.is_finite() {
        return Err(numeric("non-finite generator gradient"));
    }
    match cfg.env_optimizer {
        EnvOptimizer::Sgd => models.gen.axpy(cfg.env_lr, grad)?,
        EnvOptimizer::Adam => {
            let neg: Vec<f64> = grad.values.iter().map(|g| -g).collect();
            models.opt.gen.step(
                &mut models.gen.values,
                &neg,
                &AdamHyper::with_lr(cfg.env_lr),
            )?;
        }
    }
    Ok(norm)
}

fn update_baseline(models: &mut Models, cfg: &TrainConfig, mean: f64) {
    models.opt.baseline = Some(match models.opt.baseline {
        None => mean,
        Some(b) => cfg.baseline.ema * b + (1.0 - cfg.baseline.ema) * mean,
    });
}

/// JSON-lines record of one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub objective: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub env_grad_norm: f64,
    pub wallclock: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iterations: Vec<IterationRecord>,
}

impl TrainRecord {
    pub fn objective(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.objective).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.iterations
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Policy,
    Environment,
}

/// Hooks into the outer loop; every method defaults to a no-op.
pub trait Observer: Send {
    fn on_update(&mut self, _k: usize, _phase: Phase, _models: &Models) {}
    fn on_iteration(&mut self, _record: &IterationRecord, _models: &Models) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl Observer for NoObserver {}

/// Which layouts the policy phase trains in.
#[derive(Clone, Debug, PartialEq)]
pub enum LayoutSource {
    /// Sampled from the generator each iteration.
    Generated,
    /// A fixed layout; generator updates are skipped.
    Fixed(ObstacleLayout),
}

pub fn coordinate(
    scenario: &Scenario,
    models: &mut Models,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<TrainRecord> {
    coordinate_in(scenario, models, cfg, &LayoutSource::Generated, observer)
}

pub fn coordinate_in(
    scenario: &Scenario,
    models: &mut Models,
    cfg: &TrainConfig,
    source: &LayoutSource,
    observer: &mut dyn Observer,
) -> Result<TrainRecord> {
    cfg.validate()?;
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut record = TrainRecord::default();
        let start = Instant::now();
        for k in 0..cfg.iterations {
            let snapshot = models.clone();
            let rec = match iteration(scenario, models, cfg, source, k, observer) {
                Ok(mut r) => {
                    r.wallclock = start.elapsed().as_secs_f64();
                    r
                }
                Err(e @ (Error::Numeric(_) | Error::Domain(_))) => {
                    log::warn!("iteration {k} failed: {e}");
                    *models = snapshot;
                    IterationRecord {
                        k,
                        objective: f64::NAN,
                        policy_loss: f64::NAN,
                        value_loss: f64::NAN,
                        env_grad_norm: f64::NAN,
                        wallclock: start.elapsed().as_secs_f64(),
                        env_return: None,
                        failed: Some(e.to_string()),
                    }
                }
                Err(e) => return Err(e),
            };
            log::info!(
                "k={k} objective={:.4} policy_loss={:.4} value_loss={:.4}",
                rec.objective,
                rec.policy_loss,
                rec.value_loss
            );
            observer.on_iteration(&rec, models)?;
            record.iterations.push(rec);
        }
        Ok(record)
    })
}

fn iteration(
    scenario: &Scenario,
    models: &mut Models,
    cfg: &TrainConfig,
    source: &LayoutSource,
    k: usize,
    observer: &mut dyn Observer,
) -> Result<IterationRecord> {
    let k64 = k as u64;
    let mut rng = seeded(derive_seed(cfg.seed, &[1, k64]));
    let task = if cfg.sample_tasks {
        scenario.sample_task(&mut rng)?
    } else {
        scenario.task()
    };
    let layout = match source {
        LayoutSource::Generated => models.sample_layout(scenario, &task, &mut rng)?.0,
        LayoutSource::Fixed(l) => l.clone(),
    };
    // Phase (i): policy updates in the sampled layout.
    let mut returns = Vec::new();
    let (mut pl, mut vl) = (0.0, 0.0);
    for r in 0..cfg.policy_rounds {
        let logs = collect(
            models,
            scenario,
            &task,
            &layout,
            cfg.episodes_per_update,
            cfg.seed,
            &[2, k64, r as u64],
        )?;
        returns.extend(logs.iter().map(|l| l.discounted_return(cfg.gamma)));
        let stats = policy_update(models, &logs, cfg, &mut rng)?;
        pl += stats.policy_loss / cfg.policy_rounds as f64;
        vl += stats.value_loss / cfg.policy_rounds as f64;
        observer.on_update(k, Phase::Policy, models);
    }
    // Phase (ii): generator ascent with the policy frozen.
    let mut env_norm = 0.0;
    let mut env_return = None;
    if matches!(source, LayoutSource::Generated) {
        for r in 0..cfg.generator_steps {
            let path = [3, k64, r as u64];
            let mut trng = seeded(derive_seed(cfg.seed, &path));
            let tasks = (0..cfg.rollouts_per_env_grad)
                .map(|_| {
                    if cfg.sample_tasks {
                        scenario.sample_task(&mut trng)
                    } else {
                        Ok(scenario.task())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let b = if cfg.baseline.enabled {
                models.opt.baseline.unwrap_or(0.0)
            } else {
                0.0
            };
            let eg = env_gradient(models, scenario, &tasks, b, cfg, &path)?;
            env_norm = env_update(models, &eg.grad, cfg)?;
            update_baseline(models, cfg, eg.mean_return);
            env_return = Some(eg.mean_return);
            observer.on_update(k, Phase::Environment, models);
        }
    }
    let objective = if returns.is_empty() {
        env_return.unwrap_or(f64::NAN)
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    Ok(IterationRecord {
        k,
        objective,
        policy_loss: pl,
        value_loss: vl,
        env_grad_norm: env_norm,
        wallclock: 0.0,
        env_return,
        failed: None,
    })
}
