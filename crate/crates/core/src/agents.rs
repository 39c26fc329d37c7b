//! Decentralized GNN navigation policy and the centralized critic.
//!
//! Each agent builds a node feature from its own goal offset and velocity and
//! receives one message per communication neighbor. A shared linear head maps
//! the GNN output of each agent to two truncated Gaussians over the velocity
//! command axes.

use serde::{Deserialize, Serialize};

use crate::dist::{GaussHead, TruncGauss};
use crate::error::{config, Result};
use crate::net::{
    gnn_backward_raw, gnn_forward, mlp_backward_raw, mlp_forward_raw, Activation, EdgeSignal,
    GnnSpec, GnnTape, GraphSignal, MlpSpec, MlpTape, ParamBlock,
};
use crate::rng::Rng;
use crate::world::{comm_graph, ActionSampler, Scenario, Task, Vec2, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborEncoding {
    /// Offsets of neighbor position and velocity from the receiver's own.
    Relative,
    /// The neighbor's own node feature.
    Absolute,
}

/// Observation encoding and network shapes of the navigation policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub gnn: GnnSpec,
    pub encoding: NeighborEncoding,
    /// Appends the agent's absolute position to its node feature.
    #[serde(default)]
    pub include_position: bool,
    /// Distance scale for goal offsets and positions (m).
    pub pos_scale: f64,
    pub v_max: f64,
    pub comm_radius: f64,
}

const BASE_FEATURES: usize = 5;
/// Raw head outputs per agent: (mu_x, sigma_x, mu_y, sigma_y).
pub const HEAD_OUT: usize = 4;

impl PolicySpec {
    pub fn node_dim(include_position: bool) -> usize {
        BASE_FEATURES + if include_position { 2 } else { 0 }
    }

    /// Message and update MLPs share `hidden`; the GNN emits `features` per agent.
    pub fn new(
        scenario: &Scenario,
        hidden: &[usize],
        features: usize,
        include_position: bool,
    ) -> Self {
        let node_dim = Self::node_dim(include_position);
        Self {
            gnn: GnnSpec::new(
                node_dim,
                hidden,
                features,
                hidden,
                features,
                Activation::Relu,
            ),
            encoding: NeighborEncoding::Relative,
            include_position,
            pos_scale: 4.0,
            v_max: scenario.v_max,
            comm_radius: scenario.comm_radius,
        }
    }

    pub fn head_spec(&self) -> MlpSpec {
        MlpSpec::new(self.gnn.output(), &[], Activation::Identity, HEAD_OUT)
    }

    pub fn validate(&self) -> Result<()> {
        self.gnn.validate()?;
        if self.gnn.node_dim != Self::node_dim(self.include_position) {
            return Err(config(
                "gnn node width does not match the observation encoding",
            ));
        }
        if !(self.pos_scale > 0.0 && self.v_max > 0.0 && self.comm_radius > 0.0) {
            return Err(config("policy scales must be positive"));
        }
        Ok(())
    }

    pub fn axis_head(&self) -> GaussHead {
        GaussHead::new(-self.v_max, self.v_max)
    }

    fn node_feature(&self, task: &Task, state: &WorldState, i: usize) -> Vec<f64> {
        let to_goal = task.goals[i] - state.pos[i];
        let d = to_goal.norm();
        let dir = if d > 0.0 { to_goal / d } else { Vec2::zeros() };
        let v = state.vel[i] / self.v_max;
        let mut x = vec![
            dir.x,
            dir.y,
            d.min(self.pos_scale) / self.pos_scale,
            v.x,
            v.y,
        ];
        if self.include_position {
            x.push(state.pos[i].x / self.pos_scale);
            x.push(state.pos[i].y / self.pos_scale);
        }
        x
    }

    fn relative_signal(&self, state: &WorldState, i: usize, j: usize) -> Vec<f64> {
        let dp = (state.pos[j] - state.pos[i]) / self.comm_radius;
        let dv = (state.vel[j] - state.vel[i]) / self.v_max;
        let mut s = vec![dp.x, dp.y, dv.x, dv.y, dp.norm()];
        s.resize(self.gnn.node_dim, 0.0);
        s
    }

    /// Graph signal of local observations; agent `i` sees only itself and
    /// its communication neighbors.
    pub fn observe(&self, task: &Task, state: &WorldState) -> GraphSignal {
        let neighbors = comm_graph(state, self.comm_radius);
        let nodes: Vec<Vec<f64>> = (0..state.n())
            .map(|i| self.node_feature(task, state, i))
            .collect();
        let edges = neighbors
            .iter()
            .enumerate()
            .map(|(i, list)| {
                list.iter()
                    .map(|&j| EdgeSignal {
                        from: j,
                        support: 1.0,
                        signal: match self.encoding {
                            NeighborEncoding::Relative => self.relative_signal(state, i, j),
                            NeighborEncoding::Absolute => nodes[j].clone(),
                        },
                    })
                    .collect()
            })
            .collect();
        GraphSignal { nodes, edges }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub gnn: ParamBlock,
    pub head: ParamBlock,
}

impl PolicyParams {
    pub fn init(spec: &PolicySpec, rng: &mut Rng) -> Self {
        let gnn = spec.gnn.init(rng);
        let mut head = spec.head_spec().init(rng);
        // Small initial head keeps commands near zero mean.
        head.scale(0.1);
        Self { gnn, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gnn: ParamBlock::zeros_like(&self.gnn),
            head: ParamBlock::zeros_like(&self.head),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.gnn.all_finite() && self.head.all_finite()
    }
}

/// Per-agent velocity distribution over the two command axes.
pub type AxisPair = [TruncGauss; 2];

pub struct PolicyTape {
    gnn: GnnTape,
    heads: Vec<MlpTape>,
    raw: Vec<[f64; HEAD_OUT]>,
}

pub fn policy_dist(
    spec: &PolicySpec,
    params: &PolicyParams,
    graph: &GraphSignal,
) -> Result<(Vec<AxisPair>, PolicyTape)> {
    spec.validate()?;
    let head_spec = spec.head_spec();
    if params.head.values.len() != head_spec.param_count() {
        return Err(config("head parameters do not match the policy spec"));
    }
    let (feats, gnn_tape) = gnn_forward(&params.gnn, &spec.gnn, graph)?;
    let axis = spec.axis_head();
    let mut dists = Vec::with_capacity(feats.len());
    let mut heads = Vec::with_capacity(feats.len());
    let mut raw = Vec::with_capacity(feats.len());
    for f in &feats {
        let tape = mlp_forward_raw(&params.head.values, &head_spec, f)?;
        let o = tape.output();
        let r = [o[0], o[1], o[2], o[3]];
        dists.push([axis.dist(r[0], r[1])?, axis.dist(r[2], r[3])?]);
        raw.push(r);
        heads.push(tape);
    }
    Ok((
        dists,
        PolicyTape {
            gnn: gnn_tape,
            heads,
            raw,
        },
    ))
}

/// Log-probability of one agent's command and its gradient with respect to
/// the four raw head outputs.
pub fn action_logprob_raw(
    spec: &PolicySpec,
    raw: &[f64; HEAD_OUT],
    action: Vec2,
) -> Result<(f64, [f64; HEAD_OUT])> {
    let axis = spec.axis_head();
    let mut lp = 0.0;
    let mut g = [0.0; HEAD_OUT];
    for (k, a) in [action.x, action.y].into_iter().enumerate() {
        let d = axis.dist(raw[2 * k], raw[2 * k + 1])?;
        lp += d.logpdf(a)?;
        let gr = axis.grad_raw(raw[2 * k], raw[2 * k + 1], a)?;
        g[2 * k] = gr[0];
        g[2 * k + 1] = gr[1];
    }
    Ok((lp, g))
}

impl PolicyTape {
    pub fn raw(&self) -> &[[f64; HEAD_OUT]] {
        &self.raw
    }
}

/// Backpropagates per-agent upstream gradients on raw head outputs into the
/// policy parameters, accumulating into `grad`.
pub fn policy_backward(
    spec: &PolicySpec,
    params: &PolicyParams,
    tape: PolicyTape,
    upstream_raw: &[[f64; HEAD_OUT]],
    grad: &mut PolicyParams,
) -> Result<()> {
    if upstream_raw.len() != tape.heads.len() {
        return Err(config("one upstream entry per agent is required"));
    }
    let head_spec = spec.head_spec();
    let mut feat_grads = Vec::with_capacity(upstream_raw.len());
    for (tape_i, up) in tape.heads.iter().zip(upstream_raw) {
        if up.iter().all(|&u| u == 0.0) {
            feat_grads.push(vec![0.0; spec.gnn.output()]);
            continue;
        }
        feat_grads.push(mlp_backward_raw(
            &params.head.values,
            &head_spec,
            tape_i,
            up,
            &mut grad.head.values,
        )?);
    }
    gnn_backward_raw(
        &params.gnn.values,
        &spec.gnn,
        &tape.gnn,
        &feat_grads,
        &mut grad.gnn.values,
    )
}

/// Samples every agent's command; returns commands and per-agent log-probabilities.
pub fn policy_sample_logprob(dists: &[AxisPair], rng: &mut Rng) -> Result<(Vec<Vec2>, Vec<f64>)> {
    let mut actions = Vec::with_capacity(dists.len());
    let mut logps = Vec::with_capacity(dists.len());
    for [dx, dy] in dists {
        let a = Vec2::new(dx.sample(rng), dy.sample(rng));
        logps.push(dx.logpdf(a.x)? + dy.logpdf(a.y)?);
        actions.push(a);
    }
    Ok((actions, logps))
}

/// A policy bound to parameters, usable as a rollout action sampler.
pub struct Policy<'a> {
    pub spec: &'a PolicySpec,
    pub params: &'a PolicyParams,
    /// Emit distribution means instead of samples.
    pub deterministic: bool,
}

impl ActionSampler for Policy<'_> {
    fn act(
        &self,
        _: &Scenario,
        task: &Task,
        state: &WorldState,
        rng: &mut Rng,
    ) -> Result<(Vec<Vec2>, Vec<f64>)> {
        let graph = self.spec.observe(task, state);
        let (dists, _) = policy_dist(self.spec, self.params, &graph)?;
        if self.deterministic {
            let actions: Vec<Vec2> = dists.iter().map(|[x, y]| Vec2::new(x.mu, y.mu)).collect();
            let logps = dists
                .iter()
                .zip(&actions)
                .map(|([x, y], a)| Ok(x.logpdf(a.x)? + y.logpdf(a.y)?))
                .collect::<Result<Vec<f64>>>()?;
            return Ok((actions, logps));
        }
        policy_sample_logprob(&dists, rng)
    }
}

// ---------------------------------------------------------------------------
// Critic

/// Mean-pooled per-agent encoder followed by a scalar head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSpec {
    pub encoder: MlpSpec,
    pub head: MlpSpec,
    pub n_agents: usize,
    pub pos_scale: f64,
    pub v_max: f64,
}

pub const VALUE_FEATURES: usize = 7;

impl ValueSpec {
    pub fn new(scenario: &Scenario, hidden: usize, embed: usize) -> Self {
        Self {
            encoder: MlpSpec::new(VALUE_FEATURES, &[hidden], Activation::Tanh, embed),
            head: MlpSpec::new(embed, &[hidden], Activation::Tanh, 1),
            n_agents: scenario.n_agents(),
            pos_scale: 4.0,
            v_max: scenario.v_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.encoder.input != VALUE_FEATURES
            || self.head.input != self.encoder.output()
            || self.head.output() != 1
        {
            return Err(config("value network shapes are inconsistent"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }

    pub fn init(&self, rng: &mut Rng) -> ParamBlock {
        let e = self.encoder.init(rng);
        let h = self.head.init(rng);
        ParamBlock::concat(&[("encoder", &e), ("head", &h)])
    }

    fn features(&self, task: &Task, state: &WorldState, i: usize) -> [f64; VALUE_FEATURES] {
        let p = state.pos[i] / self.pos_scale;
        let g = (task.goals[i] - state.pos[i]) / self.pos_scale;
        let v = state.vel[i] / self.v_max;
        [
            p.x,
            p.y,
            g.x,
            g.y,
            v.x,
            v.y,
            if state.arrived[i] { 1.0 } else { 0.0 },
        ]
    }

    fn check(&self, params: &ParamBlock, state: &WorldState) -> Result<()> {
        if state.n() != self.n_agents {
            return Err(config(format!(
                "value network expects {} agents, got {}",
                self.n_agents,
                state.n()
            )));
        }
        if params.values.len() != self.param_count() {
            return Err(config("value parameters do not match the value spec"));
        }
        Ok(())
    }
}

fn pooled(
    spec: &ValueSpec,
    enc: &[f64],
    task: &Task,
    state: &WorldState,
) -> Result<(Vec<MlpTape>, Vec<f64>)> {
    let tapes = (0..state.n())
        .map(|i| mlp_forward_raw(enc, &spec.encoder, &spec.features(task, state, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut outs: Vec<&[f64]> = tapes.iter().map(|t| t.output()).collect();
    // Summing in a content-defined order makes pooling exactly permutation invariant.
    outs.sort_by(|a, b| {
        a.iter()
            .map(|v| v.to_bits())
            .cmp(b.iter().map(|v| v.to_bits()))
    });
    let mut pool = vec![0.0; spec.encoder.output()];
    for o in outs {
        for (p, v) in pool.iter_mut().zip(o) {
            *p += v;
        }
    }
    let inv = 1.0 / state.n() as f64;
    pool.iter_mut().for_each(|p| *p *= inv);
    Ok((tapes, pool))
}

pub fn value(
    spec: &ValueSpec,
    params: &ParamBlock,
    task: &Task,
    state: &WorldState,
) -> Result<f64> {
    spec.check(params, state)?;
    let (enc, head) = params.values.split_at(spec.encoder.param_count());
    let (_, pool) = pooled(spec, enc, task, state)?;
    Ok(mlp_forward_raw(head, &spec.head, &pool)?.output()[0])
}

/// Value and `upstream * dV/dparams`, accumulated into `grad`.
pub fn value_backward(
    spec: &ValueSpec,
    params: &ParamBlock,
    task: &Task,
    state: &WorldState,
    upstream: f64,
    grad: &mut ParamBlock,
) -> Result<f64> {
    spec.check(params, state)?;
    let split = spec.encoder.param_count();
    let (enc, head) = params.values.split_at(split);
    let (tapes, pool) = pooled(spec, enc, task, state)?;
    let head_tape = mlp_forward_raw(head, &spec.head, &pool)?;
    let v = head_tape.output()[0];
    let (genc, ghead) = grad.values.split_at_mut(split);
    let gpool = mlp_backward_raw(head, &spec.head, &head_tape, &[upstream], ghead)?;
    let inv = 1.0 / state.n() as f64;
    let per_agent: Vec<f64> = gpool.iter().map(|g| g * inv).collect();
    for t in &tapes {
        mlp_backward_raw(enc, &spec.encoder, t, &per_agent, genc)?;
    }
    Ok(v)
}
