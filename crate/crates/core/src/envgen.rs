//! Generative model over obstacle layouts conditioned on the navigation task.
//!
//! A ReLU trunk reads the flattened (starts, goals) and feeds one linear head
//! per obstacle template. Heads emit a truncated Gaussian per free continuous
//! parameter and two logits (absent, present) when presence is free, so every
//! sample lies in the feasible set by construction.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::{Categorical, GaussHead, TruncGauss};
use crate::error::{config, domain, Result};
use crate::net::{
    mlp_backward_raw, mlp_forward_raw, Activation, LayerSpec, LayoutEntry, MlpSpec, MlpTape,
    ParamBlock,
};
use crate::rng::Rng;
use crate::world::{
    ObstacleLayout, ObstacleTemplate, ParamKind, PlacedObstacle, Presence, Scenario, Shape, Task,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_agents: usize,
    /// All trunk layers use ReLU.
    pub trunk: Vec<usize>,
    /// Divides task coordinates before they enter the trunk.
    pub input_scale: f64,
    /// Raw output count of each template head; 0 for fully fixed templates.
    pub head_outputs: Vec<usize>,
}

impl GenSpec {
    pub fn new(scenario: &Scenario, trunk: &[usize]) -> Self {
        let a = scenario.arena;
        let input_scale = [a.xmin, a.xmax, a.ymin, a.ymax]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            n_agents: scenario.n_agents(),
            trunk: trunk.to_vec(),
            input_scale,
            head_outputs: scenario.obstacle_templates.iter().map(head_width).collect(),
        }
    }

    /// (32, 64, 32) trunk.
    pub fn standard(scenario: &Scenario) -> Self {
        Self::new(scenario, &[32, 64, 32])
    }

    pub fn input_width(&self) -> usize {
        4 * self.n_agents
    }

    pub fn feature_width(&self) -> usize {
        self.trunk.last().copied().unwrap_or(self.input_width())
    }

    fn trunk_spec(&self) -> Option<MlpSpec> {
        // Identity output layer; the ReLU on the last trunk layer is applied by hand.
        let (&last, hidden) = self.trunk.split_last()?;
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&w| LayerSpec {
                width: w,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec {
            width: last,
            activation: Activation::Identity,
        });
        Some(MlpSpec {
            input: self.input_width(),
            layers,
        })
    }

    fn head_spec(&self, j: usize) -> Option<MlpSpec> {
        let k = self.head_outputs[j];
        (k > 0).then(|| MlpSpec::new(self.feature_width(), &[], Activation::Identity, k))
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut out = Vec::new();
        if let Some(t) = self.trunk_spec() {
            out.extend(t.layout().into_iter().map(|e| LayoutEntry {
                name: format!("trunk.{}", e.name),
                shape: e.shape,
            }));
        }
        for j in 0..self.head_outputs.len() {
            if let Some(h) = self.head_spec(j) {
                out.extend(h.layout().into_iter().map(|e| LayoutEntry {
                    name: format!("head{j}.{}", e.name),
                    shape: e.shape,
                }));
            }
        }
        out
    }

    fn offsets(&self) -> (usize, Vec<usize>) {
        let trunk = self.trunk_spec().map_or(0, |t| t.param_count());
        let mut off = trunk;
        let heads = (0..self.head_outputs.len())
            .map(|j| {
                let o = off;
                off += self.head_spec(j).map_or(0, |h| h.param_count());
                o
            })
            .collect();
        (trunk, heads)
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayoutEntry::len).sum()
    }

    pub fn init(&self, rng: &mut Rng) -> ParamBlock {
        let mut values = Vec::with_capacity(self.param_count());
        if let Some(t) = self.trunk_spec() {
            values.extend(t.init(rng).values);
        }
        for j in 0..self.head_outputs.len() {
            if let Some(h) = self.head_spec(j) {
                values.extend(h.init(rng).values.into_iter().map(|v| 0.1 * v));
            }
        }
        ParamBlock {
            values,
            layout: self.layout(),
        }
    }

    fn check(&self, params: &ParamBlock, task: &Task, scenario: &Scenario) -> Result<()> {
        if task.n() != self.n_agents {
            return Err(config(format!(
                "generator expects {} agents, got {}",
                self.n_agents,
                task.n()
            )));
        }
        if params.values.len() != self.param_count() {
            return Err(config(
                "generator parameters do not match the generator spec",
            ));
        }
        if scenario.obstacle_templates.len() != self.head_outputs.len()
            || scenario
                .obstacle_templates
                .iter()
                .map(head_width)
                .ne(self.head_outputs.iter().copied())
        {
            return Err(config(
                "scenario templates do not match the generator heads",
            ));
        }
        Ok(())
    }
}

fn head_width(t: &ObstacleTemplate) -> usize {
    2 * t.free_params().len() + if t.presence_free() { 2 } else { 0 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateDist {
    /// Logit order is (absent, present).
    pub presence: Option<Categorical>,
    pub params: Vec<(ParamKind, TruncGauss)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutDistribution {
    pub templates: Vec<TemplateDist>,
}

pub struct GenTape {
    trunk: Option<MlpTape>,
    features: Vec<f64>,
    heads: Vec<Option<MlpTape>>,
}

pub fn gen_dist(
    spec: &GenSpec,
    params: &ParamBlock,
    scenario: &Scenario,
    task: &Task,
) -> Result<(LayoutDistribution, GenTape)> {
    spec.check(params, task, scenario)?;
    let input: Vec<f64> = task
        .flatten()
        .iter()
        .map(|v| v / spec.input_scale)
        .collect();
    let (trunk_n, head_off) = spec.offsets();
    let (trunk, features) = match spec.trunk_spec() {
        Some(t) => {
            let tape = mlp_forward_raw(&params.values[..trunk_n], &t, &input)?;
            let f = tape.output().iter().map(|v| v.max(0.0)).collect();
            (Some(tape), f)
        }
        None => (None, input),
    };
    let mut templates = Vec::with_capacity(spec.head_outputs.len());
    let mut heads = Vec::with_capacity(spec.head_outputs.len());
    for (j, tmpl) in scenario.obstacle_templates.iter().enumerate() {
        let Some(hs) = spec.head_spec(j) else {
            templates.push(TemplateDist {
                presence: None,
                params: Vec::new(),
            });
            heads.push(None);
            continue;
        };
        let p = &params.values[head_off[j]..head_off[j] + hs.param_count()];
        let tape = mlp_forward_raw(p, &hs, &features)?;
        let raw = tape.output();
        let free = tmpl.free_params();
        let mut dists = Vec::with_capacity(free.len());
        for (k, (kind, lo, hi)) in free.iter().enumerate() {
            dists.push((
                *kind,
                GaussHead::new(*lo, *hi).dist(raw[2 * k], raw[2 * k + 1])?,
            ));
        }
        let presence = if tmpl.presence_free() {
            let o = 2 * free.len();
            Some(Categorical::from_logits(&raw[o..o + 2])?)
        } else {
            None
        };
        templates.push(TemplateDist {
            presence,
            params: dists,
        });
        heads.push(Some(tape));
    }
    Ok((
        LayoutDistribution { templates },
        GenTape {
            trunk,
            features,
            heads,
        },
    ))
}

pub fn layout_sample_logprob(
    dist: &LayoutDistribution,
    scenario: &Scenario,
    rng: &mut Rng,
) -> Result<(ObstacleLayout, f64)> {
    let mut logp = 0.0;
    let mut obstacles = Vec::with_capacity(dist.templates.len());
    for (tmpl, td) in scenario.obstacle_templates.iter().zip(&dist.templates) {
        let present = match (&td.presence, tmpl.present) {
            (Some(c), _) => {
                let k = c.sample(rng);
                logp += c.logpmf(k)?;
                k == 1
            }
            (None, Presence::Fixed(p)) => p,
            (None, Presence::Free) => return Err(config("free presence without a presence head")),
        };
        let mut placed = fixed_part(tmpl, present);
        if present {
            for (kind, d) in &td.params {
                let v = d.sample(rng);
                logp += d.logpdf(v)?;
                set_param(&mut placed, *kind, v);
            }
        }
        obstacles.push(placed);
    }
    Ok((ObstacleLayout { obstacles }, logp))
}

fn fixed_part(t: &ObstacleTemplate, present: bool) -> PlacedObstacle {
    if !present {
        return PlacedObstacle {
            present: false,
            x: 0.0,
            y: 0.0,
            radius: None,
        };
    }
    PlacedObstacle {
        present,
        x: t.x.range().0,
        y: t.y.range().0,
        radius: match t.shape {
            Shape::Circle { radius } => Some(radius.range().0),
            Shape::Rect { .. } => None,
        },
    }
}

fn set_param(o: &mut PlacedObstacle, kind: ParamKind, v: f64) {
    match kind {
        ParamKind::X => o.x = v,
        ParamKind::Y => o.y = v,
        ParamKind::Radius => o.radius = Some(v),
    }
}

fn get_param(o: &PlacedObstacle, kind: ParamKind) -> f64 {
    match kind {
        ParamKind::X => o.x,
        ParamKind::Y => o.y,
        ParamKind::Radius => o.radius.unwrap_or(f64::NAN),
    }
}

pub fn gen_logprob(
    spec: &GenSpec,
    params: &ParamBlock,
    scenario: &Scenario,
    task: &Task,
    layout: &ObstacleLayout,
) -> Result<f64> {
    if layout.obstacles.len() != scenario.obstacle_templates.len() {
        return Err(domain("layout does not match the generator's templates"));
    }
    let (dist, tape) = gen_dist(spec, params, scenario, task)?;
    Ok(score_heads(scenario, &dist, &tape, layout)?.0)
}

/// Gradient of `log pi(layout | task)` with respect to all generator parameters.
pub fn gen_logprob_grad(
    spec: &GenSpec,
    params: &ParamBlock,
    scenario: &Scenario,
    task: &Task,
    layout: &ObstacleLayout,
) -> Result<(f64, ParamBlock)> {
    scenario.validate_layout(layout)?;
    let (dist, tape) = gen_dist(spec, params, scenario, task)?;
    let (logp, head_grads) = score_heads(scenario, &dist, &tape, layout)?;
    let mut grad = ParamBlock::zeros_like(params);
    let (trunk_n, head_off) = spec.offsets();
    let mut feat_grad = vec![0.0; tape.features.len()];
    for (j, (ht, up)) in tape.heads.iter().zip(&head_grads).enumerate() {
        let (Some(ht), Some(hs)) = (ht, spec.head_spec(j)) else {
            continue;
        };
        let n = hs.param_count();
        let p = &params.values[head_off[j]..head_off[j] + n];
        let gin = mlp_backward_raw(
            p,
            &hs,
            ht,
            up,
            &mut grad.values[head_off[j]..head_off[j] + n],
        )?;
        for (f, g) in feat_grad.iter_mut().zip(gin) {
            *f += g;
        }
    }
    if let (Some(tt), Some(ts)) = (&tape.trunk, spec.trunk_spec()) {
        for (g, pre) in feat_grad.iter_mut().zip(tt.output()) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        mlp_backward_raw(
            &params.values[..trunk_n],
            &ts,
            tt,
            &feat_grad,
            &mut grad.values[..trunk_n],
        )?;
    }
    Ok((logp, grad))
}

/// Log-probability of `layout` and the gradient on each head's raw outputs.
fn score_heads(
    scenario: &Scenario,
    dist: &LayoutDistribution,
    tape: &GenTape,
    layout: &ObstacleLayout,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut logp = 0.0;
    let mut grads = Vec::with_capacity(dist.templates.len());
    for ((tmpl, td), (o, ht)) in scenario
        .obstacle_templates
        .iter()
        .zip(&dist.templates)
        .zip(layout.obstacles.iter().zip(&tape.heads))
    {
        let Some(ht) = ht else {
            grads.push(Vec::new());
            continue;
        };
        let raw = ht.output();
        let mut g = vec![0.0; raw.len()];
        let free = tmpl.free_params();
        if let Some(c) = &td.presence {
            let k = usize::from(o.present);
            logp += c.logpmf(k)?;
            let off = 2 * free.len();
            g[off..off + 2].copy_from_slice(&c.grad_logits(k)?);
        }
        if o.present {
            for (k, ((kind, lo, hi), (_, d))) in free.iter().zip(&td.params).enumerate() {
                let v = get_param(o, *kind);
                logp += d.logpdf(v)?;
                let gr = GaussHead::new(*lo, *hi).grad_raw(raw[2 * k], raw[2 * k + 1], v)?;
                g[2 * k] = gr[0];
                g[2 * k + 1] = gr[1];
            }
        }
        grads.push(g);
    }
    Ok((logp, grads))
}

/// Agent count and template list a generator was built for.
pub fn schema_doc(scenario: &Scenario) -> serde_json::Value {
    serde_json::json!({
        "n_agents": scenario.n_agents(),
        "templates": scenario.obstacle_templates,
    })
}

pub fn schema_hash(scenario: &Scenario) -> String {
    hex::encode(Sha256::digest(schema_doc(scenario).to_string().as_bytes()))
}

/// Human-readable differences between two schema documents, `-` for the
/// expected side and `+` for the found side.
pub fn schema_diff(expected: &serde_json::Value, found: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    if expected["n_agents"] != found["n_agents"] {
        out.push(format!("- n_agents {}", expected["n_agents"]));
        out.push(format!("+ n_agents {}", found["n_agents"]));
    }
    let empty = Vec::new();
    let a = expected["templates"].as_array().unwrap_or(&empty);
    let b = found["templates"].as_array().unwrap_or(&empty);
    for i in 0..a.len().max(b.len()) {
        match (a.get(i), b.get(i)) {
            (Some(x), Some(y)) if x == y => {}
            (x, y) => {
                if let Some(x) = x {
                    out.push(format!("- templates[{i}] {x}"));
                }
                if let Some(y) = y {
                    out.push(format!("+ templates[{i}] {y}"));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub schema_hash: String,
    pub schema: serde_json::Value,
    pub spec: GenSpec,
    pub params: ParamBlock,
}

impl GeneratorCheckpoint {
    pub fn new(scenario: &Scenario, spec: GenSpec, params: ParamBlock) -> Self {
        Self {
            schema_hash: schema_hash(scenario),
            schema: schema_doc(scenario),
            spec,
            params,
        }
    }

    /// Refuses checkpoints built for a different template schema.
    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        let h = schema_hash(scenario);
        if h != self.schema_hash {
            let diff = schema_diff(&self.schema, &schema_doc(scenario));
            return Err(config(format!(
                "generator schema mismatch: checkpoint {} vs scenario '{}' {}\n{}",
                &self.schema_hash[..12],
                scenario.id,
                &h[..12],
                diff.join("\n")
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::rel_err;
    use crate::rng::seeded;
    use crate::world::{Bounds, Param};

    pub(crate) fn env1() -> Scenario {
        let mut sc: Scenario = serde_json::from_str(
            r#"{"id":"t","arena":{"xmin":-5,"xmax":5,"ymin":-6,"ymax":6},"starts":[[-4,-1],[-4,1]],"goals":[[4,1],[4,-1]]}"#,
        )
        .unwrap();
        sc.arena = Bounds {
            xmin: -5.0,
            xmax: 5.0,
            ymin: -6.0,
            ymax: 6.0,
        };
        sc.obstacle_templates = [-3.0, -1.0, 1.0, 3.0]
            .iter()
            .map(|&x| {
                ObstacleTemplate::rect(1.0, 4.0, Param::Fixed(x), Param::Free { lo: -4.0, hi: 4.0 })
            })
            .collect();
        sc
    }

    fn mixed() -> Scenario {
        let mut sc = env1();
        let mut c = ObstacleTemplate::circle(
            Param::Free { lo: 0.0, hi: 1.0 },
            Param::Free { lo: -2.0, hi: 2.0 },
            Param::Fixed(0.0),
        );
        c.present = Presence::Free;
        sc.obstacle_templates.push(c);
        sc.obstacle_templates.push(ObstacleTemplate::rect(
            1.0,
            1.0,
            Param::Fixed(0.0),
            Param::Fixed(5.0),
        ));
        sc
    }

    #[test]
    fn environment_one_heads() {
        let sc = env1();
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(0));
        let (d, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        assert_eq!(d.templates.len(), 4);
        for t in &d.templates {
            assert_eq!(t.params.len(), 1);
            assert_eq!(t.params[0].0, ParamKind::Y);
            assert_eq!((t.params[0].1.lo, t.params[0].1.hi), (-4.0, 4.0));
            assert!(t.presence.is_none());
        }
    }

    #[test]
    fn zero_heads_put_mean_at_midpoint() {
        let sc = mixed();
        let spec = GenSpec::standard(&sc);
        let mut params = spec.init(&mut seeded(0));
        let (trunk_n, _) = spec.offsets();
        params.values[trunk_n..].iter_mut().for_each(|v| *v = 0.0);
        let (d, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        for t in &d.templates {
            for (_, g) in &t.params {
                assert_eq!(g.mu, 0.5 * (g.lo + g.hi));
            }
        }
        let pres = d.templates[4].presence.as_ref().unwrap();
        assert_eq!(pres.probs(), vec![0.5, 0.5]);
    }

    #[test]
    fn distinct_tasks_give_distinct_distributions() {
        let sc = env1();
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(1));
        let mut t2 = sc.task();
        t2.starts[0].y = -2.5;
        let (a, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        let (b, _) = gen_dist(&spec, &params, &sc, &t2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn agent_count_mismatch_is_config_error() {
        let sc = env1();
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(1));
        let mut t = sc.task();
        t.starts.pop();
        t.goals.pop();
        assert!(matches!(
            gen_dist(&spec, &params, &sc, &t),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn all_fixed_templates_are_deterministic() {
        let mut sc = env1();
        for t in &mut sc.obstacle_templates {
            t.y = Param::Fixed(0.0);
        }
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(1));
        let (d, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        let (l1, lp1) = layout_sample_logprob(&d, &sc, &mut seeded(2)).unwrap();
        let (l2, lp2) = layout_sample_logprob(&d, &sc, &mut seeded(3)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!((lp1, lp2), (0.0, 0.0));
    }

    #[test]
    fn certain_presence_is_always_present() {
        let sc = mixed();
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(1));
        let (mut d, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        d.templates[4].presence = Some(Categorical::from_probs(&[0.0, 1.0]).unwrap());
        let mut rng = seeded(9);
        for _ in 0..200 {
            let (l, _) = layout_sample_logprob(&d, &sc, &mut rng).unwrap();
            assert!(l.obstacles[4].present);
        }
    }

    #[test]
    fn sampled_logprob_recomputes() {
        let sc = mixed();
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(4));
        let (d, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        let mut rng = seeded(5);
        for _ in 0..100 {
            let (l, lp) = layout_sample_logprob(&d, &sc, &mut rng).unwrap();
            assert!(sc.validate_layout(&l).is_ok());
            let re = gen_logprob(&spec, &params, &sc, &sc.task(), &l).unwrap();
            assert!((lp - re).abs() < 1e-12);
            let (lp2, _) = gen_logprob_grad(&spec, &params, &sc, &sc.task(), &l).unwrap();
            assert!((lp - lp2).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_layout_is_domain_error() {
        let sc = env1();
        let spec = GenSpec::standard(&sc);
        let params = spec.init(&mut seeded(4));
        let mut l = sc.midpoint_layout();
        l.obstacles[0].y = 4.5;
        assert!(matches!(
            gen_logprob_grad(&spec, &params, &sc, &sc.task(), &l),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn symmetric_point_gives_zero_head_gradient() {
        let sc = mixed();
        let spec = GenSpec::standard(&sc);
        let mut params = spec.init(&mut seeded(0));
        let (trunk_n, _) = spec.offsets();
        params.values[trunk_n..].iter_mut().for_each(|v| *v = 0.0);
        let (d, tape) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
        let mut l = sc.midpoint_layout();
        l.obstacles[4].present = true;
        let (_, g) = score_heads(&sc, &d, &tape, &l).unwrap();
        // x at the symmetric mean: zero mu-gradient for every continuous head.
        for gj in &g[..4] {
            assert_eq!(gj[0], 0.0);
        }
        assert_eq!(g[4][0], 0.0);
        // Uniform presence scores +-0.5, never zero, so only the mean entries vanish.
        assert_eq!(&g[4][4..], &[-0.5, 0.5]);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let sc = mixed();
        let spec = GenSpec::new(&sc, &[8, 6]);
        for seed in 0..4 {
            let params = spec.init(&mut seeded(20 + seed));
            let (d, _) = gen_dist(&spec, &params, &sc, &sc.task()).unwrap();
            let (l, _) = layout_sample_logprob(&d, &sc, &mut seeded(seed)).unwrap();
            let (_, g) = gen_logprob_grad(&spec, &params, &sc, &sc.task(), &l).unwrap();
            let h = 1e-5;
            for k in 0..params.len() {
                let mut a = params.clone();
                let mut b = params.clone();
                a.values[k] += h;
                b.values[k] -= h;
                let fa = gen_logprob(&spec, &a, &sc, &sc.task(), &l).unwrap();
                let fb = gen_logprob(&spec, &b, &sc, &sc.task(), &l).unwrap();
                let num = (fa - fb) / (2.0 * h);
                assert!(
                    rel_err(g.values[k], num) < 1e-4 || (g.values[k] - num).abs() < 1e-9,
                    "param {k}: {} vs {num}",
                    g.values[k]
                );
            }
        }
    }

    #[test]
    fn checkpoint_refuses_other_schema() {
        let sc = env1();
        let spec = GenSpec::standard(&sc);
        let ck = GeneratorCheckpoint::new(&sc, spec.clone(), spec.init(&mut seeded(0)));
        assert!(ck.check_scenario(&sc).is_ok());
        assert!(ck.check_scenario(&mixed()).is_err());
        let text = serde_json::to_string(&ck).unwrap();
        let back: GeneratorCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
    }
}
