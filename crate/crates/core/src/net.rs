//! Small differentiable function approximators.
//!
//! Multilayer perceptrons and a single message-passing GNN layer built from
//! two of them, each with a hand-written reverse pass. Parameters live in a
//! flat [`ParamBlock`] whose layout names every weight matrix and bias.

use std::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, numeric, Error, Result};
use crate::rng::Rng;

pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with named layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamBlockFile {
    version: u32,
    layout: Vec<LayoutEntry>,
    values: Vec<f64>,
}

impl Serialize for ParamBlock {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamBlockFile {
            version: PARAM_FORMAT_VERSION,
            layout: self.layout.clone(),
            values: self.values.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamBlock {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = ParamBlockFile::deserialize(d)?;
        if file.version != PARAM_FORMAT_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported parameter format version {}",
                file.version
            )));
        }
        ParamBlock::new(file.values, file.layout).map_err(serde::de::Error::custom)
    }
}

impl ParamBlock {
    pub fn new(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayoutEntry::len).sum();
        if expected != values.len() {
            return Err(config(format!(
                "layout describes {expected} values but block holds {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(numeric("parameter block contains non-finite values"));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<LayoutEntry>) -> Self {
        let n = layout.iter().map(LayoutEntry::len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(other: &ParamBlock) -> Self {
        Self::zeros(other.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamBlock) -> bool {
        self.layout == other.layout
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ParamBlock) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(config("axpy between blocks of different size"));
        }
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    /// Concatenates blocks, prefixing each layout entry with its block name.
    pub fn concat(parts: &[(&str, &ParamBlock)]) -> ParamBlock {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (prefix, block) in parts {
            values.extend_from_slice(&block.values);
            layout.extend(block.layout.iter().map(|e| LayoutEntry {
                name: format!("{prefix}.{}", e.name),
                shape: e.shape.clone(),
            }));
        }
        ParamBlock { values, layout }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation and the activation value.
    /// Relu uses 0 at exactly 0.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Hidden layers share `hidden_activation`; the output layer is linear.
    pub fn new(
        input: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        output: usize,
    ) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec {
                width,
                activation: hidden_activation,
            })
            .collect();
        layers.push(LayerSpec {
            width: output,
            activation: Activation::Identity,
        });
        Self { input, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(config("mlp needs at least one layer"));
        }
        if self.input == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(config("mlp widths must be positive"));
        }
        if self.layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(config("mlp output layer must be linear"));
        }
        Ok(())
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    fn fan_ins(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.input).chain(self.layers.iter().map(|l| l.width))
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, (layer, fan_in)) in self.layers.iter().zip(self.fan_ins()).enumerate() {
            out.push(LayoutEntry::new(
                format!("l{i}.weight"),
                &[layer.width, fan_in],
            ));
            out.push(LayoutEntry::new(format!("l{i}.bias"), &[layer.width]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .zip(self.fan_ins())
            .map(|(l, fan_in)| l.width * (fan_in + 1))
            .sum()
    }

    /// Uniform(-s, s) weights and biases with s = 1/sqrt(fan_in).
    pub fn init(&self, rng: &mut Rng) -> ParamBlock {
        let mut values = Vec::with_capacity(self.param_count());
        for (layer, fan_in) in self.layers.iter().zip(self.fan_ins()) {
            let s = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..layer.width * (fan_in + 1) {
                values.push(rng.random_range(-s..s));
            }
        }
        ParamBlock {
            values,
            layout: self.layout(),
        }
    }

    pub fn zeros(&self) -> ParamBlock {
        ParamBlock::zeros(self.layout())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(config(format!(
                "mlp expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }
}

/// Activations cached by a forward pass, consumed by the matching backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&[], |v| v.as_slice())
    }
}

pub(crate) fn mlp_forward_raw(params: &[f64], spec: &MlpSpec, input: &[f64]) -> Result<MlpTape> {
    if input.len() != spec.input {
        return Err(config(format!(
            "mlp input width {} != {}",
            input.len(),
            spec.input
        )));
    }
    spec.check_params(params)?;
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(spec.layers.len());
    let mut offset = 0;
    for (li, layer) in spec.layers.iter().enumerate() {
        let x: &[f64] = if li == 0 { input } else { &post[li - 1] };
        let fan_in = x.len();
        let w = &params[offset..offset + layer.width * fan_in];
        let b = &params[offset + layer.width * fan_in..offset + layer.width * (fan_in + 1)];
        offset += layer.width * (fan_in + 1);
        let z: Vec<f64> = w
            .chunks_exact(fan_in)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
        pre.push(z);
        post.push(a);
    }
    if post
        .last()
        .is_some_and(|o| o.iter().any(|v| !v.is_finite()))
    {
        return Err(numeric("mlp produced a non-finite output"));
    }
    Ok(MlpTape {
        input: input.to_vec(),
        pre,
        post,
    })
}

/// Accumulates the parameter gradient into `grad` and returns the input gradient.
pub(crate) fn mlp_backward_raw(
    params: &[f64],
    spec: &MlpSpec,
    tape: &MlpTape,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    if grad.len() != params.len() {
        return Err(config("gradient buffer does not match parameters"));
    }
    if tape.pre.len() != spec.layers.len()
        || tape.input.len() != spec.input
        || tape
            .pre
            .iter()
            .zip(&spec.layers)
            .any(|(z, l)| z.len() != l.width)
    {
        return Err(Error::Usage("tape was not produced by this network".into()));
    }
    if upstream.len() != spec.output() {
        return Err(config(format!(
            "upstream width {} != output width {}",
            upstream.len(),
            spec.output()
        )));
    }
    let mut offsets = Vec::with_capacity(spec.layers.len());
    let mut offset = 0;
    for (layer, fan_in) in spec.layers.iter().zip(spec.fan_ins()) {
        offsets.push(offset);
        offset += layer.width * (fan_in + 1);
    }
    let mut delta: Vec<f64> = upstream.to_vec();
    for li in (0..spec.layers.len()).rev() {
        let layer = spec.layers[li];
        for (d, (z, a)) in delta
            .iter_mut()
            .zip(tape.pre[li].iter().zip(&tape.post[li]))
        {
            *d *= layer.activation.derivative(*z, *a);
        }
        let x: &[f64] = if li == 0 {
            &tape.input
        } else {
            &tape.post[li - 1]
        };
        let fan_in = x.len();
        let off = offsets[li];
        let (gw, gb) =
            grad[off..off + layer.width * (fan_in + 1)].split_at_mut(layer.width * fan_in);
        let w = &params[off..off + layer.width * fan_in];
        let mut next = vec![0.0; fan_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                grow[i] += d * x[i];
                next[i] += d * row[i];
            }
        }
        delta = next;
    }
    Ok(delta)
}

pub fn mlp_forward(
    params: &ParamBlock,
    spec: &MlpSpec,
    input: &[f64],
) -> Result<(Vec<f64>, MlpTape)> {
    spec.validate()?;
    if params.layout != spec.layout() {
        return Err(config("parameter layout does not match mlp spec"));
    }
    let tape = mlp_forward_raw(&params.values, spec, input)?;
    Ok((tape.output().to_vec(), tape))
}

/// Consumes the tape: a second backward call against the same forward pass
/// does not compile.
///
/// ```compile_fail
/// use coopt_core::net::*;
/// use coopt_core::rng::seeded;
/// let spec = MlpSpec::new(2, &[3], Activation::Tanh, 1);
/// let p = spec.init(&mut seeded(0));
/// let (_, tape) = mlp_forward(&p, &spec, &[0.1, 0.2]).unwrap();
/// let _ = mlp_backward(&p, &spec, tape, &[1.0]);
/// let _ = mlp_backward(&p, &spec, tape, &[1.0]);
/// ```
pub fn mlp_backward(
    params: &ParamBlock,
    spec: &MlpSpec,
    tape: MlpTape,
    upstream: &[f64],
) -> Result<(ParamBlock, Vec<f64>)> {
    if params.layout != spec.layout() {
        return Err(config("parameter layout does not match mlp spec"));
    }
    let mut grad = ParamBlock::zeros_like(params);
    let input_grad = mlp_backward_raw(&params.values, spec, &tape, upstream, &mut grad.values)?;
    Ok((grad, input_grad))
}

// ---------------------------------------------------------------------------
// GNN

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnSpec {
    pub node_dim: usize,
    pub message: MlpSpec,
    pub update: MlpSpec,
}

impl GnnSpec {
    pub fn new(
        node_dim: usize,
        message_hidden: &[usize],
        message_out: usize,
        update_hidden: &[usize],
        output: usize,
        activation: Activation,
    ) -> Self {
        Self {
            node_dim,
            message: MlpSpec::new(2 * node_dim + 1, message_hidden, activation, message_out),
            update: MlpSpec::new(node_dim + message_out, update_hidden, activation, output),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.message.validate()?;
        self.update.validate()?;
        if self.message.input != 2 * self.node_dim + 1 {
            return Err(config("message mlp input must be 2 * node_dim + 1"));
        }
        if self.update.input != self.node_dim + self.message.output() {
            return Err(config("update mlp input must be node_dim + message width"));
        }
        Ok(())
    }

    pub fn output(&self) -> usize {
        self.update.output()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let m = self.message.layout().into_iter().map(|e| LayoutEntry {
            name: format!("message.{}", e.name),
            shape: e.shape,
        });
        let u = self.update.layout().into_iter().map(|e| LayoutEntry {
            name: format!("update.{}", e.name),
            shape: e.shape,
        });
        m.chain(u).collect()
    }

    pub fn param_count(&self) -> usize {
        self.message.param_count() + self.update.param_count()
    }

    pub fn init(&self, rng: &mut Rng) -> ParamBlock {
        let m = self.message.init(rng);
        let u = self.update.init(rng);
        ParamBlock::concat(&[("message", &m), ("update", &u)])
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        params.split_at(self.message.param_count())
    }
}

/// Signal node `to` receives from neighbor `from`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSignal {
    pub from: usize,
    /// Support-matrix entry for the edge.
    pub support: f64,
    /// Neighbor signal as seen by the receiver; same width as node states.
    pub signal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSignal {
    pub nodes: Vec<Vec<f64>>,
    /// Incoming edges per receiving node.
    pub edges: Vec<Vec<EdgeSignal>>,
}

impl GraphSignal {
    /// Neighbors send their own node state with binary support.
    pub fn absolute(nodes: Vec<Vec<f64>>, neighbors: &[Vec<usize>]) -> Self {
        let edges = neighbors
            .iter()
            .map(|list| {
                list.iter()
                    .map(|&j| EdgeSignal {
                        from: j,
                        support: 1.0,
                        signal: nodes.get(j).cloned().unwrap_or_default(),
                    })
                    .collect()
            })
            .collect();
        Self { nodes, edges }
    }

    pub fn validate(&self, node_dim: usize) -> Result<()> {
        let n = self.nodes.len();
        if self.edges.len() != n {
            return Err(config("edge lists must match node count"));
        }
        if self.nodes.iter().any(|x| x.len() != node_dim) {
            return Err(config(format!("node states must have width {node_dim}")));
        }
        for (i, list) in self.edges.iter().enumerate() {
            for e in list {
                if e.from >= n {
                    return Err(config(format!(
                        "node {i} references neighbor {} outside 0..{n}",
                        e.from
                    )));
                }
                if e.from == i {
                    return Err(config(format!("node {i} lists itself as neighbor")));
                }
                if e.signal.len() != node_dim {
                    return Err(config("edge signal width must equal node width"));
                }
                if !self.edges[e.from].iter().any(|b| b.from == i) {
                    return Err(config(format!(
                        "edge {} -> {i} has no reverse edge",
                        e.from
                    )));
                }
            }
        }
        Ok(())
    }
}

fn cmp_bits(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .map(|v| v.to_bits())
        .cmp(b.iter().map(|v| v.to_bits()))
}

#[derive(Clone, Debug)]
struct NodeTape {
    /// Message tapes in canonical (label-free) edge order.
    messages: Vec<MlpTape>,
    update: MlpTape,
}

#[derive(Clone, Debug)]
pub struct GnnTape {
    nodes: Vec<NodeTape>,
}

/// Node-local evaluation: output of node `i` from its state and incoming edges.
fn gnn_node(
    spec: &GnnSpec,
    mparams: &[f64],
    uparams: &[f64],
    state: &[f64],
    edges: &[EdgeSignal],
) -> Result<NodeTape> {
    let mut order: Vec<&EdgeSignal> = edges.iter().collect();
    // Canonical summation order keeps outputs bitwise invariant under relabeling.
    order.sort_by(|a, b| {
        cmp_bits(&a.signal, &b.signal).then(a.support.to_bits().cmp(&b.support.to_bits()))
    });
    let mut agg = vec![0.0; spec.message.output()];
    let mut messages = Vec::with_capacity(order.len());
    let mut input = Vec::with_capacity(spec.message.input);
    for e in order {
        input.clear();
        input.extend_from_slice(state);
        input.extend_from_slice(&e.signal);
        input.push(e.support);
        let tape = mlp_forward_raw(mparams, &spec.message, &input)?;
        for (s, m) in agg.iter_mut().zip(tape.output()) {
            *s += m;
        }
        messages.push(tape);
    }
    let mut uin = Vec::with_capacity(spec.update.input);
    uin.extend_from_slice(state);
    uin.extend_from_slice(&agg);
    let update = mlp_forward_raw(uparams, &spec.update, &uin)?;
    Ok(NodeTape { messages, update })
}

pub fn gnn_forward(
    params: &ParamBlock,
    spec: &GnnSpec,
    graph: &GraphSignal,
) -> Result<(Vec<Vec<f64>>, GnnTape)> {
    spec.validate()?;
    if params.values.len() != spec.param_count() {
        return Err(config("parameter count does not match gnn spec"));
    }
    graph.validate(spec.node_dim)?;
    let (mp, up) = spec.split(&params.values);
    let nodes = graph
        .nodes
        .iter()
        .zip(&graph.edges)
        .map(|(x, edges)| gnn_node(spec, mp, up, x, edges))
        .collect::<Result<Vec<_>>>()?;
    let outputs = nodes.iter().map(|t| t.update.output().to_vec()).collect();
    Ok((outputs, GnnTape { nodes }))
}

/// Evaluates a single node using only its own state and incoming edges.
pub fn gnn_forward_node(
    params: &ParamBlock,
    spec: &GnnSpec,
    state: &[f64],
    edges: &[EdgeSignal],
) -> Result<Vec<f64>> {
    let (mp, up) = spec.split(&params.values);
    Ok(gnn_node(spec, mp, up, state, edges)?
        .update
        .output()
        .to_vec())
}

pub(crate) fn gnn_backward_raw(
    params: &[f64],
    spec: &GnnSpec,
    tape: &GnnTape,
    upstream: &[Vec<f64>],
    grad: &mut [f64],
) -> Result<()> {
    if upstream.len() != tape.nodes.len() {
        return Err(config("upstream must have one entry per node"));
    }
    let (mp, up) = spec.split(params);
    let (gm, gu) = grad.split_at_mut(spec.message.param_count());
    // Nodes are visited in an order determined by their content, so the
    // floating-point accumulation does not depend on node labels.
    let mut order: Vec<usize> = (0..tape.nodes.len()).collect();
    let key = |i: usize| (&upstream[i], &tape.nodes[i]);
    order.sort_by(|&a, &b| {
        let (ua, ta) = key(a);
        let (ub, tb) = key(b);
        cmp_bits(ua, ub)
            .then_with(|| cmp_bits(&ta.update.input, &tb.update.input))
            .then_with(|| {
                let ea = ta
                    .messages
                    .iter()
                    .flat_map(|m| m.input.iter().map(|v| v.to_bits()));
                let eb = tb
                    .messages
                    .iter()
                    .flat_map(|m| m.input.iter().map(|v| v.to_bits()));
                ea.cmp(eb)
            })
    });
    let node_dim = spec.node_dim;
    for i in order {
        let node = &tape.nodes[i];
        if upstream[i].iter().all(|&u| u == 0.0) {
            continue;
        }
        let gin = mlp_backward_raw(up, &spec.update, &node.update, &upstream[i], gu)?;
        let agg_grad = &gin[node_dim..];
        for m in &node.messages {
            mlp_backward_raw(mp, &spec.message, m, agg_grad, gm)?;
        }
    }
    Ok(())
}

/// Parameter gradient accumulated over all nodes and edges.
pub fn gnn_backward(
    params: &ParamBlock,
    spec: &GnnSpec,
    tape: GnnTape,
    upstream: &[Vec<f64>],
) -> Result<ParamBlock> {
    if params.values.len() != spec.param_count() {
        return Err(config("parameter count does not match gnn spec"));
    }
    if upstream.iter().any(|u| u.len() != spec.output()) {
        return Err(config("upstream width must equal gnn output width"));
    }
    let mut grad = ParamBlock::zeros_like(params);
    gnn_backward_raw(&params.values, spec, &tape, upstream, &mut grad.values)?;
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// In-place descent step on raw slices.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], hyper: &AdamHyper) -> Result<()> {
        if params.len() != grad.len() || self.m.len() != grad.len() {
            return Err(config("adam step with mismatched shapes"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(numeric("non-finite gradient passed to adam"));
        }
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = hyper.beta1 * self.m[i] + (1.0 - hyper.beta1) * g;
            self.v[i] = hyper.beta2 * self.v[i] + (1.0 - hyper.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
        Ok(())
    }
}

/// One Adam descent step; pure in its inputs.
pub fn adam_step(
    params: &ParamBlock,
    grad: &ParamBlock,
    state: &AdamState,
    hyper: &AdamHyper,
) -> Result<(ParamBlock, AdamState)> {
    if !params.same_layout(grad) {
        return Err(config("gradient layout does not match parameters"));
    }
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p.values, &grad.values, hyper)?;
    Ok((p, s))
}
