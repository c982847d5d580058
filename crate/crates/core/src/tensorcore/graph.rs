use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels;
use super::{Shape4, Tensor4};
use crate::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

/// How a resize node picks its output size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeTarget {
    Fixed { h: usize, w: usize },
    /// Match the spatial size of the node's second input (no gradient flows there).
    LikeSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input { channels: usize },
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    Maxpool2x2,
    Deconv2x2 { in_channels: usize, out_channels: usize },
    AddSkip,
    ResizeBilinear { target: ResizeTarget },
    ConcatChannels,
    /// Identity forward, zero backward.
    Detach,
    /// Reduce to a (1,1,1,1) scalar.
    Sum,
    Mean,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 { .. } | LayerKind::Deconv2x2 { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Weight then bias, for kinds that carry parameters.
    pub params: Vec<ParamId>,
    /// Output channel count, fixed at construction.
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Shape4,
    pub frozen: bool,
}

/// Serializable description of a graph without parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamInfo>,
}

/// A static DAG of layers. Nodes are stored in topological order: every
/// input edge points at an earlier node.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Tensor4>,
    info: Vec<ParamInfo>,
}

/// Every node's output from one forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    values: Vec<Tensor4>,
}

impl Activations {
    pub fn get(&self, id: NodeId) -> &Tensor4 {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradient registry produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor4>,
    nodes: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> &Tensor4 {
        &self.params[id]
    }

    /// Gradient with respect to a node output, if any reached it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor4> {
        self.nodes.get(id).and_then(Option::as_ref)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            info: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Tensor4] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape().len()).sum()
    }

    pub fn freeze_all(&mut self) {
        self.info.iter_mut().for_each(|p| p.frozen = true);
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::Graph(format!("no node named `{name}`")))
    }

    pub fn topology(&self) -> Topology {
        Topology {
            nodes: self.nodes.clone(),
            params: self.info.clone(),
        }
    }

    /// Rebuild a graph from a topology and matching parameter values.
    pub fn from_parts(topology: Topology, params: Vec<Tensor4>) -> Result<Self> {
        if topology.params.len() != params.len() {
            return Err(Error::Graph(format!(
                "{} parameter buffers for {} registry entries",
                params.len(),
                topology.params.len()
            )));
        }
        for (info, p) in topology.params.iter().zip(&params) {
            p.expect_shape(info.shape, &info.name)?;
        }
        let mut g = Graph::new();
        g.info = topology.params;
        g.params = params;
        for node in topology.nodes {
            g.validate_push(&node)?;
            g.nodes.push(node);
        }
        Ok(g)
    }

    fn validate_push(&self, node: &Node) -> Result<()> {
        if self.nodes.iter().any(|n| n.name == node.name) {
            return Err(Error::Graph(format!("duplicate node name `{}`", node.name)));
        }
        if let Some(&bad) = node.inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Graph(format!(
                "node `{}` references node {bad} which is not earlier in the graph",
                node.name
            )));
        }
        if let Some(&bad) = node.params.iter().find(|&&p| p >= self.params.len()) {
            return Err(Error::Graph(format!("node `{}` references missing parameter {bad}", node.name)));
        }
        let arity = match node.kind {
            LayerKind::Input { .. } => 0,
            LayerKind::AddSkip => 2,
            LayerKind::ResizeBilinear {
                target: ResizeTarget::LikeSecond,
            } => 2,
            LayerKind::ConcatChannels => node.inputs.len().max(1),
            _ => 1,
        };
        if node.inputs.len() != arity {
            return Err(Error::Graph(format!(
                "node `{}` expects {arity} inputs, got {}",
                node.name,
                node.inputs.len()
            )));
        }
        let in_ch: Vec<usize> = node.inputs.iter().map(|&i| self.nodes[i].channels).collect();
        let expected = match &node.kind {
            LayerKind::Input { channels } => *channels,
            LayerKind::Conv3x3 { in_channels, out_channels }
            | LayerKind::Deconv2x2 { in_channels, out_channels } => {
                if in_ch[0] != *in_channels {
                    return Err(Error::shape(
                        &node.name,
                        format!("expects {in_channels} input channels, upstream has {}", in_ch[0]),
                    ));
                }
                *out_channels
            }
            LayerKind::AddSkip => {
                if in_ch[0] != in_ch[1] {
                    return Err(Error::shape(
                        &node.name,
                        format!("adding {} and {} channels", in_ch[0], in_ch[1]),
                    ));
                }
                in_ch[0]
            }
            LayerKind::ConcatChannels => in_ch.iter().sum(),
            LayerKind::Sum | LayerKind::Mean => 1,
            _ => in_ch[0],
        };
        if expected != node.channels {
            return Err(Error::shape(
                &node.name,
                format!("declared {} output channels, kind implies {expected}", node.channels),
            ));
        }
        Ok(())
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<NodeId>, params: Vec<ParamId>) -> Result<NodeId> {
        let in_ch: Vec<usize> = inputs
            .iter()
            .map(|&i| self.nodes.get(i).map_or(0, |n| n.channels))
            .collect();
        let channels = match &kind {
            LayerKind::Input { channels } => *channels,
            LayerKind::Conv3x3 { out_channels, .. } | LayerKind::Deconv2x2 { out_channels, .. } => *out_channels,
            LayerKind::ConcatChannels => in_ch.iter().sum(),
            LayerKind::Sum | LayerKind::Mean => 1,
            _ => in_ch.first().copied().unwrap_or(0),
        };
        let node = Node {
            name: name.to_string(),
            kind,
            inputs,
            params,
            channels,
        };
        self.validate_push(&node)?;
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    fn add_param(&mut self, name: String, value: Tensor4) -> ParamId {
        self.info.push(ParamInfo {
            name,
            shape: value.shape(),
            frozen: false,
        });
        self.params.push(value);
        self.params.len() - 1
    }

    fn he_weights<R: Rng>(shape: Shape4, fan_in: usize, rng: &mut R) -> Tensor4 {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor4::from_fn(shape, |_, _, _, _| normal.sample(rng))
    }

    pub fn input(&mut self, name: &str, channels: usize) -> Result<NodeId> {
        self.push(name, LayerKind::Input { channels }, vec![], vec![])
    }

    /// 3x3 convolution with He-initialized weights and zero bias.
    pub fn conv3x3<R: Rng>(&mut self, name: &str, x: NodeId, out_channels: usize, rng: &mut R) -> Result<NodeId> {
        let in_channels = self.channels_of(x)?;
        let w = Self::he_weights(Shape4::new(out_channels, in_channels, 3, 3), in_channels * 9, rng);
        let wid = self.add_param(format!("{name}.weight"), w);
        let bid = self.add_param(format!("{name}.bias"), Tensor4::zeros(Shape4::new(1, out_channels, 1, 1)));
        self.push(
            name,
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            },
            vec![x],
            vec![wid, bid],
        )
    }

    pub fn deconv2x2<R: Rng>(&mut self, name: &str, x: NodeId, out_channels: usize, rng: &mut R) -> Result<NodeId> {
        let in_channels = self.channels_of(x)?;
        let w = Self::he_weights(Shape4::new(out_channels, in_channels, 2, 2), in_channels, rng);
        let wid = self.add_param(format!("{name}.weight"), w);
        let bid = self.add_param(format!("{name}.bias"), Tensor4::zeros(Shape4::new(1, out_channels, 1, 1)));
        self.push(
            name,
            LayerKind::Deconv2x2 {
                in_channels,
                out_channels,
            },
            vec![x],
            vec![wid, bid],
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, LayerKind::Relu, vec![x], vec![])
    }

    pub fn maxpool2x2(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, LayerKind::Maxpool2x2, vec![x], vec![])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name, LayerKind::AddSkip, vec![a, b], vec![])
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        self.push(name, LayerKind::ConcatChannels, parts.to_vec(), vec![])
    }

    pub fn resize_fixed(&mut self, name: &str, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.push(
            name,
            LayerKind::ResizeBilinear {
                target: ResizeTarget::Fixed { h, w },
            },
            vec![x],
            vec![],
        )
    }

    pub fn resize_like(&mut self, name: &str, x: NodeId, like: NodeId) -> Result<NodeId> {
        self.push(
            name,
            LayerKind::ResizeBilinear {
                target: ResizeTarget::LikeSecond,
            },
            vec![x, like],
            vec![],
        )
    }

    pub fn detach(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, LayerKind::Detach, vec![x], vec![])
    }

    pub fn sum(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, LayerKind::Sum, vec![x], vec![])
    }

    pub fn mean(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, LayerKind::Mean, vec![x], vec![])
    }

    pub fn channels_of(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .get(id)
            .map(|n| n.channels)
            .ok_or_else(|| Error::Graph(format!("no node with id {id}")))
    }

    /// Evaluate every node. Inputs are matched to `Input` nodes by name.
    pub fn forward(&self, inputs: &[(&str, &Tensor4)]) -> Result<Activations> {
        let mut values: Vec<Tensor4> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |k: usize| &values[node.inputs[k]];
            let out = match &node.kind {
                LayerKind::Input { channels } => {
                    let t = inputs
                        .iter()
                        .find(|(n, _)| *n == node.name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::Graph(format!("missing input `{}`", node.name)))?;
                    if t.shape().c != *channels {
                        return Err(Error::shape(
                            &node.name,
                            format!("input has {} channels, expected {channels}", t.shape().c),
                        ));
                    }
                    t.clone()
                }
                LayerKind::Conv3x3 { in_channels, .. } => {
                    let x = arg(0);
                    check_channels(node, x, *in_channels)?;
                    kernels::conv3x3_forward(x, &self.params[node.params[0]], &self.params[node.params[1]])
                }
                LayerKind::Deconv2x2 { in_channels, .. } => {
                    let x = arg(0);
                    check_channels(node, x, *in_channels)?;
                    kernels::deconv2x2_forward(x, &self.params[node.params[0]], &self.params[node.params[1]])
                }
                LayerKind::Relu | LayerKind::Detach => {
                    let x = arg(0);
                    if node.kind == LayerKind::Relu {
                        x.map(|v| v.max(0.0))
                    } else {
                        x.clone()
                    }
                }
                LayerKind::Maxpool2x2 => {
                    let x = arg(0);
                    if x.shape().h < 2 || x.shape().w < 2 {
                        return Err(Error::shape(&node.name, format!("cannot pool {}", x.shape())));
                    }
                    kernels::maxpool2x2_forward(x)
                }
                LayerKind::AddSkip => {
                    let (a, b) = (arg(0), arg(1));
                    a.expect_shape(b.shape(), &node.name)?;
                    a.zip_map(b, |p, q| p + q)?
                }
                LayerKind::ConcatChannels => {
                    let parts: Vec<&Tensor4> = node.inputs.iter().map(|&i| &values[i]).collect();
                    Tensor4::concat_channels(&parts).map_err(|e| Error::shape(&node.name, e.to_string()))?
                }
                LayerKind::ResizeBilinear { target } => {
                    let (h, w) = match target {
                        ResizeTarget::Fixed { h, w } => (*h, *w),
                        ResizeTarget::LikeSecond => (arg(1).shape().h, arg(1).shape().w),
                    };
                    if h == 0 || w == 0 {
                        return Err(Error::shape(&node.name, "resize to an empty size"));
                    }
                    let x = arg(0);
                    if x.shape().n != 0 && (x.shape().h == 0 || x.shape().w == 0) {
                        return Err(Error::shape(&node.name, "resize of an empty tensor"));
                    }
                    kernels::resize_bilinear(x, h, w)
                }
                LayerKind::Sum => Tensor4::scalar(arg(0).sum()),
                LayerKind::Mean => Tensor4::scalar(arg(0).mean()),
            };
            if !out.all_finite() {
                return Err(Error::NonFinite(node.name.clone()));
            }
            values.push(out);
        }
        Ok(Activations { values })
    }

    fn check_activations(&self, acts: &Activations) -> Result<()> {
        if acts.values.len() != self.nodes.len() {
            return Err(Error::Graph(format!(
                "activations hold {} nodes but the graph has {}; run forward on this graph first",
                acts.values.len(),
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Reverse-mode pass from a scalar loss node.
    pub fn backward(&self, acts: &Activations, loss: NodeId) -> Result<Gradients> {
        self.check_activations(acts)?;
        let node = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::Graph(format!("no node with id {loss}")))?;
        if acts.get(loss).shape() != Shape4::scalar() {
            return Err(Error::shape(
                &node.name,
                format!("loss must be scalar, got {}", acts.get(loss).shape()),
            ));
        }
        self.backward_seeded(acts, &[(loss, Tensor4::scalar(1.0))])
    }

    /// Reverse-mode pass from arbitrary upstream gradients on any nodes.
    pub fn backward_seeded(&self, acts: &Activations, seeds: &[(NodeId, Tensor4)]) -> Result<Gradients> {
        self.check_activations(acts)?;
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(*id)
                .ok_or_else(|| Error::Graph(format!("no node with id {id}")))?;
            g.expect_shape(acts.get(*id).shape(), &node.name)?;
            accumulate(&mut grads[*id], g.clone());
            last = last.max(*id);
        }
        let mut pgrads: Vec<Tensor4> = self.params.iter().map(|p| Tensor4::zeros(p.shape())).collect();

        for id in (0..=last).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let input = |k: usize| acts.get(node.inputs[k]);
            match &node.kind {
                LayerKind::Input { .. } => {}
                LayerKind::Conv3x3 { .. } | LayerKind::Deconv2x2 { .. } => {
                    let (wid, bid) = (node.params[0], node.params[1]);
                    let need = !(self.info[wid].frozen && self.info[bid].frozen);
                    let cg = if matches!(node.kind, LayerKind::Conv3x3 { .. }) {
                        kernels::conv3x3_backward(input(0), &self.params[wid], &g, need)
                    } else {
                        kernels::deconv2x2_backward(input(0), &self.params[wid], &g, need)
                    };
                    if need {
                        pgrads[wid].add_assign(&cg.weight)?;
                        pgrads[bid].add_assign(&cg.bias)?;
                    }
                    accumulate(&mut grads[node.inputs[0]], cg.input);
                }
                LayerKind::Relu => {
                    let gx = input(0).zip_map(&g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                LayerKind::Detach => {}
                LayerKind::Maxpool2x2 => {
                    accumulate(&mut grads[node.inputs[0]], kernels::maxpool2x2_backward(input(0), &g));
                }
                LayerKind::AddSkip => {
                    accumulate(&mut grads[node.inputs[0]], g.clone());
                    accumulate(&mut grads[node.inputs[1]], g.clone());
                }
                LayerKind::ConcatChannels => {
                    let mut start = 0;
                    for &i in &node.inputs {
                        let c = acts.get(i).shape().c;
                        accumulate(&mut grads[i], g.channels(start, c)?);
                        start += c;
                    }
                }
                LayerKind::ResizeBilinear { .. } => {
                    let gx = kernels::resize_bilinear_backward(&g, input(0).shape());
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                LayerKind::Sum | LayerKind::Mean => {
                    let x = input(0);
                    let k = if node.kind == LayerKind::Sum {
                        g.data()[0]
                    } else {
                        g.data()[0] / x.shape().len() as f64
                    };
                    accumulate(&mut grads[node.inputs[0]], Tensor4::filled(x.shape(), k));
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }
}

fn check_channels(node: &Node, x: &Tensor4, expected: usize) -> Result<()> {
    if x.shape().c != expected {
        return Err(Error::shape(
            &node.name,
            format!("expects {expected} channels, got {}", x.shape().c),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
