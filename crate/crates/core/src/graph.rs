//! Directed acyclic network of layers stored in topological order.

use std::fmt::{self, Write as _};

use crate::activation::{ActivationKind, ActivationLayer, ParamMode};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, ConvLayer, DenseLayer, GlobalAvgPool, PoolLayer};
use crate::param::Param;
use crate::tensor::Tensor;

/// Zero-padded identity shortcut: spatial subsampling plus zero channels appended.
#[derive(Debug, Clone)]
pub struct PadShortcut {
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    input_shape: Option<Vec<usize>>,
}

impl PadShortcut {
    pub fn new(stride: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if stride == 0 || out_channels < in_channels {
            return Err(Error::invalid(
                "padded shortcut needs stride >= 1 and out >= in channels",
            ));
        }
        Ok(PadShortcut {
            stride,
            in_channels,
            out_channels,
            input_shape: None,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.nchw()?;
        if c != self.in_channels {
            return Err(Error::invalid("padded shortcut channel mismatch"));
        }
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let (src, dst) = (x.data(), out.data_mut());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[((b * self.out_channels + ch) * oh + y) * ow + xx] =
                            src[((b * c + ch) * h + y * self.stride) * w + xx * self.stride];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .clone()
            .ok_or_else(|| Error::State("shortcut backward called before forward".into()))?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (_, _, oh, ow) = g.nchw()?;
        let mut gin = Tensor::zeros(shape);
        let (src, dst) = (g.data(), gin.data_mut());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[((b * c + ch) * h + y * self.stride) * w + xx * self.stride] =
                            src[((b * self.out_channels + ch) * oh + y) * ow + xx];
                    }
                }
            }
        }
        Ok(gin)
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Activation(ActivationLayer),
    Dense(DenseLayer),
    Pool(PoolLayer),
    GlobalAvgPool(GlobalAvgPool),
    PadShortcut(PadShortcut),
    /// Element-wise sum of exactly two inputs.
    Add,
}

impl Op {
    pub fn type_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv(_) => "conv",
            Op::BatchNorm(_) => "batchnorm",
            Op::Activation(_) => "activation",
            Op::Dense(_) => "dense",
            Op::Pool(_) => "pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::PadShortcut(_) => "pad_shortcut",
            Op::Add => "add",
        }
    }

    /// Human-readable configuration, stable across builds.
    pub fn config(&self) -> String {
        match self {
            Op::Input => String::new(),
            Op::Conv(c) => format!(
                "{}x{} {}->{} stride={} pad={} bias={}",
                c.kernel,
                c.kernel,
                c.c_in,
                c.c_out,
                c.stride,
                c.pad,
                c.bias.is_some()
            ),
            Op::BatchNorm(b) => format!(
                "channels={} eps={:e} momentum={}",
                b.channels, b.eps, b.momentum
            ),
            Op::Activation(a) => format!(
                "{} channels={} mode={}",
                a.kind,
                a.channels,
                match a.mode {
                    ParamMode::ChannelShared => "shared",
                    ParamMode::ChannelWise => "channel",
                }
            ),
            Op::Dense(d) => format!("{}->{}", d.in_features, d.out_features),
            Op::Pool(p) => format!(
                "{} {}x{} stride={} pad={}",
                p.kind, p.kernel, p.kernel, p.stride, p.pad
            ),
            Op::GlobalAvgPool(_) => String::new(),
            Op::PadShortcut(s) => {
                format!("stride={} {}->{}", s.stride, s.in_channels, s.out_channels)
            }
            Op::Add => String::new(),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Op::Conv(l) => l.params(),
            Op::BatchNorm(l) => l.params(),
            Op::Activation(l) => l.params(),
            Op::Dense(l) => l.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Op::Conv(l) => l.params_mut(),
            Op::BatchNorm(l) => l.params_mut(),
            Op::Activation(l) => l.params_mut(),
            Op::Dense(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Op::Conv(l) => l.clear_cache(),
            Op::BatchNorm(l) => l.clear_cache(),
            Op::Activation(l) => l.clear_cache(),
            Op::Dense(l) => l.clear_cache(),
            Op::Pool(l) => l.clear_cache(),
            Op::GlobalAvgPool(l) => l.clear_cache(),
            Op::PadShortcut(l) => l.input_shape = None,
            Op::Input | Op::Add => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Clone)]
pub struct NetworkGraph {
    nodes: Vec<Node>,
    output: usize,
}

impl Default for NetworkGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl NetworkGraph {
    /// Creates a graph holding only the input node.
    pub fn new() -> Self {
        NetworkGraph {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: Vec::new(),
            }],
            output: 0,
        }
    }

    /// Appends a node; inputs must refer to existing nodes. The new node becomes the output.
    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: &[usize]) -> Result<usize> {
        let name = name.into();
        let idx = self.nodes.len();
        if matches!(op, Op::Input) {
            return Err(Error::invalid("a graph has exactly one input node"));
        }
        let arity = if matches!(op, Op::Add) { 2 } else { 1 };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "node '{name}' of type {} needs {arity} input(s), got {}",
                op.type_name(),
                inputs.len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= idx) {
            return Err(Error::invalid(format!(
                "node '{name}' references unknown node {bad}"
            )));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::invalid(format!("duplicate node name '{name}'")));
        }
        self.nodes.push(Node {
            name,
            op,
            inputs: inputs.to_vec(),
        });
        self.output = idx;
        Ok(idx)
    }

    /// Appends a node fed by the current output.
    pub fn then(&mut self, name: impl Into<String>, op: Op) -> Result<usize> {
        let prev = self.output;
        self.push(name, op, &[prev])
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Indices of the nodes that read the output of `idx`.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        (idx + 1..self.nodes.len())
            .filter(|&j| self.nodes[j].inputs.contains(&idx))
            .collect()
    }

    fn last_use(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for (j, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                last[i] = last[i].max(j);
            }
        }
        last[self.output] = usize::MAX;
        last
    }

    pub fn set_training(&mut self, training: bool) {
        for n in &mut self.nodes {
            if let Op::BatchNorm(bn) = &mut n.op {
                bn.training = training;
            }
        }
    }

    /// Runs the graph without caching, calling `inspect(index, node, output)` after every node.
    pub fn forward_inspect<F>(&self, x: &Tensor, inspect: F) -> Result<Tensor>
    where
        F: FnMut(usize, &Node, &Tensor) -> Result<()>,
    {
        self.run(x, self.output, inspect)
    }

    /// Output of node `stop` without evaluating anything after it.
    pub fn evaluate_until(&self, x: &Tensor, stop: usize) -> Result<Tensor> {
        if stop >= self.nodes.len() {
            return Err(Error::invalid(format!("node index {stop} out of range")));
        }
        self.run(x, stop, |_, _, _| Ok(()))
    }

    fn run<F>(&self, x: &Tensor, stop: usize, mut inspect: F) -> Result<Tensor>
    where
        F: FnMut(usize, &Node, &Tensor) -> Result<()>,
    {
        let mut last = self.last_use();
        last[stop] = usize::MAX;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate().take(stop + 1) {
            let out = if i == 0 {
                x.clone()
            } else {
                let a = values[node.inputs[0]]
                    .as_ref()
                    .expect("value released early");
                let r = match &node.op {
                    Op::Input => unreachable!(),
                    Op::Conv(l) => l.apply(a),
                    Op::BatchNorm(l) => l.apply(a),
                    Op::Activation(l) => l.apply(a),
                    Op::Dense(l) => l.apply(a),
                    Op::Pool(l) => l.apply(a),
                    Op::GlobalAvgPool(l) => l.apply(a),
                    Op::PadShortcut(l) => l.apply(a),
                    Op::Add => a.add(
                        values[node.inputs[1]]
                            .as_ref()
                            .expect("value released early"),
                    ),
                };
                r.map_err(|e| annotate(e, &node.name))?
            };
            inspect(i, node, &out)?;
            values[i] = Some(out);
            for &j in &node.inputs {
                if last[j] == i {
                    values[j] = None;
                }
            }
        }
        Ok(values[stop].take().expect("output computed"))
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_inspect(x, |_, _, _| Ok(()))
    }

    /// Forward pass that keeps every node output (small graphs only).
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut all = Vec::with_capacity(self.nodes.len());
        self.forward_inspect(x, |_, _, t| {
            all.push(t.clone());
            Ok(())
        })?;
        Ok(all)
    }

    /// Forward pass that caches what [`NetworkGraph::backward`] needs.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let last = self.last_use();
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let inputs = self.nodes[i].inputs.clone();
            let out = if i == 0 {
                x.clone()
            } else {
                let a = values[inputs[0]].as_ref().expect("value released early");
                let node = &mut self.nodes[i];
                let r = match &mut node.op {
                    Op::Input => unreachable!(),
                    Op::Conv(l) => l.forward(a),
                    Op::BatchNorm(l) => l.forward(a),
                    Op::Activation(l) => l.forward(a),
                    Op::Dense(l) => l.forward(a),
                    Op::Pool(l) => l.forward(a),
                    Op::GlobalAvgPool(l) => l.forward(a),
                    Op::PadShortcut(l) => l.forward(a),
                    Op::Add => a.add(values[inputs[1]].as_ref().expect("value released early")),
                };
                r.map_err(|e| annotate(e, &node.name))?
            };
            values[i] = Some(out);
            for &j in &inputs {
                if last[j] == i {
                    values[j] = None;
                }
            }
        }
        Ok(values[self.output].take().expect("output computed"))
    }

    /// Back-propagates `grad_out` from the output; returns the gradient with respect to the input.
    /// Parameter gradients are added to the existing `grad` buffers.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_out.clone());
        for i in (1..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut self.nodes[i];
            let name = node.name.clone();
            let inputs = node.inputs.clone();
            let gin: Vec<Tensor> = match &mut node.op {
                Op::Input => unreachable!(),
                Op::Conv(l) => vec![l.backward(&g)],
                Op::BatchNorm(l) => vec![l.backward(&g)],
                Op::Activation(l) => vec![l.backward(&g)],
                Op::Dense(l) => vec![l.backward(&g)],
                Op::Pool(l) => vec![l.backward(&g)],
                Op::GlobalAvgPool(l) => vec![l.backward(&g)],
                Op::PadShortcut(l) => vec![l.backward(&g)],
                Op::Add => vec![Ok(g.clone()), Ok(g)],
            }
            .into_iter()
            .collect::<Result<_>>()
            .map_err(|e| annotate(e, &name))?;
            for (&j, gj) in inputs.iter().zip(gin) {
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gj)?,
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        grads[0]
            .take()
            .ok_or_else(|| Error::State("output does not depend on the input".into()))
    }

    pub fn clear_caches(&mut self) {
        for n in &mut self.nodes {
            n.op.clear_cache();
        }
    }

    /// All learnable tensors as `("node.param", param)` in node order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.op.params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{}.{p}", n.name), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.nodes
            .iter_mut()
            .flat_map(|n| {
                let name = n.name.clone();
                n.op.params_mut()
                    .into_iter()
                    .map(move |(p, t)| (format!("{name}.{p}"), t))
            })
            .collect()
    }

    /// Non-learned state (BN running statistics) as `("node.buffer", tensor)`.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for n in &self.nodes {
            if let Op::BatchNorm(bn) = &n.op {
                v.push((format!("{}.running_mean", n.name), &bn.running_mean));
                v.push((format!("{}.running_var", n.name), &bn.running_var));
            }
        }
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for n in &mut self.nodes {
            if let Op::BatchNorm(bn) = &mut n.op {
                v.push((format!("{}.running_mean", n.name), &mut bn.running_mean));
                v.push((format!("{}.running_var", n.name), &mut bn.running_var));
            }
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Total number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn count(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.op)).count()
    }

    /// One line per node: `index name type config params`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let count: usize = n.op.params().iter().map(|(_, p)| p.len()).sum();
            let inputs: Vec<String> = n.inputs.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(
                s,
                "{i}\t{}\t{}\t[{}]\t{}\t{count}",
                n.name,
                n.op.type_name(),
                inputs.join(","),
                n.op.config()
            );
        }
        let _ = writeln!(s, "total\t{}", self.count_params());
        s
    }

    /// Activation layers whose input comes straight from an addition.
    pub fn post_addition_activations(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| {
                matches!(self.nodes[i].op, Op::Activation(_))
                    && self.nodes[i]
                        .inputs
                        .iter()
                        .any(|&j| matches!(self.nodes[j].op, Op::Add))
            })
            .collect()
    }

    /// The activation that consumes the output of `idx`, looking through batch norm, pooling,
    /// additions and shortcuts; `None` when the signal reaches the output first.
    pub fn consuming_activation(&self, idx: usize) -> Option<&ActivationLayer> {
        match &self.nodes[self.consuming_activation_index(idx)?].op {
            Op::Activation(a) => Some(a),
            _ => None,
        }
    }

    /// Node index of [`NetworkGraph::consuming_activation`].
    pub fn consuming_activation_index(&self, idx: usize) -> Option<usize> {
        let mut frontier = std::collections::VecDeque::from([idx]);
        let mut seen = vec![false; self.nodes.len()];
        while let Some(i) = frontier.pop_front() {
            for j in self.consumers(i) {
                if seen[j] {
                    continue;
                }
                seen[j] = true;
                match &self.nodes[j].op {
                    Op::Activation(_) => return Some(j),
                    Op::BatchNorm(_)
                    | Op::Pool(_)
                    | Op::Add
                    | Op::PadShortcut(_)
                    | Op::GlobalAvgPool(_) => frontier.push_back(j),
                    _ => {}
                }
            }
        }
        None
    }

    /// Shape of every node output for an input of the given shape, computed on a zero batch.
    pub fn check_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::new();
        let mut g = self.clone();
        g.set_training(false);
        g.forward_inspect(&Tensor::zeros(input.to_vec()), |_, _, t| {
            shapes.push(t.shape().to_vec());
            Ok(())
        })?;
        Ok(shapes)
    }

    /// Sets every activation kind's initial parameters and resets the learned vectors.
    pub fn reset_activations(&mut self) {
        for n in &mut self.nodes {
            if let Op::Activation(a) = &mut n.op {
                a.reset_parameters();
            }
        }
    }

    pub fn activation_kinds(&self) -> Vec<ActivationKind> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Activation(a) => Some(a.kind),
                _ => None,
            })
            .collect()
    }
}

fn annotate(e: Error, node: &str) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{node}: {m}")),
        Error::State(m) => Error::State(format!("{node}: {m}")),
        other => other,
    }
}

impl fmt::Debug for NetworkGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetworkGraph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.count_params())
            .field("output", &self.nodes[self.output].name)
            .finish()
    }
}

impl fmt::Display for NetworkGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tiny() -> NetworkGraph {
        let mut g = NetworkGraph::new();
        let mut conv = ConvLayer::new(2, 2, 3, 1, 1, false).unwrap();
        conv.weight
            .value
            .gaussian_fill(0.0, 0.3, &mut Rng::new(1))
            .unwrap();
        let c = g.then("conv", Op::Conv(conv)).unwrap();
        g.then(
            "act",
            Op::Activation(ActivationLayer::new(
                ActivationKind::mpelu(1.0, 1.0),
                ParamMode::ChannelWise,
                2,
            )),
        )
        .unwrap();
        let a = g.output();
        g.push("sum", Op::Add, &[0, a]).unwrap();
        let _ = c;
        g
    }

    #[test]
    fn add_requires_two_inputs() {
        let mut g = NetworkGraph::new();
        assert!(g.push("sum", Op::Add, &[0]).is_err());
        assert!(g.push("bad", Op::Add, &[0, 5]).is_err());
    }

    #[test]
    fn cached_and_uncached_forward_agree() {
        let mut g = tiny();
        let mut x = Tensor::zeros([2, 2, 4, 4]);
        x.gaussian_fill(0.0, 1.0, &mut Rng::new(3)).unwrap();
        assert_eq!(g.infer(&x).unwrap(), g.forward(&x).unwrap());
        assert_eq!(g.forward_trace(&x).unwrap().len(), 4);
    }

    #[test]
    fn shortcut_gradient_adds_branches() {
        let mut g = NetworkGraph::new();
        let mut conv = ConvLayer::new(1, 1, 1, 1, 0, false).unwrap();
        conv.weight.value.fill(2.0);
        g.then("conv", Op::Conv(conv)).unwrap();
        g.push("sum", Op::Add, &[0, 1]).unwrap();
        let x = Tensor::full([1, 1, 1, 1], 3.0);
        assert_eq!(g.forward(&x).unwrap().data(), &[9.0]);
        let gi = g.backward(&Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(gi.data(), &[3.0]);
        assert_eq!(g.params()[0].1.grad.data(), &[3.0]);
    }

    #[test]
    fn pad_shortcut_roundtrip() {
        let mut s = PadShortcut::new(2, 1, 3).unwrap();
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = s.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 1]);
        assert_eq!(y.data(), &[1.0, 0.0, 0.0]);
        let g = s
            .backward(&Tensor::new([1, 3, 1, 1], vec![5.0, 6.0, 7.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dump_is_stable_and_counts() {
        let g = tiny();
        assert_eq!(g.dump(), tiny().dump());
        assert_eq!(g.count_params(), 2 * 2 * 9 + 4);
        assert!(g.dump().ends_with("total\t40\n"));
        assert_eq!(g.post_addition_activations(), Vec::<usize>::new());
        assert!(g.consuming_activation(1).is_some());
        assert!(g.consuming_activation(2).is_none());
    }
}
