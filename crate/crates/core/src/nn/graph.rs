//! A static directed acyclic graph of layers with explicit forward and
//! reverse-mode passes.
//!
//! Nodes are stored in topological order: every node's inputs have smaller
//! indices. Shapes are resolved when a node is added, so a graph built for a
//! fixed input size is fully shape-checked before it ever sees data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ops::{
    Activation, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Padding, Param, Pool2d, PoolKind, Window,
};
use super::tensor::{Shape, Tensor};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op<T> {
    Input,
    Conv(Conv2d<T>),
    Depthwise(DepthwiseConv2d<T>),
    BatchNorm(BatchNorm<T>),
    Act(Activation),
    Add,
    Concat,
    Pool(Pool2d),
    GlobalAvgPool,
    Dense(Dense<T>),
    Dropout(f64),
    /// Multiply by a constant.
    Scale(f64),
}

impl<T> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv(_) => "conv",
            Op::Depthwise(_) => "depthwise",
            Op::BatchNorm(_) => "batch_norm",
            Op::Act(_) => "activation",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Pool(_) => "pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dense(_) => "dense",
            Op::Dropout(_) => "dropout",
            Op::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    pub trainable: bool,
}

impl<T: Scalar> Node<T> {
    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.op {
            Op::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Op::Depthwise(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Op::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.mean, &b.var],
            Op::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.op {
            Op::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Op::Depthwise(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Op::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta, &mut b.mean, &mut b.var],
            Op::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Parameters updated by gradient descent (running statistics excluded).
    pub fn optimizable_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.op {
            Op::BatchNorm(b) => {
                if b.fixed_gamma {
                    vec![&mut b.beta]
                } else {
                    vec![&mut b.gamma, &mut b.beta]
                }
            }
            Op::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Op::Depthwise(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Op::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }
}

/// Per-node side data recorded during a training forward pass.
#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Mask(Vec<T>),
    Argmax(Vec<u32>),
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug)]
pub struct Trace<T> {
    outputs: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().and_then(|o| o.as_ref()).expect("non-empty trace")
    }

    pub fn node_output(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.outputs.get(id).and_then(|o| o.as_ref())
    }
}

pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(input: Shape) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: Vec::new(),
                shape: input,
                trainable: false,
            }],
        }
    }

    pub const INPUT: NodeId = 0;

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes.last().expect("graph has an input").shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| n.params()).map(Param::len).sum()
    }

    pub fn set_trainable(&mut self, range: std::ops::Range<NodeId>, trainable: bool) {
        for n in &mut self.nodes[range] {
            n.trainable = trainable && !n.params().is_empty();
        }
    }

    fn push(&mut self, name: impl Into<String>, op: Op<T>, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        let name = name.into();
        for &i in &inputs {
            assert!(i < self.nodes.len(), "node `{name}` refers to a later node");
        }
        let trainable = matches!(op, Op::Conv(_) | Op::Depthwise(_) | Op::BatchNorm(_) | Op::Dense(_));
        self.nodes.push(Node { name, op, inputs, shape, trainable });
        self.nodes.len() - 1
    }

    fn window(&self, name: &str, x: NodeId, k: (usize, usize), s: (usize, usize), pad: Padding) -> Window {
        let sh = self.shape(x);
        Window::resolve(pad, (sh.h, sh.w), k, s)
            .unwrap_or_else(|| panic!("layer `{name}`: window {k:?} does not fit input {sh:?}"))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        x: NodeId,
        cout: usize,
        k: (usize, usize),
        s: (usize, usize),
        pad: Padding,
        bias: bool,
    ) -> NodeId {
        let cin = self.shape(x).c;
        let win = self.window(name, x, k, s, pad);
        let fan_in = cin * k.0 * k.1;
        let weight = Param::new(
            format!("{name}/kernel"),
            vec![cout, cin, k.0, k.1],
            he_normal(rng, fan_in, cout * fan_in),
        );
        let bias = bias.then(|| Param::filled(format!("{name}/bias"), vec![cout], T::zero()));
        let shape = Shape::new(cout, win.out_h, win.out_w);
        self.push(name, Op::Conv(Conv2d { cin, cout, win, weight, bias }), vec![x], shape)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn depthwise(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        x: NodeId,
        k: (usize, usize),
        s: (usize, usize),
        pad: Padding,
        bias: bool,
    ) -> NodeId {
        let c = self.shape(x).c;
        let win = self.window(name, x, k, s, pad);
        let weight = Param::new(
            format!("{name}/depthwise_kernel"),
            vec![c, 1, k.0, k.1],
            he_normal(rng, k.0 * k.1, c * k.0 * k.1),
        );
        let bias = bias.then(|| Param::filled(format!("{name}/bias"), vec![c], T::zero()));
        let shape = Shape::new(c, win.out_h, win.out_w);
        self.push(name, Op::Depthwise(DepthwiseConv2d { channels: c, win, weight, bias }), vec![x], shape)
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId, eps: f64) -> NodeId {
        self.batch_norm_with(name, x, eps, false)
    }

    pub fn batch_norm_with(&mut self, name: &str, x: NodeId, eps: f64, fixed_gamma: bool) -> NodeId {
        let shape = self.shape(x);
        let c = shape.c;
        let bn = BatchNorm {
            channels: c,
            eps,
            fixed_gamma,
            gamma: Param::filled(format!("{name}/gamma"), vec![c], T::one()),
            beta: Param::filled(format!("{name}/beta"), vec![c], T::zero()),
            mean: Param::filled(format!("{name}/moving_mean"), vec![c], T::zero()),
            var: Param::filled(format!("{name}/moving_variance"), vec![c], T::one()),
        };
        self.push(name, Op::BatchNorm(bn), vec![x], shape)
    }

    pub fn act(&mut self, name: &str, x: NodeId, a: Activation) -> NodeId {
        let shape = self.shape(x);
        self.push(name, Op::Act(a), vec![x], shape)
    }

    pub fn add(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        let shape = self.shape(xs[0]);
        for &x in xs {
            assert_eq!(self.shape(x), shape, "add `{name}`: shape mismatch");
        }
        self.push(name, Op::Add, xs.to_vec(), shape)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        let first = self.shape(xs[0]);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!((s.h, s.w), (first.h, first.w), "concat `{name}`: spatial mismatch");
            c += s.c;
        }
        self.push(name, Op::Concat, xs.to_vec(), Shape::new(c, first.h, first.w))
    }

    pub fn pool(&mut self, name: &str, x: NodeId, kind: PoolKind, k: (usize, usize), s: (usize, usize), pad: Padding) -> NodeId {
        let c = self.shape(x).c;
        let win = self.window(name, x, k, s, pad);
        let shape = Shape::new(c, win.out_h, win.out_w);
        self.push(name, Op::Pool(Pool2d { kind, channels: c, win }), vec![x], shape)
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.shape(x).c;
        self.push(name, Op::GlobalAvgPool, vec![x], Shape::flat(c))
    }

    pub fn dense(&mut self, rng: &mut impl Rng, name: &str, x: NodeId, outputs: usize) -> NodeId {
        let inputs = self.shape(x).len();
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let w = (0..inputs * outputs).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        let d = Dense {
            inputs,
            outputs,
            weight: Param::new(format!("{name}/kernel"), vec![outputs, inputs], w),
            bias: Param::filled(format!("{name}/bias"), vec![outputs], T::zero()),
        };
        self.push(name, Op::Dense(d), vec![x], Shape::flat(outputs))
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, rate: f64) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        let shape = self.shape(x);
        self.push(name, Op::Dropout(rate), vec![x], shape)
    }

    pub fn scale(&mut self, name: &str, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(x);
        self.push(name, Op::Scale(factor), vec![x], shape)
    }

    /// Forward pass keeping every intermediate output for a later backward pass.
    pub fn forward(&self, x: Tensor<T>, mut mode: Mode<'_>) -> Trace<T> {
        self.check_input(&x);
        let n = x.n;
        let mut outputs: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        outputs.push(Some(x));
        aux.push(Aux::None);
        let mut scratch = Vec::new();
        for i in 1..self.nodes.len() {
            let inputs: Vec<&Tensor<T>> =
                self.nodes[i].inputs.iter().map(|&j| outputs[j].as_ref().expect("live input")).collect();
            let (y, a) = self.eval_node(i, &inputs, n, &mut mode, true, &mut scratch);
            outputs.push(Some(y));
            aux.push(a);
        }
        Trace { outputs, aux }
    }

    /// Inference-mode forward pass that frees intermediates as soon as possible.
    pub fn infer(&self, x: Tensor<T>) -> Tensor<T> {
        self.check_input(&x);
        let n = x.n;
        let last_use = self.last_use();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        outputs[0] = Some(x);
        let mut scratch = Vec::new();
        for i in 1..self.nodes.len() {
            let inputs: Vec<&Tensor<T>> =
                self.nodes[i].inputs.iter().map(|&j| outputs[j].as_ref().expect("live input")).collect();
            let (y, _) = self.eval_node(i, &inputs, n, &mut Mode::Infer, false, &mut scratch);
            outputs[i] = Some(y);
            for &j in &self.nodes[i].inputs {
                if last_use[j] == i {
                    outputs[j] = None;
                }
            }
        }
        outputs.pop().flatten().expect("graph output")
    }

    /// Sets every batch-norm layer's running statistics to the statistics
    /// of its input on this batch, layer by layer.
    pub fn calibrate_batch_norm(&mut self, x: Tensor<T>) {
        self.check_input(&x);
        let n = x.n;
        let last_use = self.last_use();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        outputs[0] = Some(x);
        let mut scratch = Vec::new();
        for i in 1..self.nodes.len() {
            let first = self.nodes[i].inputs[0];
            if let Op::BatchNorm(bn) = &mut self.nodes[i].op {
                let src = outputs[first].as_ref().expect("live input");
                bn.calibrate(&src.data, n, src.shape.plane());
            }
            let inputs: Vec<&Tensor<T>> =
                self.nodes[i].inputs.iter().map(|&j| outputs[j].as_ref().expect("live input")).collect();
            let (y, _) = self.eval_node(i, &inputs, n, &mut Mode::Infer, false, &mut scratch);
            outputs[i] = Some(y);
            for &j in &self.nodes[i].inputs {
                if last_use[j] == i {
                    outputs[j] = None;
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) {
        assert_eq!(x.shape, self.input_shape(), "graph input shape");
        assert_eq!(x.data.len(), x.n * x.shape.len(), "graph input length");
    }

    fn last_use(&self) -> Vec<NodeId> {
        let mut last = vec![usize::MAX; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last[j] = i;
            }
        }
        last
    }

    fn eval_node(
        &self,
        i: NodeId,
        inputs: &[&Tensor<T>],
        n: usize,
        mode: &mut Mode<'_>,
        record: bool,
        scratch: &mut Vec<T>,
    ) -> (Tensor<T>, Aux<T>) {
        let node = &self.nodes[i];
        let mut y = Tensor::zeros(n, node.shape);
        let x = inputs[0];
        let mut aux = Aux::None;
        match &node.op {
            Op::Input => unreachable!("input node is never evaluated"),
            Op::Conv(c) => {
                for s in 0..n {
                    c.forward(x.sample(s), y.sample_mut(s), scratch);
                }
            }
            Op::Depthwise(c) => {
                for s in 0..n {
                    c.forward(x.sample(s), y.sample_mut(s));
                }
            }
            Op::BatchNorm(b) => {
                for s in 0..n {
                    b.forward(x.sample(s), y.sample_mut(s), x.shape.plane());
                }
            }
            Op::Act(a) => a.apply(&x.data, &mut y.data),
            Op::Add => {
                y.data.copy_from_slice(&x.data);
                for other in &inputs[1..] {
                    y.add_assign(other);
                }
            }
            Op::Concat => {
                for s in 0..n {
                    let out = y.sample_mut(s);
                    let mut off = 0;
                    for t in inputs {
                        let src = t.sample(s);
                        out[off..off + src.len()].copy_from_slice(src);
                        off += src.len();
                    }
                }
            }
            Op::Pool(p) => {
                let mut idx = (record && p.kind == PoolKind::Max).then(|| vec![0u32; y.data.len()]);
                let per = node.shape.len();
                for s in 0..n {
                    let a = idx.as_mut().map(|v| &mut v[s * per..(s + 1) * per]);
                    p.forward(x.sample(s), y.sample_mut(s), a);
                }
                if let Some(v) = idx {
                    aux = Aux::Argmax(v);
                }
            }
            Op::GlobalAvgPool => {
                let plane = x.shape.plane();
                let inv = T::one() / T::from_usize(plane).unwrap();
                for (o, chunk) in y.data.iter_mut().zip(x.data.chunks(plane)) {
                    *o = chunk.iter().copied().sum::<T>() * inv;
                }
            }
            Op::Dense(d) => d.forward(&x.data, n, &mut y.data),
            Op::Dropout(rate) => match mode {
                Mode::Train(rng) if *rate > 0.0 => {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..x.data.len())
                        .map(|_| if rng.random::<f64>() >= *rate { keep } else { T::zero() })
                        .collect();
                    for ((o, v), m) in y.data.iter_mut().zip(&x.data).zip(&mask) {
                        *o = *v * *m;
                    }
                    if record {
                        aux = Aux::Mask(mask);
                    }
                }
                _ => y.data.copy_from_slice(&x.data),
            },
            Op::Scale(f) => {
                let f = T::from_f64_lossy(*f);
                for (o, v) in y.data.iter_mut().zip(&x.data) {
                    *o = *v * f;
                }
            }
        }
        (y, aux)
    }

    /// Reverse-mode pass. Accumulates parameter gradients of trainable
    /// nodes; input gradients are only propagated to nodes with index
    /// `>= stop`, so a frozen prefix costs nothing.
    pub fn backward(&mut self, trace: Trace<T>, grad_out: Tensor<T>, stop: NodeId) {
        let Trace { mut outputs, aux } = trace;
        let last = self.nodes.len() - 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[last] = Some(grad_out);
        let mut scratch = Vec::new();
        for i in (stop.max(1)..=last).rev() {
            let Some(g) = grads[i].take() else {
                outputs[i] = None;
                continue;
            };
            let inputs = self.nodes[i].inputs.clone();
            let n = g.n;
            // Allocate input-gradient buffers for inputs that still need them.
            for &j in &inputs {
                if j >= stop && j != Self::INPUT && grads[j].is_none() {
                    grads[j] = Some(Tensor::zeros(n, self.nodes[j].shape));
                }
            }
            let wants = |j: NodeId| j >= stop && j != Self::INPUT;
            let node = &mut self.nodes[i];
            let train = node.trainable;
            let x = outputs[inputs[0]].as_ref().expect("input kept for backward");
            match &mut node.op {
                Op::Input => {}
                Op::Conv(c) => {
                    let mut dx = if wants(inputs[0]) { grads[inputs[0]].take() } else { None };
                    for s in 0..n {
                        c.backward(
                            x.sample(s),
                            g.sample(s),
                            dx.as_mut().map(|d| d.sample_mut(s)),
                            train,
                            &mut scratch,
                        );
                    }
                    if dx.is_some() {
                        grads[inputs[0]] = dx;
                    }
                }
                Op::Depthwise(c) => {
                    let mut dx = if wants(inputs[0]) { grads[inputs[0]].take() } else { None };
                    for s in 0..n {
                        c.backward(x.sample(s), g.sample(s), dx.as_mut().map(|d| d.sample_mut(s)), train);
                    }
                    if dx.is_some() {
                        grads[inputs[0]] = dx;
                    }
                }
                Op::BatchNorm(b) => {
                    let plane = x.shape.plane();
                    let mut dx = if wants(inputs[0]) { grads[inputs[0]].take() } else { None };
                    for s in 0..n {
                        b.backward(x.sample(s), g.sample(s), dx.as_mut().map(|d| d.sample_mut(s)), plane, train);
                    }
                    if dx.is_some() {
                        grads[inputs[0]] = dx;
                    }
                }
                Op::Act(a) => {
                    if let Some(dx) = grads[inputs[0]].as_mut().filter(|_| wants(inputs[0])) {
                        let y = outputs[i].as_ref().expect("activation output");
                        a.backward(&y.data, &g.data, &mut dx.data);
                    }
                }
                Op::Add => {
                    for &j in &inputs {
                        if wants(j) {
                            grads[j].as_mut().expect("allocated").add_assign(&g);
                        }
                    }
                }
                Op::Concat => {
                    let mut off = 0;
                    for &j in &inputs {
                        let len = self_shape_len(&outputs, j);
                        if wants(j) {
                            let dx = grads[j].as_mut().expect("allocated");
                            for s in 0..n {
                                let src = &g.sample(s)[off..off + len];
                                for (d, v) in dx.sample_mut(s).iter_mut().zip(src) {
                                    *d += *v;
                                }
                            }
                        }
                        off += len;
                    }
                }
                Op::Pool(p) => {
                    if let Some(dx) = grads[inputs[0]].as_mut().filter(|_| wants(inputs[0])) {
                        let per = g.shape.len();
                        for s in 0..n {
                            let a = match &aux[i] {
                                Aux::Argmax(v) => Some(&v[s * per..(s + 1) * per]),
                                _ => None,
                            };
                            p.backward(g.sample(s), dx.sample_mut(s), a);
                        }
                    }
                }
                Op::GlobalAvgPool => {
                    if let Some(dx) = grads[inputs[0]].as_mut().filter(|_| wants(inputs[0])) {
                        let plane = dx.shape.plane();
                        let inv = T::one() / T::from_usize(plane).unwrap();
                        for (chunk, gv) in dx.data.chunks_mut(plane).zip(&g.data) {
                            let v = *gv * inv;
                            chunk.iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
                Op::Dense(d) => {
                    let mut dx = if wants(inputs[0]) { grads[inputs[0]].take() } else { None };
                    d.backward(&x.data, &g.data, n, dx.as_mut().map(|t| &mut t.data[..]), train);
                    if dx.is_some() {
                        grads[inputs[0]] = dx;
                    }
                }
                Op::Dropout(_) => {
                    if let Some(dx) = grads[inputs[0]].as_mut().filter(|_| wants(inputs[0])) {
                        match &aux[i] {
                            Aux::Mask(m) => {
                                for ((d, v), mv) in dx.data.iter_mut().zip(&g.data).zip(m) {
                                    *d += *v * *mv;
                                }
                            }
                            _ => dx.add_assign(&g),
                        }
                    }
                }
                Op::Scale(f) => {
                    if let Some(dx) = grads[inputs[0]].as_mut().filter(|_| wants(inputs[0])) {
                        let f = T::from_f64_lossy(*f);
                        for (d, v) in dx.data.iter_mut().zip(&g.data) {
                            *d += *v * f;
                        }
                    }
                }
            }
            outputs[i] = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            for p in node.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn drop_grads(&mut self) {
        for node in &mut self.nodes {
            for p in node.params_mut() {
                p.drop_grad();
            }
        }
    }
}

fn self_shape_len<T: Scalar>(outputs: &[Option<Tensor<T>>], j: NodeId) -> usize {
    outputs[j].as_ref().map(|t| t.shape.len()).expect("concat input kept for backward")
}

fn he_normal<T: Scalar>(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}
