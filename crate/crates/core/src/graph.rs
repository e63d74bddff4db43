//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node holding its (immutable) output. Node ids are
//! handed out in creation order, so the tape is topologically sorted and
//! [`Graph::backward`] is a single reverse sweep that visits each node once,
//! summing gradients where a value fans out to several consumers.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::{Tensor, IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct CrossEntropySpec {
    labels: Vec<u8>,
    weights: Vec<f32>,
    masked: Option<u8>,
    denom: usize,
}

#[derive(Debug)]
struct AggregateSpec {
    maps: Vec<Tensor>,
    skip: Option<usize>,
    factor: f32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d(ConvGeom),
    Relu,
    Add,
    Scale(f32),
    HadamardConst(Tensor),
    ClassAggregate(AggregateSpec),
    SoftmaxChannels,
    Sum,
    CrossEntropy(CrossEntropySpec),
    ChannelProbMean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::HadamardConst(_) => "hadamard_const",
            Op::ClassAggregate(_) => "class_aggregate",
            Op::SoftmaxChannels => "softmax_channels",
            Op::Sum => "sum",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::ChannelProbMean(_) => "channel_prob_mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every node it depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked (parameters, probed intermediates).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// A leaf treated as a constant by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    fn record(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        let value = value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs, value, requires_grad))
    }

    /// Stride-1 convolution over `[h,w,cin]` or `[batch,h,w,cin]` input with
    /// a `[kh,kw,cin,cout]` kernel and `[cout]` bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let geom = conv_geometry(self.value(x), self.value(kernel), self.value(bias), padding)?;
        let out = kernels::conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let shape = if self.value(x).rank() == 3 {
            vec![geom.out_h, geom.out_w, geom.cout]
        } else {
            vec![geom.batch, geom.out_h, geom.out_w, geom.cout]
        };
        self.record(
            Op::Conv2d(geom),
            vec![x, kernel, bias],
            Tensor::from_parts(shape, out),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(Op::Relu, vec![x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record(Op::Add, vec![a, b], out)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out = self.value(x).map(|v| v * factor);
        self.record(Op::Scale(factor), vec![x], out)
    }

    /// Elementwise product with a constant. `s` has the shape of `x`, or of
    /// one batch item of `x` (then it is repeated over the batch).
    pub fn hadamard_const(&mut self, x: NodeId, s: &Tensor) -> Result<NodeId> {
        let tx = self.value(x);
        let fits =
            tx.shape() == s.shape() || (tx.rank() == s.rank() + 1 && &tx.shape()[1..] == s.shape());
        if !fits {
            return Err(Error::shape(
                "hadamard_const",
                format!("{:?} vs {:?}", tx.shape(), s.shape()),
            ));
        }
        let data = tx
            .data()
            .chunks_exact(s.len())
            .flat_map(|chunk| chunk.iter().zip(s.data()).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.record(Op::HadamardConst(s.clone()), vec![x], out)
    }

    /// `factor * sum_{c != skip} ReLU(x ⊙ maps[c])` in one node; every map
    /// follows the shape rule of [`Graph::hadamard_const`].
    pub fn class_aggregate(
        &mut self,
        x: NodeId,
        maps: &[Tensor],
        skip: Option<usize>,
        factor: f32,
    ) -> Result<NodeId> {
        let tx = self.value(x);
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("class_aggregate", "no maps"))?;
        for s in maps {
            let fits = tx.shape() == s.shape()
                || (tx.rank() == s.rank() + 1 && &tx.shape()[1..] == s.shape());
            if !fits || s.shape() != first.shape() {
                return Err(Error::shape(
                    "class_aggregate",
                    format!("{:?} vs {:?}", tx.shape(), s.shape()),
                ));
            }
        }
        if !factor.is_finite() {
            return Err(Error::NonFinite {
                op: "class_aggregate",
            });
        }
        let mut data = vec![0.0f32; tx.len()];
        for (c, s) in maps.iter().enumerate() {
            if Some(c) == skip {
                continue;
            }
            for (xo, chunk) in data
                .chunks_exact_mut(s.len())
                .zip(tx.data().chunks_exact(s.len()))
            {
                for ((o, &a), &m) in xo.iter_mut().zip(chunk).zip(s.data()) {
                    *o += (a * m).max(0.0);
                }
            }
        }
        for v in &mut data {
            *v *= factor;
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let spec = AggregateSpec {
            maps: maps.to_vec(),
            skip,
            factor,
        };
        self.record(Op::ClassAggregate(spec), vec![x], out)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let c = tx.channels();
        if c == 0 || tx.rank() == 0 {
            return Err(Error::shape(
                "softmax_channels",
                "need at least one channel",
            ));
        }
        let mut data = vec![0.0f32; tx.len()];
        for (src, dst) in tx.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            kernels::softmax_into(src, dst);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.record(Op::SoftmaxChannels, vec![x], out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(Op::Sum, vec![x], Tensor::scalar(s as f32))
    }

    /// Weighted per-pixel cross-entropy on logits `[.., C]`, averaged over the
    /// non-ignored pixels. Pixels labeled `masked` contribute zero but stay in
    /// the denominator.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        weights: &[f32],
        masked: Option<usize>,
    ) -> Result<NodeId> {
        let t = self.value(logits);
        let c = t.channels();
        if weights.len() != c {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} weights for {} classes", weights.len(), c),
            ));
        }
        if labels.len() * c != t.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), t.shape()),
            ));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= c)
        {
            return Err(Error::LabelOutOfRange {
                label: bad,
                count: c,
            });
        }
        if let Some(z) = masked {
            if z >= c {
                return Err(Error::InvalidClass { class: z, count: c });
            }
        }
        let masked = masked.map(|z| z as u8);
        let denom = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        let mut total = 0.0f64;
        for (px, &y) in t.data().chunks_exact(c).zip(labels) {
            if y == IGNORE_LABEL || Some(y) == masked {
                continue;
            }
            let max = px.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + px.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += weights[y as usize] as f64 * (lse - px[y as usize] as f64);
        }
        let value = if denom == 0 {
            0.0
        } else {
            total / denom as f64
        };
        let spec = CrossEntropySpec {
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            masked,
            denom,
        };
        self.record(
            Op::CrossEntropy(spec),
            vec![logits],
            Tensor::scalar(value as f32),
        )
    }

    /// Mean over every pixel of `softmax(logits)[.., class]`.
    pub fn channel_prob_mean(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        let t = self.value(logits);
        let c = t.channels();
        if class >= c {
            return Err(Error::InvalidClass { class, count: c });
        }
        let pixels = t.len() / c;
        let mut probs = vec![0.0f32; c];
        let mut total = 0.0f64;
        for px in t.data().chunks_exact(c) {
            kernels::softmax_into(px, &mut probs);
            total += probs[class] as f64;
        }
        let value = if pixels == 0 {
            0.0
        } else {
            total / pixels as f64
        };
        self.record(
            Op::ChannelProbMean(class),
            vec![logits],
            Tensor::scalar(value as f32),
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                for (input, contribution) in self.input_grads(node, &g)? {
                    let contribution = contribution.check_finite("backward")?;
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d(geom) => {
                let [x, k, b] = [node.inputs[0], node.inputs[1], node.inputs[2]];
                let want = [wants(x), wants(k), wants(b)];
                let grads = kernels::conv_backward(
                    self.value(x).data(),
                    self.value(k).data(),
                    g.data(),
                    geom,
                    want,
                );
                if let Some(dx) = grads.dx {
                    out.push((x, Tensor::from_parts(self.value(x).shape().to_vec(), dx)));
                }
                if let Some(dk) = grads.dk {
                    out.push((k, Tensor::from_parts(self.value(k).shape().to_vec(), dk)));
                }
                if let Some(db) = grads.db {
                    out.push((b, Tensor::from_parts(self.value(b).shape().to_vec(), db)));
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                let data = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((x, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::Add => {
                for &input in &node.inputs {
                    if wants(input) {
                        out.push((input, g.clone()));
                    }
                }
            }
            Op::Scale(f) => out.push((node.inputs[0], g.map(|v| v * f))),
            Op::HadamardConst(s) => {
                let data = g
                    .data()
                    .chunks_exact(s.len())
                    .flat_map(|chunk| chunk.iter().zip(s.data()).map(|(a, b)| a * b))
                    .collect();
                out.push((node.inputs[0], Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::ClassAggregate(spec) => {
                let x = node.inputs[0];
                let tx = self.value(x);
                let mut data = vec![0.0f32; tx.len()];
                for (c, s) in spec.maps.iter().enumerate() {
                    if Some(c) == spec.skip {
                        continue;
                    }
                    let n = s.len();
                    for ((d, xc), gc) in data
                        .chunks_exact_mut(n)
                        .zip(tx.data().chunks_exact(n))
                        .zip(g.data().chunks_exact(n))
                    {
                        for (((d, &a), &gv), &m) in d.iter_mut().zip(xc).zip(gc).zip(s.data()) {
                            if a * m > 0.0 {
                                *d += m * gv;
                            }
                        }
                    }
                }
                for v in &mut data {
                    *v *= spec.factor;
                }
                out.push((x, Tensor::from_parts(tx.shape().to_vec(), data)));
            }
            Op::SoftmaxChannels => {
                let y = &node.value;
                let c = y.channels();
                let mut data = vec![0.0f32; y.len()];
                for ((yp, gp), dp) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(data.chunks_exact_mut(c))
                {
                    let dot: f32 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dp.iter_mut().zip(yp).zip(gp) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((node.inputs[0], Tensor::from_parts(y.shape().to_vec(), data)));
            }
            Op::Sum => {
                let x = node.inputs[0];
                out.push((x, Tensor::full(self.value(x).shape(), g.item())));
            }
            Op::CrossEntropy(spec) => {
                let x = node.inputs[0];
                let t = self.value(x);
                let c = t.channels();
                let mut data = vec![0.0f32; t.len()];
                if spec.denom > 0 {
                    let scale = g.item() / spec.denom as f32;
                    for ((px, &y), dp) in t
                        .data()
                        .chunks_exact(c)
                        .zip(&spec.labels)
                        .zip(data.chunks_exact_mut(c))
                    {
                        if y == IGNORE_LABEL || Some(y) == spec.masked {
                            continue;
                        }
                        kernels::softmax_into(px, dp);
                        let w = scale * spec.weights[y as usize];
                        dp[y as usize] -= 1.0;
                        for d in dp.iter_mut() {
                            *d *= w;
                        }
                    }
                }
                out.push((x, Tensor::from_parts(t.shape().to_vec(), data)));
            }
            Op::ChannelProbMean(class) => {
                let x = node.inputs[0];
                let t = self.value(x);
                let c = t.channels();
                let pixels = t.len() / c;
                let scale = g.item() / pixels as f32;
                let mut data = vec![0.0f32; t.len()];
                for (px, dp) in t.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
                    kernels::softmax_into(px, dp);
                    let pz = dp[*class];
                    for (j, d) in dp.iter_mut().enumerate() {
                        let delta = if j == *class { 1.0 } else { 0.0 };
                        *d = scale * pz * (delta - *d);
                    }
                }
                out.push((x, Tensor::from_parts(t.shape().to_vec(), data)));
            }
        }
        Ok(out)
    }
}

fn conv_geometry(x: &Tensor, kernel: &Tensor, bias: &Tensor, padding: Padding) -> Result<ConvGeom> {
    let (batch, in_h, in_w, cin) = match *x.shape() {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        ref s => {
            return Err(Error::shape(
                "conv2d",
                format!("input must be rank 3 or 4, got {s:?}"),
            ))
        }
    };
    let [kh, kw, kcin, cout] = *kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [kh,kw,cin,cout], got {:?}", kernel.shape()),
        ));
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} must have odd spatial dims"),
        ));
    }
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} for {cout} outputs", bias.shape()),
        ));
    }
    let (pad_h, pad_w) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    if in_h + 2 * pad_h < kh || in_w + 2 * pad_w < kw {
        return Err(Error::shape(
            "conv2d",
            format!("{in_h}x{in_w} input smaller than {kh}x{kw} kernel"),
        ));
    }
    Ok(ConvGeom {
        batch,
        in_h,
        in_w,
        cin,
        kh,
        kw,
        cout,
        pad_h,
        pad_w,
        out_h: in_h + 2 * pad_h - kh + 1,
        out_w: in_w + 2 * pad_w - kw + 1,
    })
}
