//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in insertion
//! order. Parameters are leaves created with [`Graph::param`]; anything built
//! from a parameter is marked as requiring a gradient. [`Graph::backward`]
//! consumes the graph, walks the tape in exact reverse order and returns the
//! accumulated gradient of every parameter leaf.
//!
//! Only the operations the segmentation network and the importance metric
//! need are provided. Convolutions are stride 1 with zero "same" padding;
//! resolution changes go through [`Graph::maxpool2x2`] and
//! [`Graph::upsample2x2`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of the operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    MaxPool2x2,
    Upsample2x2,
    Add,
    MatMul,
    SoftmaxChannel,
    CrossEntropy,
    L2SquaredNorm,
    Scale,
    Sum,
    Dropout,
    Reshape,
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
    },
    Relu(usize),
    MaxPool2x2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2x2(usize),
    Add(usize, usize),
    MatMul(usize, usize),
    SoftmaxChannel(usize),
    CrossEntropy {
        probs: usize,
        labels: Vec<usize>,
    },
    L2SquaredNorm(usize),
    Scale(usize, f64),
    Sum(usize),
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Reshape(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2x2 { .. } => OpKind::MaxPool2x2,
            Op::Upsample2x2(_) => OpKind::Upsample2x2,
            Op::Add(..) => OpKind::Add,
            Op::MatMul(..) => OpKind::MatMul,
            Op::SoftmaxChannel(_) => OpKind::SoftmaxChannel,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L2SquaredNorm(_) => OpKind::L2SquaredNorm,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Relu(a)
            | Op::Upsample2x2(a)
            | Op::SoftmaxChannel(a)
            | Op::L2SquaredNorm(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![*a],
            Op::MaxPool2x2 { input, .. } | Op::Dropout { input, .. } => vec![*input],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Add(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every parameter leaf after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. `None` for nodes that are not parameters.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs().into_iter().map(Var).collect()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn rank4(&self, op: &'static str, var: Var) -> Result<[usize; 4]> {
        match *self.value(var).shape() {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(
                op,
                format!("expected rank-4 input, got {s:?}"),
            )),
        }
    }

    /// 2-D convolution, stride 1, zero "same" padding, odd kernel extents.
    ///
    /// `input` is `[N, Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]` and the
    /// optional `bias` has `Cout` entries.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let [n, cin, h, w] = self.rank4("conv2d", input)?;
        let kshape = self.value(kernel).shape().to_vec();
        let [cout, kcin, kh, kw] = match kshape[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be rank 4, got {kshape:?}"),
                ))
            }
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl != cout {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {bl} entries, expected {cout}"),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
        };
        let out = geom.forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts_unchecked(vec![n, cout, h, w], out);
        self.record(
            "conv2d",
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), data);
        self.record("relu", value, Op::Relu(input.0))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major order.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("maxpool2x2", input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                format!("spatial extent {h}x{w} is not even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * x + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![n, c, oh, ow], out);
        self.record(
            "maxpool2x2",
            value,
            Op::MaxPool2x2 {
                input: input.0,
                argmax,
            },
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("upsample2x2_nearest", input)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                let srow = &src[plane * h * w + (y / 2) * w..][..w];
                let orow = &mut out[plane * oh * ow + y * ow..][..ow];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o = srow[x / 2];
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![n, c, oh, ow], out);
        self.record("upsample2x2_nearest", value, Op::Upsample2x2(input.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
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
        let value = Tensor::from_parts_unchecked(ta.shape().to_vec(), data);
        self.record("add", value, Op::Add(a.0, b.0))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.record("matmul", value, Op::MatMul(a.0, b.0))
    }

    /// Softmax over the channel axis of a `[N, C, H, W]` tensor.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("softmax_channel", input)?;
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(src[base + ch * hw + p]);
                }
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * hw + p] - max).exp();
                    out[base + ch * hw + p] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= total;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![n, c, h, w], out);
        self.record("softmax_channel", value, Op::SoftmaxChannel(input.0))
    }

    /// Mean pixelwise negative log-likelihood of `labels` under the class
    /// probabilities `probs` (`[N, C, H, W]`, labels laid out `[N, H, W]`).
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.rank4("cross_entropy_loss", probs)?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("{} labels for {} pixels", labels.len(), n * hw),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let p = self.value(probs).data();
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let (b, px) = (i / hw, i % hw);
            total -= p[b * c * hw + l * hw + px].max(f64::MIN_POSITIVE).ln();
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        self.record(
            "cross_entropy_loss",
            value,
            Op::CrossEntropy {
                probs: probs.0,
                labels: labels.to_vec(),
            },
        )
    }

    /// Sum of squares of every element.
    pub fn l2_squared_norm(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        self.record(
            "l2_squared_norm",
            Tensor::scalar(s),
            Op::L2SquaredNorm(input.0),
        )
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let t = self.value(input);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), data);
        self.record("scale", value, Op::Scale(input.0, factor))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(input.0))
    }

    /// Elementwise multiplication by a fixed mask (inverted dropout passes a
    /// mask of zeros and `1 / (1 - rate)`).
    pub fn dropout(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(input);
        if mask.len() != t.len() {
            return Err(Error::shape(
                "dropout",
                format!("mask has {} entries, input {}", mask.len(), t.len()),
            ));
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), data);
        self.record(
            "dropout",
            value,
            Op::Dropout {
                input: input.0,
                mask,
            },
        )
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())))?;
        self.record("reshape", value, Op::Reshape(input.0))
    }

    /// Propagates gradients from the scalar `loss` back to every parameter.
    ///
    /// Consumes the graph. Parameters the loss does not depend on receive an
    /// all-zero gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("graph is empty".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss is not a node of this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = nodes
            .iter()
            .map(|n| {
                (n.requires_grad && matches!(n.op, Op::Leaf)).then(|| vec![0.0; n.value.len()])
            })
            .collect();
        if nodes[loss.0].requires_grad {
            accumulate(&mut grads, loss.0, 1, |g| g[0] += 1.0);
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let needs = |i: usize| nodes[i].requires_grad;
            let len = |i: usize| nodes[i].value.len();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let s = nodes[*input].value.shape();
                    let k = nodes[*kernel].value.shape();
                    let geom = ConvGeom {
                        n: s[0],
                        cin: s[1],
                        h: s[2],
                        w: s[3],
                        cout: k[0],
                        kh: k[2],
                        kw: k[3],
                    };
                    if needs(*input) {
                        let kd = nodes[*kernel].value.data();
                        accumulate(&mut grads, *input, len(*input), |g| {
                            geom.backward_input(&gout, kd, g)
                        });
                    }
                    if needs(*kernel) {
                        let xd = nodes[*input].value.data();
                        accumulate(&mut grads, *kernel, len(*kernel), |g| {
                            geom.backward_kernel(&gout, xd, g)
                        });
                    }
                    if let Some(b) = bias.filter(|&b| needs(b)) {
                        accumulate(&mut grads, b, len(b), |g| geom.backward_bias(&gout, g));
                    }
                }
                Op::Relu(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads, *a, len(*a), |g| {
                        for ((gi, &go), &yi) in g.iter_mut().zip(&gout).zip(y) {
                            if yi > 0.0 {
                                *gi += go;
                            }
                        }
                    });
                }
                Op::MaxPool2x2 { input, argmax } => {
                    accumulate(&mut grads, *input, len(*input), |g| {
                        for (&src, &go) in argmax.iter().zip(&gout) {
                            g[src] += go;
                        }
                    });
                }
                Op::Upsample2x2(a) => {
                    let s = nodes[*a].value.shape();
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    accumulate(&mut grads, *a, len(*a), |g| {
                        for p in 0..planes {
                            for y in 0..oh {
                                let grow = &gout[p * oh * ow + y * ow..][..ow];
                                let irow = &mut g[p * h * w + (y / 2) * w..][..w];
                                for (x, &go) in grow.iter().enumerate() {
                                    irow[x / 2] += go;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for i in [*a, *b] {
                        if needs(i) {
                            accumulate(&mut grads, i, len(i), |g| {
                                g.iter_mut().zip(&gout).for_each(|(gi, go)| *gi += go)
                            });
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if needs(*a) {
                        let bd = nodes[*b].value.data();
                        accumulate(&mut grads, *a, m * k, |g| {
                            for i in 0..m {
                                for j in 0..k {
                                    let mut s = 0.0;
                                    for c in 0..n {
                                        s += gout[i * n + c] * bd[j * n + c];
                                    }
                                    g[i * k + j] += s;
                                }
                            }
                        });
                    }
                    if needs(*b) {
                        let ad = nodes[*a].value.data();
                        accumulate(&mut grads, *b, k * n, |g| {
                            for i in 0..m {
                                for j in 0..k {
                                    let av = ad[i * k + j];
                                    for c in 0..n {
                                        g[j * n + c] += av * gout[i * n + c];
                                    }
                                }
                            }
                        });
                    }
                }
                Op::SoftmaxChannel(a) => {
                    let s = node.value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let p = node.value.data();
                    accumulate(&mut grads, *a, len(*a), |g| {
                        for b in 0..n {
                            let base = b * c * hw;
                            for px in 0..hw {
                                let mut dot = 0.0;
                                for ch in 0..c {
                                    let i = base + ch * hw + px;
                                    dot += gout[i] * p[i];
                                }
                                for ch in 0..c {
                                    let i = base + ch * hw + px;
                                    g[i] += p[i] * (gout[i] - dot);
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy { probs, labels } => {
                    let s = nodes[*probs].value.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let p = nodes[*probs].value.data();
                    let scale = gout[0] / labels.len() as f64;
                    accumulate(&mut grads, *probs, len(*probs), |g| {
                        for (i, &l) in labels.iter().enumerate() {
                            let idx = (i / hw) * c * hw + l * hw + i % hw;
                            g[idx] -= scale / p[idx].max(f64::MIN_POSITIVE);
                        }
                    });
                }
                Op::L2SquaredNorm(a) => {
                    let x = nodes[*a].value.data();
                    accumulate(&mut grads, *a, len(*a), |g| {
                        for (gi, xi) in g.iter_mut().zip(x) {
                            *gi += 2.0 * xi * gout[0];
                        }
                    });
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, len(*a), |g| {
                        g.iter_mut().zip(&gout).for_each(|(gi, go)| *gi += f * go)
                    });
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, len(*a), |g| {
                        g.iter_mut().for_each(|gi| *gi += gout[0])
                    });
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, *a, len(*a), |g| {
                        g.iter_mut().zip(&gout).for_each(|(gi, go)| *gi += go)
                    });
                }
                Op::Dropout { input, mask } => {
                    accumulate(&mut grads, *input, len(*input), |g| {
                        for ((gi, go), m) in g.iter_mut().zip(&gout).zip(mask) {
                            *gi += go * m;
                        }
                    });
                }
            }
        }

        // Keep only parameter gradients.
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for j in 0..k {
            let av = a[i * k + j];
            for (o, bv) in orow.iter_mut().zip(&b[j * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

/// Valid output range `[lo, hi)` along one axis for a kernel tap at `offset`.
fn tap_range(extent: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

impl ConvGeom {
    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        (0..self.kh).flat_map(move |ky| {
            (0..self.kw).map(move |kx| (ky * self.kw + kx, ky as isize - ph, kx as isize - pw))
        })
    }

    fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let hw = self.h * self.w;
        let ksize = self.kh * self.kw;
        let mut out = vec![0.0; self.n * self.cout * hw];
        for b in 0..self.n {
            for o in 0..self.cout {
                let oplane = &mut out[(b * self.cout + o) * hw..][..hw];
                if let Some(bias) = bias {
                    oplane.fill(bias[o]);
                }
                for c in 0..self.cin {
                    let iplane = &x[(b * self.cin + c) * hw..][..hw];
                    let kbase = (o * self.cin + c) * ksize;
                    for (t, dy, dx) in self.taps() {
                        let wv = k[kbase + t];
                        let (y0, y1) = tap_range(self.h, dy);
                        let (x0, x1) = tap_range(self.w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let orow = &mut oplane[y * self.w + x0..y * self.w + x1];
                            let irow = &iplane[sy * self.w + sx..][..x1 - x0];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, gout: &[f64], k: &[f64], gin: &mut [f64]) {
        let hw = self.h * self.w;
        let ksize = self.kh * self.kw;
        for b in 0..self.n {
            for o in 0..self.cout {
                let gplane = &gout[(b * self.cout + o) * hw..][..hw];
                for c in 0..self.cin {
                    let iplane = &mut gin[(b * self.cin + c) * hw..][..hw];
                    let kbase = (o * self.cin + c) * ksize;
                    for (t, dy, dx) in self.taps() {
                        let wv = k[kbase + t];
                        let (y0, y1) = tap_range(self.h, dy);
                        let (x0, x1) = tap_range(self.w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let grow = &gplane[y * self.w + x0..y * self.w + x1];
                            let irow = &mut iplane[sy * self.w + sx..][..x1 - x0];
                            for (iv, gv) in irow.iter_mut().zip(grow) {
                                *iv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_kernel(&self, gout: &[f64], x: &[f64], gk: &mut [f64]) {
        let hw = self.h * self.w;
        let ksize = self.kh * self.kw;
        for b in 0..self.n {
            for o in 0..self.cout {
                let gplane = &gout[(b * self.cout + o) * hw..][..hw];
                for c in 0..self.cin {
                    let iplane = &x[(b * self.cin + c) * hw..][..hw];
                    let kbase = (o * self.cin + c) * ksize;
                    for (t, dy, dx) in self.taps() {
                        let (y0, y1) = tap_range(self.h, dy);
                        let (x0, x1) = tap_range(self.w, dx);
                        let mut s = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let grow = &gplane[y * self.w + x0..y * self.w + x1];
                            let irow = &iplane[sy * self.w + sx..][..x1 - x0];
                            s += grow.iter().zip(irow).map(|(g, i)| g * i).sum::<f64>();
                        }
                        gk[kbase + t] += s;
                    }
                }
            }
        }
    }

    fn backward_bias(&self, gout: &[f64], gb: &mut [f64]) {
        let hw = self.h * self.w;
        for b in 0..self.n {
            for (o, g) in gb.iter_mut().enumerate() {
                *g += gout[(b * self.cout + o) * hw..][..hw].iter().sum::<f64>();
            }
        }
    }
}
