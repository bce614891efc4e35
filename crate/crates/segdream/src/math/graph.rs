//! Eager computation graph with reverse-mode differentiation.
//!
//! Values are computed at op-construction time so callers can inspect
//! intermediate results (e.g. to sample latents) while building the graph;
//! `backward` then walks the tape in reverse. Nodes reached only through
//! `stop_grad` receive no gradient, exactly.

use super::conv::{col2im_acc, im2col, ConvMeta};
use super::{matmul, Elem};
use ndarray::{ArrayD, Axis, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op<E: Elem> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, E),
    MaxScalar(NodeId, E),
    Matmul(NodeId, NodeId),
    AddRows(NodeId, NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SumAll(NodeId),
    SumLast(NodeId),
    Reshape(NodeId),
    ConcatLast(Vec<NodeId>),
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        meta: ConvMeta,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        meta: ConvMeta,
    },
    StopGrad(#[allow(dead_code)] NodeId),
    StraightThrough(NodeId),
    BceLogits {
        logits: NodeId,
        target: ArrayD<E>,
        pos_weight: E,
    },
}

struct Node<E: Elem> {
    value: ArrayD<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<E: Elem> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Grads<E> {
    /// Gradient of the backward root w.r.t. this node; `None` means exactly zero.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<E>> {
        self.grads[id.idx()].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<E>> {
        self.grads[id.idx()].take()
    }
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<E> {
        &self.nodes[id.idx()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.idx()].value.shape()
    }

    fn push(&mut self, value: ArrayD<E>, op: Op<E>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks, targets).
    pub fn constant(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = same_shape_zip(self.value(a), self.value(b), "add", |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = same_shape_zip(self.value(a), self.value(b), "sub", |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = same_shape_zip(self.value(a), self.value(b), "mul", |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: E) -> NodeId {
        let v = self.value(a).mapv(|x| x + s);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: E) -> NodeId {
        let v = self.value(a).mapv(|x| x * s);
        let g = self.ng(a);
        self.push(v, Op::MulScalar(a, s), g)
    }

    /// Elementwise `max(x, s)`; gradient passes only where `x > s`.
    pub fn max_scalar(&mut self, a: NodeId, s: E) -> NodeId {
        let v = self.value(a).mapv(|x| if x > s { x } else { s });
        let g = self.ng(a);
        self.push(v, Op::MaxScalar(a, s), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.value(a), "matmul lhs");
        let bv = as2(self.value(b), "matmul rhs");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = matmul(av, bv).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    /// `x [n,d] + bias [d]` broadcast over rows.
    pub fn add_rows(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = as2(self.value(x), "add_rows x");
        let bv = self.value(bias);
        assert_eq!(bv.ndim(), 1, "add_rows bias must be 1-d");
        assert_eq!(xv.ncols(), bv.len(), "add_rows dims");
        let mut v = xv.to_owned();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in v.axis_iter_mut(Axis(0)) {
            row += &b1;
        }
        let g = self.ng(x) || self.ng(bias);
        self.push(v.into_dyn(), Op::AddRows(x, bias), g)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.tanh());
        let g = self.ng(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.exp());
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.ln());
        let g = self.ng(a);
        self.push(v, Op::Ln(a), g)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(softplus);
        let g = self.ng(a);
        self.push(v, Op::Softplus(a), g)
    }

    /// Row-wise softmax over the last axis of a 2-d array.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let av = as2(self.value(a), "softmax");
        let mut v = av.to_owned();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let g = self.ng(a);
        self.push(v.into_dyn(), Op::SoftmaxLast(a), g)
    }

    pub fn log_softmax_last(&mut self, a: NodeId) -> NodeId {
        let av = as2(self.value(a), "log_softmax");
        let mut v = av.to_owned();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).fold(E::zero(), |a, b| a + b).ln();
            row.mapv_inplace(|x| x - lse);
        }
        let g = self.ng(a);
        self.push(v.into_dyn(), Op::LogSoftmaxLast(a), g)
    }

    /// Layer normalization over the last axis of a 2-d array with learned
    /// gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = as2(self.value(x), "layer_norm x");
        let d = xv.ncols();
        assert_eq!(self.value(gain).len(), d, "layer_norm gain dim");
        assert_eq!(self.value(bias).len(), d, "layer_norm bias dim");
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut v = xv.to_owned();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let (mean, inv) = row_norm_stats(row.view());
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean) * inv * g1[j] + b1[j];
            }
        }
        let g = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v.into_dyn(), Op::LayerNorm { x, gain, bias }, g)
    }

    /// Sum of all elements, as a length-1 array.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let g = self.ng(a);
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::SumAll(a), g)
    }

    /// Mean of all elements, as a length-1 array.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, E::from_f64(1.0 / n as f64))
    }

    /// Sum over the last axis: `[..., k] -> [...]`.
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let nd = av.ndim();
        assert!(nd >= 1, "sum_last needs >= 1 axis");
        let v = av.sum_axis(Axis(nd - 1));
        let g = self.ng(a);
        self.push(v, Op::SumLast(a), g)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let av = self.value(a);
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch: {:?} -> {:?}",
            av.shape(),
            shape
        );
        let v = av
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        let g = self.ng(a);
        self.push(v, Op::Reshape(a), g)
    }

    /// Concatenate 2-d arrays along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p), "concat_last")).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_last shapes");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v.into_dyn(), Op::ConcatLast(parts.to_vec()), g)
    }

    /// Columns `[start, start+len)` of a 2-d array.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = as2(self.value(x), "slice_last");
        assert!(start + len <= xv.ncols(), "slice_last range");
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        let g = self.ng(x);
        self.push(v.into_dyn(), Op::SliceLast { x, start, len }, g)
    }

    /// Concatenate along axis 0 (stacking time steps into one batch).
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.shape()[0], "slice_rows range");
        let v = xv
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let g = self.ng(x);
        self.push(v, Op::SliceRows { x, start, len }, g)
    }

    /// 4x4 stride-2 pad-1 convolution of NHWC input `x` with weight
    /// `[k*k*cin, cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "conv2d input must be NHWC");
        let (b, h, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[3]);
        assert_eq!(xv.shape()[1], xv.shape()[2], "conv2d expects square images");
        let wv = as2(self.value(w), "conv2d weight");
        assert_eq!(wv.nrows(), 16 * cin, "conv2d weight rows");
        let cout = wv.ncols();
        let meta = ConvMeta::conv(b, h, cin, cout);
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let col = im2col(x4, &meta);
        let out2 = matmul(col.view(), wv);
        let v = out2
            .into_shape_with_order(IxDyn(&[b, meta.out_hw, meta.out_hw, cout]))
            .unwrap();
        let g = self.ng(x) || self.ng(w);
        self.push(v, Op::Conv { x, w, meta }, g)
    }

    /// 4x4 stride-2 pad-1 transposed convolution of NHWC input `x` with
    /// weight `[cin, k*k*cout]`; doubles the spatial size.
    pub fn conv2d_transpose(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "conv2d_transpose input must be NHWC");
        let (b, h, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[3]);
        assert_eq!(xv.shape()[1], xv.shape()[2]);
        let wv = as2(self.value(w), "conv2d_transpose weight");
        assert_eq!(wv.nrows(), cin, "conv2d_transpose weight rows");
        assert_eq!(wv.ncols() % 16, 0, "conv2d_transpose weight cols");
        let cout = wv.ncols() / 16;
        let meta = ConvMeta::conv_transpose(b, h, cin, cout);
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((b * h * h, cin))
            .unwrap();
        let col = matmul(x2, wv);
        let mut out = ndarray::Array4::<E>::zeros((b, meta.in_hw, meta.in_hw, cout));
        col2im_acc(&col, &meta, &mut out.view_mut());
        let g = self.ng(x) || self.ng(w);
        self.push(out.into_dyn(), Op::ConvTranspose { x, w, meta }, g)
    }

    /// Identity forward; no gradient flows to the argument.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad(a), false)
    }

    /// Forward value is exactly `sample`; the backward pass routes the
    /// gradient to `probs` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, probs: NodeId, sample: ArrayD<E>) -> NodeId {
        assert_eq!(self.value(probs).shape(), sample.shape(), "straight_through shapes");
        let g = self.ng(probs);
        self.push(sample, Op::StraightThrough(probs), g)
    }

    /// Elementwise binary cross-entropy from logits with a positive-class
    /// weight; targets are constants in {0,1}.
    pub fn bce_logits(&mut self, logits: NodeId, target: ArrayD<E>, pos_weight: E) -> NodeId {
        assert_eq!(self.value(logits).shape(), target.shape(), "bce_logits shapes");
        let lv = self.value(logits);
        let mut v = lv.clone();
        ndarray::Zip::from(&mut v).and(&target).for_each(|loss, &y| {
            let l = *loss;
            *loss = pos_weight * y * softplus(-l) + (E::one() - y) * softplus(l);
        });
        let g = self.ng(logits);
        self.push(v, Op::BceLogits { logits, target, pos_weight }, g)
    }

    /// Reverse pass from `root` (typically a scalar); returns per-node grads.
    pub fn backward(&self, root: NodeId) -> Grads<E> {
        let mut grads: Vec<Option<ArrayD<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.idx()] = Some(ArrayD::ones(self.nodes[root.idx()].value.shape()));
        for i in (0..=root.idx()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate_parents(&self, i: usize, g: &ArrayD<E>, grads: &mut [Option<ArrayD<E>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = same_shape_zip(g, self.value(*b), "mul bwd", |x, y| x * y);
                let gb = same_shape_zip(g, self.value(*a), "mul bwd", |x, y| x * y);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.acc(grads, *a, g.mapv(|x| x * *s)),
            Op::MaxScalar(a, s) => {
                let xv = self.value(*a);
                let ga = same_shape_zip(g, xv, "max_scalar bwd", |gv, x| {
                    if x > *s {
                        gv
                    } else {
                        E::zero()
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                let g2 = as2(g, "matmul grad");
                let av = as2(self.value(*a), "matmul lhs");
                let bv = as2(self.value(*b), "matmul rhs");
                if self.ng(*a) {
                    self.acc(grads, *a, matmul(g2, bv.t()).into_dyn());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, matmul(av.t(), g2).into_dyn());
                }
            }
            Op::AddRows(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*bias) {
                    let g2 = as2(g, "add_rows grad");
                    self.acc(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Silu(a) => {
                let ga = same_shape_zip(g, self.value(*a), "silu bwd", |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (E::one() - s))
                });
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = same_shape_zip(g, out, "tanh bwd", |gv, y| gv * (E::one() - y * y));
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = same_shape_zip(g, out, "sigmoid bwd", |gv, y| gv * y * (E::one() - y));
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = same_shape_zip(g, out, "exp bwd", |gv, y| gv * y);
                self.acc(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = same_shape_zip(g, self.value(*a), "ln bwd", |gv, x| gv / x);
                self.acc(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = same_shape_zip(g, self.value(*a), "softplus bwd", |gv, x| gv * sigmoid(x));
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxLast(a) => {
                let y = as2(out, "softmax value");
                let g2 = as2(g, "softmax grad");
                let mut ga = g2.to_owned();
                for (mut grow, yrow) in ga.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let dot = grow
                        .iter()
                        .zip(yrow.iter())
                        .fold(E::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                    for (ge, &yv) in grow.iter_mut().zip(yrow.iter()) {
                        *ge = yv * (*ge - dot);
                    }
                }
                self.acc(grads, *a, ga.into_dyn());
            }
            Op::LogSoftmaxLast(a) => {
                let y = as2(out, "log_softmax value");
                let g2 = as2(g, "log_softmax grad");
                let mut ga = g2.to_owned();
                for (mut grow, yrow) in ga.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let gsum = grow.sum();
                    for (ge, &yv) in grow.iter_mut().zip(yrow.iter()) {
                        *ge = *ge - yv.exp() * gsum;
                    }
                }
                self.acc(grads, *a, ga.into_dyn());
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = as2(self.value(*x), "layer_norm x");
                let gv = self.value(*gain);
                let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let g2 = as2(g, "layer_norm grad");
                let d = xv.ncols();
                let dn = E::from_f64(1.0 / d as f64);
                let mut gx = ndarray::Array2::<E>::zeros(xv.raw_dim());
                let mut ggain = ndarray::Array1::<E>::zeros(d);
                let mut gbias = ndarray::Array1::<E>::zeros(d);
                for ((xrow, grow), mut gxrow) in xv
                    .axis_iter(Axis(0))
                    .zip(g2.axis_iter(Axis(0)))
                    .zip(gx.axis_iter_mut(Axis(0)))
                {
                    let (mean, inv) = row_norm_stats(xrow);
                    // dxhat, plus gain/bias accumulation
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv;
                        let dxhat = grow[j] * g1[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggain[j] += grow[j] * xhat;
                        gbias[j] += grow[j];
                    }
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv;
                        let dxhat = grow[j] * g1[j];
                        gxrow[j] = inv * (dxhat - dn * sum_dxhat - xhat * dn * sum_dxhat_xhat);
                    }
                }
                self.acc(grads, *x, gx.into_dyn());
                if self.ng(*gain) {
                    self.acc(grads, *gain, ggain.into_dyn());
                }
                if self.ng(*bias) {
                    self.acc(grads, *bias, gbias.into_dyn());
                }
            }
            Op::SumAll(a) => {
                let s = g[[0]];
                let ga = ArrayD::from_elem(self.value(*a).raw_dim(), s);
                self.acc(grads, *a, ga);
            }
            Op::SumLast(a) => {
                let av = self.value(*a);
                let k = av.shape()[av.ndim() - 1];
                let mut ga = ArrayD::<E>::zeros(av.raw_dim());
                let gflat = g.as_slice().expect("contiguous grad");
                let gaflat = ga.as_slice_mut().expect("contiguous grad buffer");
                for (i, chunk) in gaflat.chunks_mut(k).enumerate() {
                    let gv = gflat[i];
                    for e in chunk {
                        *e = gv;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .unwrap();
                self.acc(grads, *a, ga);
            }
            Op::ConcatLast(parts) => {
                let g2 = as2(g, "concat_last grad");
                let mut start = 0;
                for &p in parts {
                    let w = as2(self.value(p), "concat part").ncols();
                    if self.ng(p) {
                        let gp = g2.slice(ndarray::s![.., start..start + w]).to_owned();
                        self.acc(grads, p, gp.into_dyn());
                    }
                    start += w;
                }
            }
            Op::SliceLast { x, start, len } => {
                let xv = as2(self.value(*x), "slice_last x");
                let g2 = as2(g, "slice_last grad");
                let mut ga = ndarray::Array2::<E>::zeros(xv.raw_dim());
                ga.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g2);
                self.acc(grads, *x, ga.into_dyn());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).shape()[0];
                    if self.ng(p) {
                        let gp = g
                            .slice_axis(Axis(0), ndarray::Slice::from(start..start + n))
                            .to_owned();
                        self.acc(grads, p, gp);
                    }
                    start += n;
                }
            }
            Op::SliceRows { x, start, len } => {
                let mut ga = ArrayD::<E>::zeros(self.value(*x).raw_dim());
                ga.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*start + *len))
                    .assign(g);
                self.acc(grads, *x, ga);
            }
            Op::Conv { x, w, meta } => {
                let g2 = g
                    .view()
                    .into_shape_with_order((meta.col_rows(), meta.out_ch))
                    .unwrap();
                if self.ng(*w) {
                    let x4 = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap();
                    let col = im2col(x4, meta);
                    let gw = matmul(col.t(), g2);
                    self.acc(grads, *w, gw.into_dyn());
                }
                if self.ng(*x) {
                    let wv = as2(self.value(*w), "conv weight");
                    let dcol = matmul(g2, wv.t());
                    let mut gx =
                        ndarray::Array4::<E>::zeros((meta.batch, meta.in_hw, meta.in_hw, meta.in_ch));
                    col2im_acc(&dcol, meta, &mut gx.view_mut());
                    self.acc(grads, *x, gx.into_dyn());
                }
            }
            Op::ConvTranspose { x, w, meta } => {
                // meta is in underlying-conv orientation: grid = convT input,
                // image = convT output.
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let dcol = im2col(g4, meta);
                let xv2 = self
                    .value(*x)
                    .view()
                    .into_shape_with_order((meta.col_rows(), meta.out_ch))
                    .unwrap();
                if self.ng(*w) {
                    let gw = matmul(xv2.t(), dcol.view());
                    self.acc(grads, *w, gw.into_dyn());
                }
                if self.ng(*x) {
                    let wv = as2(self.value(*w), "conv_transpose weight");
                    let gx2 = matmul(dcol.view(), wv.t());
                    let gx = gx2
                        .into_shape_with_order(self.value(*x).raw_dim())
                        .unwrap();
                    self.acc(grads, *x, gx);
                }
            }
            Op::StraightThrough(probs) => {
                self.acc(grads, *probs, g.clone());
            }
            Op::BceLogits { logits, target, pos_weight } => {
                let w = *pos_weight;
                let lv = self.value(*logits);
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(lv).and(target).for_each(|gv, &l, &y| {
                    let s = sigmoid(l);
                    *gv = *gv * ((E::one() - y) * s - w * y * (E::one() - s));
                });
                self.acc(grads, *logits, ga);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<E>>], id: NodeId, g: ArrayD<E>) {
        if !self.nodes[id.idx()].needs_grad {
            return;
        }
        match &mut grads[id.idx()] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn sigmoid<E: Elem>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn softplus<E: Elem>(x: E) -> E {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    let m = if x > E::zero() { x } else { E::zero() };
    m + (E::one() + (-x.abs()).exp()).ln()
}

const NORM_EPS: f64 = 1e-3;

fn row_norm_stats<E: Elem>(row: ndarray::ArrayView1<E>) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mean = row.sum() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).fold(E::zero(), |a, b| a + b) / n;
    let inv = E::one() / (var + E::from_f64(NORM_EPS)).sqrt();
    (mean, inv)
}

fn as2<'a, E: Elem>(a: &'a ArrayD<E>, what: &str) -> ndarray::ArrayView2<'a, E> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap_or_else(|_| panic!("{what}: expected 2-d array, got shape {:?}", a.shape()))
}

fn same_shape_zip<E: Elem>(
    a: &ArrayD<E>,
    b: &ArrayD<E>,
    what: &str,
    f: impl Fn(E, E) -> E,
) -> ArrayD<E> {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
    let mut out = a.clone();
    ndarray::Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
    out
}
