//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]; inputs
//! always precede their consumers, so [`Tape::gradients`] simply walks the
//! nodes in reverse recording order.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    conv2d_backward, conv2d_forward, masked_softmax_row, matmul_at_into, matmul_bt_into,
    transpose_into, ConvGeom, Scalar, Tensor,
};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    DivGuarded,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnOp {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Square,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedSoftmaxRows {
        scores: Var,
        mask: Var,
        /// Per row: (normalizer, max over unmasked scores).
        stats: Vec<(F, F)>,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    BroadcastRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per row: (mean, 1/std).
        stats: Vec<(F, F)>,
    },
    Pick(Var, usize),
    StraightThrough(Var),
    Clamp(Var, F, F),
    Upsample(Var, usize),
}

/// Backward rules that [`Tape::inject_fault`] can corrupt, so the gradient
/// checker can be shown to catch a broken rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    MatMul,
    Softmax,
    MaskedSoftmax,
    Conv2d,
    StraightThrough,
    LayerNorm,
}

impl Fault {
    pub const ALL: [Fault; 6] = [
        Fault::MatMul,
        Fault::Softmax,
        Fault::MaskedSoftmax,
        Fault::Conv2d,
        Fault::StraightThrough,
        Fault::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fault::MatMul => "matmul",
            Fault::Softmax => "softmax",
            Fault::MaskedSoftmax => "masked_softmax",
            Fault::Conv2d => "conv2d",
            Fault::StraightThrough => "straight_through",
            Fault::LayerNorm => "layer_norm",
        }
    }

    pub fn parse(s: &str) -> Option<Fault> {
        Fault::ALL.into_iter().find(|f| f.name() == s)
    }

    fn hits<F>(self, op: &Op<F>) -> bool {
        matches!(
            (self, op),
            (Fault::MatMul, Op::MatMul(..))
                | (Fault::Softmax, Op::SoftmaxRows(_) | Op::LogSoftmaxRows(_))
                | (Fault::MaskedSoftmax, Op::MaskedSoftmaxRows { .. })
                | (Fault::Conv2d, Op::Conv2d { .. })
                | (Fault::StraightThrough, Op::StraightThrough(_))
                | (Fault::LayerNorm, Op::LayerNormRows { .. })
        )
    }
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
}

/// Records operations for one forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    /// Scales the upstream gradient entering every node of the given kind by
    /// 1.05 during backpropagation.
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() && self.inputs_finite(&op) {
            return Err(Error::NonFinite(format!("{op:?} produced non-finite output")));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_finite(&self, op: &Op<F>) -> bool {
        let fin = |v: &Var| self.nodes[v.0].value.all_finite();
        match op {
            Op::Leaf | Op::Param => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => fin(a) && fin(b),
            Op::MaskedSoftmaxRows { scores, mask, .. } => fin(scores) && fin(mask),
            Op::Conv2d { input, kernels, .. } => fin(input) && fin(kernels),
            Op::ChannelBias { input, bias } => fin(input) && fin(bias),
            Op::LayerNormRows { x, gamma, beta, .. } => fin(x) && fin(gamma) && fin(beta),
            // exp can legitimately overflow on large finite input
            Op::Unary(UnOp::Exp, _) => false,
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::BroadcastRows(a)
            | Op::Pick(a, _)
            | Op::StraightThrough(a)
            | Op::Clamp(a, _, _)
            | Op::Upsample(a, _) => fin(a),
        }
    }

    /// Records a constant input. Its gradient is still available from
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Records a parameter; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op_name(op), x, y)?;
        let n: usize = shape.iter().product();
        let (xs, ys) = (x.numel() == 1 && n != 1, y.numel() == 1 && n != 1);
        let xv = |i: usize| if xs { x.data()[0] } else { x.data()[i] };
        let yv = |i: usize| if ys { y.data()[0] } else { y.data()[i] };
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let (p, q) = (xv(i), yv(i));
            data.push(match op {
                BinOp::Add => p + q,
                BinOp::Sub => p - q,
                BinOp::Mul => p * q,
                BinOp::Div => {
                    if q == F::zero() {
                        return Err(Error::DivisionByZero("div"));
                    }
                    p / q
                }
                BinOp::DivGuarded => {
                    if q == F::zero() {
                        F::zero()
                    } else {
                        p / q
                    }
                }
                BinOp::Min => p.min(q),
            });
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    /// Pointwise division; any zero in the divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// Pointwise division with `x / 0 := 0` (value and gradient).
    pub fn div_guarded(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::DivGuarded, a, b)
    }

    /// Pointwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Min, a, b)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == UnOp::Log && x.data().iter().any(|&v| v <= F::zero()) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let out = x.map(|v| match op {
            UnOp::Neg => -v,
            UnOp::Exp => v.exp(),
            UnOp::Log => v.ln(),
            UnOp::Sigmoid => sigmoid(v),
            UnOp::Tanh => v.tanh(),
            UnOp::Relu => v.max(F::zero()),
            UnOp::Square => v * v,
        });
        self.push(out, Op::Unary(op, a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Square, a)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / F::lit(x.numel() as f64));
        self.push(out, Op::Mean(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, n) = x.dims2("log_softmax_rows")?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// `(Z ⊘ Z11ᵀ)` with `Z = mask ⊙ exp(scores)`, stabilized over unmasked
    /// entries; rows without any unmasked entry are zero (0/0 := 0).
    pub fn masked_softmax_rows(&mut self, scores: Var, mask: Var) -> Result<Var> {
        let (s, m) = (self.value(scores), self.value(mask));
        let (rows, n) = s.dims2("masked_softmax_rows")?;
        if s.shape() != m.shape() {
            return Err(Error::shape("masked_softmax_rows", s.shape(), m.shape()));
        }
        let mut out = vec![F::zero(); rows * n];
        let mut stats = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = i * n..(i + 1) * n;
            stats.push(masked_softmax_row(&s.data()[r.clone()], &m.data()[r.clone()], &mut out[r]));
        }
        let out = Tensor::new(s.shape().to_vec(), out)?;
        self.push(out, Op::MaskedSoftmaxRows { scores, mask, stats })
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernels), stride)?;
        let mut out = vec![F::zero(); geom.out_len()];
        conv2d_forward(&geom, self.value(input).data(), self.value(kernels).data(), &mut out);
        let out = Tensor::new(vec![geom.f, geom.oh, geom.ow], out)?;
        self.push(out, Op::Conv2d { input, kernels, geom })
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×H×W` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let c = x.shape().first().copied().unwrap_or(0);
        if x.shape().len() != 3 || b.numel() != c {
            return Err(Error::shape("channel_bias", x.shape(), b.shape()));
        }
        let plane = x.numel() / c.max(1);
        let mut data = x.data().to_vec();
        for (ch, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            let bv = b.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::ChannelBias { input, bias })
    }

    /// Tiles a length-`n` vector (any shape with `n` elements) into `rows×n`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let x = self.value(v);
        let n = x.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push(out, Op::BroadcastRows(v))
    }

    /// `x + bias` where `x` is `m×n` and `bias` has `n` elements.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.shape(x).first().copied().unwrap_or(1);
        let b = self.broadcast_rows(bias, rows)?;
        self.add(x, b)
    }

    /// Per-row layer normalization with elementwise affine `gamma`, `beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, n) = xv.dims2("layer_norm_rows")?;
        if g.numel() != n || b.numel() != n {
            return Err(Error::shape("layer_norm_rows", xv.shape(), g.shape()));
        }
        let nf = F::lit(n as f64);
        let mut data = Vec::with_capacity(rows * n);
        let mut stats = Vec::with_capacity(rows);
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let inv = F::one() / (var + F::lit(LN_EPS)).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * g.data()[j] + b.data()[j]);
            }
            stats.push((mean, inv));
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push(out, Op::LayerNormRows { x, gamma, beta, stats })
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        let item = *v
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("pick", v.shape(), &[index]))?;
        self.push(Tensor::scalar(item), Op::Pick(x, index))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor<F>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Nearest-neighbour upsampling of a `C×H×W` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        let &[c, h, w] = v.shape() else {
            return Err(Error::shape("upsample_nearest", v.shape(), &[0, 0, 0]));
        };
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![F::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(ch * oh + y) * ow + xx] = v.data()[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data)?;
        self.push(out, Op::Upsample(x, factor))
    }

    /// Backpropagates from a scalar `loss` through every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// [`Tape::gradients`] plus accumulation of parameter gradients into
    /// `store`'s gradient slots. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let corrupted: Vec<F>;
        let g = match self.fault {
            Some(f) if f.hits(&node.op) => {
                corrupted = g.iter().map(|&v| v * F::lit(1.05)).collect();
                &corrupted[..]
            }
            _ => g,
        };
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                matmul_bt_into(g, bv.data(), slot(grads, *a, m * k), m, n, k);
                matmul_at_into(av.data(), g, slot(grads, *b, k * n), m, k, n);
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[1], y.shape()[0]);
                let mut t = vec![F::zero(); m * n];
                transpose_into(g, &mut t, n, m);
                add_into(slot(grads, *a, m * n), &t);
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Binary(op, a, b) => self.backprop_binary(*op, *a, *b, g, grads),
            Op::Unary(op, a) => {
                let x = val(*a).data();
                let yd = y.data();
                let ga = slot(grads, *a, x.len());
                for i in 0..x.len() {
                    ga[i] += g[i]
                        * match op {
                            UnOp::Neg => -F::one(),
                            UnOp::Exp => yd[i],
                            UnOp::Log => F::one() / x[i],
                            UnOp::Sigmoid => yd[i] * (F::one() - yd[i]),
                            UnOp::Tanh => F::one() - yd[i] * yd[i],
                            UnOp::Relu => {
                                if x[i] > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnOp::Square => F::lit(2.0) * x[i],
                        };
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi * *s;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(*a).numel();
                let gi = match node.op {
                    Op::Mean(_) => g[0] / F::lit(n as f64),
                    _ => g[0],
                };
                slot(grads, *a, n).iter_mut().for_each(|o| *o += gi);
            }
            Op::SoftmaxRows(a) => {
                let n = y.shape()[1];
                let ga = slot(grads, *a, y.numel());
                for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let n = y.shape()[1];
                let ga = slot(grads, *a, y.numel());
                for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: F = gr.iter().copied().sum();
                    for j in 0..n {
                        out[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::MaskedSoftmaxRows { scores, mask, stats } => {
                let n = y.shape()[1];
                let s = val(*scores).data();
                let len = y.numel();
                let mut dots = Vec::with_capacity(stats.len());
                for (gr, pr) in g.chunks(n).zip(y.data().chunks(n)) {
                    dots.push(gr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<F>());
                }
                {
                    let gs = slot(grads, *scores, len);
                    for i in 0..stats.len() {
                        for j in 0..n {
                            let k = i * n + j;
                            gs[k] += y.data()[k] * (g[k] - dots[i]);
                        }
                    }
                }
                let gm = slot(grads, *mask, len);
                let cap = F::lit(60.0);
                for (i, &(total, max)) in stats.iter().enumerate() {
                    if total <= F::zero() {
                        continue;
                    }
                    let log_total = total.ln();
                    for j in 0..n {
                        let k = i * n + j;
                        let w = (s[k] - max - log_total).min(cap).exp();
                        gm[k] += w * (g[k] - dots[i]);
                    }
                }
            }
            Op::Conv2d { input, kernels, geom } => {
                let (x, k) = (val(*input), val(*kernels));
                let mut gx = vec![F::zero(); x.numel()];
                let mut gk = vec![F::zero(); k.numel()];
                conv2d_backward(geom, x.data(), k.data(), g, Some(&mut gx), Some(&mut gk));
                add_into(slot(grads, *input, gx.len()), &gx);
                add_into(slot(grads, *kernels, gk.len()), &gk);
            }
            Op::ChannelBias { input, bias } => {
                add_into(slot(grads, *input, g.len()), g);
                let c = val(*bias).numel();
                let plane = g.len() / c.max(1);
                let gb = slot(grads, *bias, c);
                for (ch, chunk) in g.chunks(plane.max(1)).enumerate() {
                    gb[ch] += chunk.iter().copied().sum::<F>();
                }
            }
            Op::BroadcastRows(v) => {
                let n = val(*v).numel();
                let gv = slot(grads, *v, n);
                for row in g.chunks(n.max(1)) {
                    add_into(gv, row);
                }
            }
            Op::LayerNormRows { x, gamma, beta, stats } => {
                let xv = val(*x);
                let gmv = val(*gamma).data().to_vec();
                let n = xv.shape()[1];
                let nf = F::lit(n as f64);
                let mut gx = vec![F::zero(); xv.numel()];
                let mut ggamma = vec![F::zero(); n];
                let mut gbeta = vec![F::zero(); n];
                for (i, &(mean, inv)) in stats.iter().enumerate() {
                    let row = &xv.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut sum_gh = F::zero();
                    let mut sum_ghx = F::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                        let gh = gr[j] * gmv[j];
                        sum_gh += gh;
                        sum_ghx += gh * xhat;
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gh = gr[j] * gmv[j];
                        gx[i * n + j] = inv * (gh - sum_gh / nf - xhat * sum_ghx / nf);
                    }
                }
                add_into(slot(grads, *x, gx.len()), &gx);
                add_into(slot(grads, *gamma, n), &ggamma);
                add_into(slot(grads, *beta, n), &gbeta);
            }
            Op::Pick(x, index) => {
                let n = val(*x).numel();
                slot(grads, *x, n)[*index] += g[0];
            }
            Op::StraightThrough(soft) => add_into(slot(grads, *soft, g.len()), g),
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, xv.len());
                for i in 0..xv.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Upsample(x, factor) => {
                let xv = val(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oh, ow) = (h * factor, w * factor);
                let gx = slot(grads, *x, xv.numel());
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            gx[(ch * h + yy / factor) * w + xx / factor] += g[(ch * oh + yy) * ow + xx];
                        }
                    }
                }
            }
        }
    }

    fn backprop_binary(&self, op: BinOp, a: Var, b: Var, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = g.len();
        let xs = x.numel() == 1 && n != 1;
        let ys = y.numel() == 1 && n != 1;
        let xv = |i: usize| if xs { x.data()[0] } else { x.data()[i] };
        let yv = |i: usize| if ys { y.data()[0] } else { y.data()[i] };
        let mut ga = vec![F::zero(); x.numel()];
        let mut gb = vec![F::zero(); y.numel()];
        for i in 0..n {
            let (p, q) = (xv(i), yv(i));
            let (da, db) = match op {
                BinOp::Add => (g[i], g[i]),
                BinOp::Sub => (g[i], -g[i]),
                BinOp::Mul => (g[i] * q, g[i] * p),
                BinOp::Div => (g[i] / q, -g[i] * p / (q * q)),
                BinOp::DivGuarded => {
                    if q == F::zero() {
                        (F::zero(), F::zero())
                    } else {
                        (g[i] / q, -g[i] * p / (q * q))
                    }
                }
                BinOp::Min => {
                    if p <= q {
                        (g[i], F::zero())
                    } else {
                        (F::zero(), g[i])
                    }
                }
            };
            ga[if xs { 0 } else { i }] += da;
            gb[if ys { 0 } else { i }] += db;
        }
        add_into(slot(grads, a, ga.len()), &ga);
        add_into(slot(grads, b, gb.len()), &gb);
    }
}

fn op_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
        BinOp::DivGuarded => "div_guarded",
        BinOp::Min => "minimum",
    }
}

fn broadcast_shape<F: Scalar>(op: &'static str, x: &Tensor<F>, y: &Tensor<F>) -> Result<Vec<usize>> {
    if x.shape() == y.shape() {
        Ok(x.shape().to_vec())
    } else if y.numel() == 1 {
        Ok(x.shape().to_vec())
    } else if x.numel() == 1 {
        Ok(y.shape().to_vec())
    } else {
        Err(Error::shape(op, x.shape(), y.shape()))
    }
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
