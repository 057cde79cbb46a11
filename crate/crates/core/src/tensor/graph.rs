//! Tape of executed operations. Nodes are appended in execution order, so
//! every op's inputs precede it and backward is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{mm_acc, mm_nt_acc, mm_tn_acc};
use super::{shape_err, Gradients, ParamId, ParamStore, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "gelu" => Some(Activation::Gelu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let inner = F::lit(GELU_C) * (x + F::lit(0.044715) * x * x * x);
                F::lit(0.5) * x * (F::one() + inner.tanh())
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Activation::Tanh => F::one() - y * y,
            Activation::Sigmoid => y * (F::one() - y),
            Activation::Gelu => {
                let c = F::lit(GELU_C);
                let a = F::lit(0.044715);
                let t = (c * (x + a * x * x * x)).tanh();
                let half = F::lit(0.5);
                half * (F::one() + t)
                    + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, F),
    Act(Var, Activation),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout(Var, Vec<F>),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Log(Var, F),
    Clamp(Var, F, F),
    Pick(Var, Vec<usize>),
    BceWithLogits(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<F>,
        op: Op<F>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Input value; `requires_grad` marks it for gradient collection.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, format!("expected 2-D operand, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        mm_acc(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![F::zero(); m * n];
        mm_nt_acc(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul_nt", t, Op::MatMulNT(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_checked(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let c = self.val(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for rows of width {c}", self.shape(bias)),
            ));
        }
        let b = self.val(bias).data().to_vec();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    /// `mul * x + add`, elementwise with constants.
    pub fn affine(&mut self, x: Var, mul: F, add: F) -> Result<Var, TensorError> {
        let data = self.val(x).data().iter().map(|&v| mul * v + add).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("affine", t, Op::Affine(x, mul), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var, TensorError> {
        self.affine(x, factor, F::zero())
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        let data = self.val(x).data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked(kind.name(), t, Op::Act(x, kind), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Gelu)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let c = self.val(x).last_dim();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("softmax", t, Op::Softmax(x), &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let c = self.val(x).last_dim();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("log_softmax", t, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<Var, TensorError> {
        let c = self.val(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", "gamma/beta must match last axis"));
        }
        if eps <= F::zero() {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                detail: "eps must be positive".into(),
            });
        }
        let g = self.val(gamma).data().to_vec();
        let b = self.val(beta).data().to_vec();
        let xs = self.val(x).data();
        let rows = self.val(x).n_rows();
        let cf = F::from_usize_lossy(c);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push_checked(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout: identity in eval mode, otherwise zeroes each element
    /// with probability `p` and scales survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: F,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(p >= F::zero() && p < F::one()) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("probability {p} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || p == F::zero() {
            return Ok(x);
        }
        let keep = F::one() / (F::one() - p);
        let p64 = p.as_f64();
        let mask: Vec<F> = (0..self.val(x).len())
            .map(|_| {
                if rng.random::<f64>() < p64 {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .val(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("dropout", t, Op::Dropout(x, mask), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.val(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push_checked("transpose", t, Op::Transpose(x), &[x])
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start >= end || end > c {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{end} of {c} columns"),
            ));
        }
        let w = end - start;
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        self.push_checked("slice_cols", t, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no operands"))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        self.push_checked("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `indices` of a 2-D tensor, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("gather_rows", table)?;
        let src = self.val(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    detail: format!("row {i} out of range for {r} rows"),
                });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![indices.len(), c], out)?;
        self.push_checked(
            "gather_rows",
            t,
            Op::GatherRows(table, indices.to_vec()),
            &[table],
        )
    }

    /// Mean of rows `start..end`, shape `[1, d]`.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("mean_rows", x)?;
        if start >= end || end > r {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                detail: format!("row range {start}..{end} of {r}"),
            });
        }
        let src = self.val(x).data();
        let mut out = vec![F::zero(); c];
        for i in start..end {
            for (o, &v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let n = F::from_usize_lossy(end - start);
        for o in out.iter_mut() {
            *o /= n;
        }
        let t = Tensor::new(vec![1, c], out)?;
        self.push_checked("mean_rows", t, Op::MeanRows(x, start, end), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.val(x).data().iter().copied().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.val(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.val(x).data().iter().copied().sum::<F>() / F::from_usize_lossy(n);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Natural log with inputs clamped below at `floor`; clamped entries pass no gradient.
    pub fn log_clamped(&mut self, x: Var, floor: F) -> Result<Var, TensorError> {
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| v.max(floor).ln())
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("log", t, Op::Log(x, floor), &[x])
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var, TensorError> {
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_checked("clamp", t, Op::Clamp(x, lo, hi), &[x])
    }

    /// Element `cols[r]` of each row `r`, shape `[rows]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("pick", x)?;
        if cols.len() != r {
            return Err(shape_err(
                "pick",
                format!("{} indices for {r} rows", cols.len()),
            ));
        }
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::Invalid {
                    op: "pick",
                    detail: format!("column {j} out of range for {c}"),
                });
            }
            out.push(src[i * c + j]);
        }
        let t = Tensor::new(vec![r], out)?;
        self.push_checked("pick", t, Op::Pick(x, cols.to_vec()), &[x])
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[bool]) -> Result<Var, TensorError> {
        let z = self.val(logits).data();
        if z.len() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits for {} targets", z.len(), targets.len()),
            ));
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&zi, &t)| if t { softplus(-zi) } else { softplus(zi) })
            .sum();
        self.push_checked(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.to_vec()),
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] and
    /// [`Graph::param_grads`] expose the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.val(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.needs(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = node.value.last_dim();
                let bv = self.nodes[b.0].value.data();
                let av = self.nodes[a.0].value.data();
                acc(*a, &mut |ga| mm_nt_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| mm_tn_acc(av, g, gb, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = node.value.last_dim();
                let bv = self.nodes[b.0].value.data();
                let av = self.nodes[a.0].value.data();
                acc(*a, &mut |ga| mm_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| mm_tn_acc(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let c = node.value.last_dim();
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Affine(x, m) => acc(*x, &mut |gx| {
                for (a, &gy) in gx.iter_mut().zip(g) {
                    *a += gy * *m;
                }
            }),
            Op::Act(x, kind) => {
                let xv = self.nodes[x.0].value.data();
                let yv = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dotp: F = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let total: F = dr.iter().copied().sum();
                        for j in 0..c {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let gam = self.nodes[gamma.0].value.data();
                let cf = F::from_usize_lossy(c);
                acc(*x, &mut |gx| {
                    for (r, ((gr, hr), dr)) in gx
                        .chunks_mut(c)
                        .zip(xhat.chunks(c))
                        .zip(g.chunks(c))
                        .enumerate()
                    {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dh = dr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            let dh = dr[j] * gam[j];
                            gr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (hr, dr) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for dr in g.chunks(c) {
                        add_into(gb, dr);
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for ((a, &gy), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gy * m;
                }
            }),
            Op::Transpose(x) => {
                let (r, c) = dims(&self.nodes[x.0].value);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (r, c) = dims(&self.nodes[x.0].value);
                let w = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let (r, w) = dims(&self.nodes[p.0].value);
                    acc(*p, &mut |gp| {
                        for i in 0..r {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(t, indices) => {
                let c = node.value.last_dim();
                acc(*t, &mut |gt| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::MeanRows(x, start, end) => {
                let c = node.value.last_dim();
                let n = F::from_usize_lossy(end - start);
                acc(*x, &mut |gx| {
                    for i in *start..*end {
                        for j in 0..c {
                            gx[i * c + j] += g[j] / n;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for a in gx.iter_mut() {
                    *a += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = F::from_usize_lossy(self.nodes[x.0].value.len());
                acc(*x, &mut |gx| {
                    for a in gx.iter_mut() {
                        *a += g[0] / n;
                    }
                });
            }
            Op::Log(x, floor) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > *floor {
                            gx[i] += g[i] / xv[i];
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Pick(x, cols) => {
                let c = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
            Op::BceWithLogits(z, targets) => {
                let zv = self.nodes[z.0].value.data();
                acc(*z, &mut |gz| {
                    for i in 0..gz.len() {
                        let t = if targets[i] { F::one() } else { F::zero() };
                        gz[i] += g[0] * (sigmoid(zv[i]) - t);
                    }
                });
            }
        }
    }

    /// Gradients of trainable parameter leaves after [`Graph::backward`].
    pub fn param_grads(&self, n_params: usize) -> Result<Gradients<F>, TensorError> {
        let mut out = Gradients::new(n_params);
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort();
        for (&id, &v) in ids {
            if let Some(g) = self.grad(v) {
                out.accumulate(id, g, F::one());
            }
        }
        Ok(out)
    }
}

fn dims<F: Scalar>(t: &Tensor<F>) -> (usize, usize) {
    match *t.shape() {
        [r, c] => (r, c),
        _ => unreachable!("2-D operand checked at forward time"),
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
