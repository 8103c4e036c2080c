//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append a
//! node holding the result value and the information needed to push
//! gradients back to its inputs; because nodes are appended in evaluation
//! order, reverse node order is a valid topological order for
//! [`Graph::backward`].
//!
//! Every tensor is viewed as a `rows × cols` matrix (the last dimension is
//! `cols`, everything before it is folded into `rows`). Elementwise binary
//! ops accept either equal shapes or a right-hand row vector that is
//! broadcast over the rows of the left-hand side.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::{gemm, Trans};
use super::{ParamId, Params, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training mode records the tape and enables dropout; evaluation mode
/// records values only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp<F: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` marks
    /// an input that receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &[F],
    ) -> Vec<Option<Vec<F>>>;
}

enum Op<'p, F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Dropout { x: Var, mask: Vec<F> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ShiftRows { x: Var, by: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F> + 'p> },
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<'p, F>,
    requires_grad: bool,
}

/// Per-parameter gradients gathered from a graph after `backward`.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor<F>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Clears every slot, leaving the store ready for the next step.
    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Global L2 norm over all present gradients.
    pub fn norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|&x| x * x)
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

pub struct Graph<'p, F: Scalar> {
    params: Option<&'p Params<F>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p, F>>,
    grads: Vec<Option<Tensor<F>>>,
    mode: Mode,
    rng: ChaCha8Rng,
    consumed: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Scalar>(x: F) -> F {
    // log(1 + e^x) without overflow for large |x|
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// Graph whose parameter leaves borrow from `params`.
    pub fn new(params: &'p Params<F>, mode: Mode, seed: u64) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
        }
    }

    /// Graph with no parameter store; leaves are created explicitly.
    pub fn detached(mode: Mode) -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Cow<'p, Tensor<F>>, op: Op<'p, F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<F>, op: Op<'p, F>, parents: &[Var]) -> Var {
        let rg = self.mode == Mode::Train && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push(Cow::Owned(value), op, rg)
    }

    /// Leaf tensor; `requires_grad` only takes effect in training mode.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.mode == Mode::Train;
        self.push(Cow::Owned(value), Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Leaf for a parameter group; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let params = self.params.expect("graph has no parameter store");
        let rg = self.mode == Mode::Train;
        let v = self.push(Cow::Borrowed(params.get(id)), Op::Leaf, rg);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(av.data(), m, k, Trans::No, bv.data(), k2, n, Trans::No, &mut out, false);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push_owned(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push_owned(t, Op::Transpose(a), &[a])
    }

    // ---- elementwise binary ---------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() || (bv.rows() == 1 && bv.cols() == av.cols()) {
            Ok(())
        } else {
            Err(shape_err(op, av.shape(), bv.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<'p, F>,
    ) -> Result<Var, TensorError> {
        self.broadcast_check(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        let t = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push_owned(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("maximum", self.shape(a), self.shape(b)));
        }
        self.binary("maximum", a, b, F::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push_owned(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push_owned(t, Op::AddScalar(a), &[a])
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push_owned(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(F::tanh);
        self.push_owned(t, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(F::exp);
        self.push_owned(t, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(F::zero()));
        self.push_owned(t, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push_owned(t, Op::Softplus(a), &[a])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push_owned(t, Op::Silu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul(a, a)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        if c > 0 {
            t.data_mut().chunks_mut(c).for_each(softmax_in_place);
        }
        self.push_owned(t, Op::Softmax(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        let mut rstd = Vec::with_capacity(av.rows());
        let inv_c = F::one() / F::from_usize(c).unwrap();
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().fold(F::zero(), |s, x| s + x) * inv_c;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .fold(F::zero(), |s, x| s + x)
                * inv_c;
            let r = F::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        self.push_owned(out, Op::LayerNorm { x: a, rstd }, &[a])
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: F) -> Var {
        if self.mode == Mode::Eval || rate <= F::zero() {
            return a;
        }
        let keep = F::one() - rate;
        let scale = F::one() / keep;
        let n = self.value(a).len();
        let keep_p = keep.as_f64();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep_p {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same length");
        self.push_owned(t, Op::Dropout { x: a, mask }, &[a])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push_owned(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), pv.shape()));
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push_owned(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(shape_err("slice_rows", av.shape(), &[start, end]));
        }
        let c = av.cols();
        let t = Tensor::from_vec(&[end - start, c], av.data()[start * c..end * c].to_vec())?;
        Ok(self.push_owned(t, Op::SliceRows { x: a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(shape_err("slice_cols", av.shape(), &[start, end]));
        }
        let data = av
            .data()
            .chunks(av.cols().max(1))
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let t = Tensor::from_vec(&[av.rows(), end - start], data)?;
        Ok(self.push_owned(t, Op::SliceCols { x: a, start }, &[a]))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let c = av.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= av.rows()) {
            return Err(shape_err("gather_rows", av.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::from_vec(&[index.len(), c], data)?;
        Ok(self.push_owned(
            t,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            &[a],
        ))
    }

    /// Output row `r` is input row `r - by`, zero for `r < by`.
    pub fn shift_rows(&mut self, a: Var, by: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![F::zero(); r * c];
        if by < r {
            data[by * c..].copy_from_slice(&av.data()[..(r - by) * c]);
        }
        let t = Tensor::from_vec(&[r, c], data).expect("same size");
        self.push_owned(t, Op::ShiftRows { x: a, by }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().fold(F::zero(), |s, x| s + x);
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = F::from_usize(av.len()).unwrap();
        let s = av.data().iter().copied().fold(F::zero(), |s, x| s + x) / n;
        self.push_owned(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse", self.shape(pred), self.shape(target)));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Affine map `x·w + b` over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Registers the output of a fused kernel computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<F>,
        op: Box<dyn CustomOp<F> + 'p>,
    ) -> Var {
        self.push_owned(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![F::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape();
                Some(match g {
                    Some(g) => Tensor::from_vec(shape, g).expect("grad matches value"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(())
    }

    /// Gradients of parameter leaves, indexed by [`ParamId`].
    pub fn param_grads(&self) -> Gradients<F> {
        let mut out = Gradients::empty(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.grad(*v) {
                    out.grads[i] = Some(g.clone());
                }
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let accumulate = |grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        // Reduces a gradient shaped like `a` down to a broadcast row operand.
        let reduce_to = |g: Vec<F>, target: &Tensor<F>| -> Vec<F> {
            if g.len() == target.len() {
                return g;
            }
            let c = target.cols();
            let mut r = vec![F::zero(); c];
            for row in g.chunks(c) {
                r.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
            }
            r
        };
        let unary = |grads: &mut [Option<Vec<F>>], a: Var, f: &dyn Fn(usize) -> F| {
            if self.nodes[a.0].requires_grad {
                let contrib = (0..g.len()).map(|j| g[j] * f(j)).collect();
                accumulate(grads, a, contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![F::zero(); m * k];
                    gemm(g, m, n, Trans::No, bv.data(), k, n, Trans::Yes, &mut da, false);
                    accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![F::zero(); k * n];
                    gemm(av.data(), m, k, Trans::Yes, g, m, n, Trans::No, &mut db, false);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                accumulate(grads, *a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let gb = reduce_to(g.iter().map(|&x| x * sign).collect(), self.value(*b));
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.len();
                if self.nodes[a.0].requires_grad {
                    let ga = g.iter().enumerate().map(|(j, &x)| x * bv.data()[j % bl]).collect();
                    accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, reduce_to(gb, bv));
                }
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let to_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x >= y).collect();
                unary(grads, *a, &|j| if to_a[j] { F::one() } else { F::zero() });
                unary(grads, *b, &|j| if to_a[j] { F::zero() } else { F::one() });
            }
            Op::Scale(a, c) => unary(grads, *a, &|_| *c),
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Sigmoid(a) => {
                let y = out.data();
                unary(grads, *a, &|j| y[j] * (F::one() - y[j]));
            }
            Op::Tanh(a) => {
                let y = out.data();
                unary(grads, *a, &|j| F::one() - y[j] * y[j]);
            }
            Op::Exp(a) => {
                let y = out.data();
                unary(grads, *a, &|j| y[j]);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|j| if x[j] > F::zero() { F::one() } else { F::zero() });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|j| sigmoid(x[j]));
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|j| {
                    let s = sigmoid(x[j]);
                    s * (F::one() + x[j] * (F::one() - s))
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut da = vec![F::zero(); g.len()];
                for ((dst, y), gr) in da.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let dot = y.iter().zip(gr).fold(F::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..c {
                        dst[j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, rstd } => {
                let c = out.cols();
                let inv_c = F::one() / F::from_usize(c).unwrap();
                let mut dx = vec![F::zero(); g.len()];
                for (r, ((dst, y), gr)) in dx
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.chunks(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().fold(F::zero(), |s, v| s + v) * inv_c;
                    let mean_gy = gr.iter().zip(y).fold(F::zero(), |s, (&a, &b)| s + a * b) * inv_c;
                    for j in 0..c {
                        dst[j] = rstd[r] * (gr[j] - mean_g - y[j] * mean_gy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => unary(grads, *x, &|j| mask[j]),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[col..col + pc].iter().copied())
                            .collect();
                        accumulate(grads, p, gp);
                    }
                    col += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![F::zero(); xv.len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, w) = (xv.cols(), out.cols());
                let mut gx = vec![F::zero(); xv.len()];
                for (dst, src) in gx.chunks_mut(c).zip(g.chunks(w.max(1))) {
                    dst[*start..start + w].copy_from_slice(src);
                }
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![F::zero(); xv.len()];
                for (o, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[o * c + j];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ShiftRows { x, by } => {
                let (r, c) = (out.rows(), out.cols());
                let mut gx = vec![F::zero(); r * c];
                if *by < r {
                    gx[..(r - by) * c].copy_from_slice(&g[by * c..]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / F::from_usize(n).unwrap();
                accumulate(grads, *a, vec![v; n]);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&ins, out, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} gradient arity", op.name());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.len(), self.value(v).len(), "{} gradient size", op.name());
                        accumulate(grads, v, gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::detached(Mode::Eval);
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::<f64>::identity(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::detached(Mode::Eval);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unary_values_at_zero() {
        let mut g = Graph::detached(Mode::Eval);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
        let sm = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let sm = g.softmax(sm);
        assert_eq!(g.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::detached(Mode::Train);
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut g = Graph::detached(Mode::Train);
        let x = g.leaf(t(&[1], &[0.0]), true);
        let s = g.sigmoid(x);
        let s = g.sum(s);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::detached(Mode::Train);
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn every_requires_grad_node_gets_a_grad() {
        let mut g = Graph::detached(Mode::Train);
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let e = g.exp(x);
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert!(g.grad(e).is_some());
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient_over_rows() {
        let mut g = Graph::detached(Mode::Train);
        let x = g.leaf(Tensor::<f64>::zeros(&[3, 2]), true);
        let b = g.leaf(t(&[2], &[1.0, -1.0]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::detached(Mode::Eval);
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.dropout(x, 0.5);
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_keeps_expected_fraction_in_train() {
        let mut g = Graph::detached(Mode::Train);
        let x = g.leaf(Tensor::<f64>::full(&[10_000], 1.0), true);
        let y = g.dropout(x, 0.25);
        let v = g.value(y);
        let kept = v.data().iter().filter(|&&a| a != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.75).abs() < 0.02, "kept {kept}");
        let mean = v.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03);
    }

    #[test]
    fn shift_and_gather_rows() {
        let mut g = Graph::detached(Mode::Eval);
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let s = g.shift_rows(x, 1);
        assert_eq!(g.value(s).data(), &[0.0, 1.0, 2.0]);
        let r = g.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 1.0]);
    }
}
