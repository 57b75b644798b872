//! Reverse-mode differentiation over an append-only tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are plain
//! [`Tensor`]s stored in the tape; a [`Var`] is a cheap handle into it.
//! [`Tape::backward`] walks the nodes once in reverse creation order and then
//! clears the tape, so a second call without a new forward pass is an error.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{self, numel, reduce_to_shape, zip_broadcast, MatmulPlan, Tensor};

/// Batch-norm epsilon shared by train and eval paths.
pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Linear { x: usize, w: usize, b: Option<usize> },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Max { x: usize, axis: usize, arg: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat(Vec<usize>),
    Gather { src: usize, index: Rc<[usize]>, weights: Option<Rc<[T]>> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Tensor<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Neg(a) | Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Reshape(a) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Sum { x, .. } | Op::Mean { x, .. } | Op::Max { x, .. } | Op::Permute { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::Gather { src, .. } => vec![*src],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<T> {
    inner: RefCell<TapeInner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a non-parameter leaf created with [`Tape::input`].
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(TapeInner { nodes: Vec::new(), consumed: false }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>, leaf_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "tape was consumed by backward; start a new tape");
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            op => op.inputs().iter().any(|&i| inner.nodes[i].requires_grad),
        };
        inner.nodes.push(Node { value, op, requires_grad, param });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    /// A constant: participates in forward, never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, None, false)
    }

    /// A differentiable input whose gradient is reported in [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, None, true)
    }

    /// Record a parameter from the store.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf, Some(id), p.trainable)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |inner| {
            assert!(!inner.consumed, "tape was consumed by backward");
            &inner.nodes[id].value
        })
    }

    fn unary(&self, x: Var<'_, T>, f: impl Fn(&Tensor<T>) -> Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let v = f(&self.value_of(x.id));
        self.push(v, op, None, false)
    }

    fn binary(&self, name: &'static str, a: Var<'_, T>, b: Var<'_, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'_, T>> {
        let v = zip_broadcast(name, &self.value_of(a.id), &self.value_of(b.id), f)?;
        Ok(self.push(v, op, None, false))
    }

    /// Concatenate along the last axis.
    pub fn concat(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| self.value_of(p.id)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            tensor::concat_last(&refs)?
        };
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.id).collect()), None, false))
    }

    /// Row gather over a `[N, C]` source: output row `i` is
    /// `weights[i] * src[index[i]]` (weight 1 when absent). Shape `[M, C]`.
    pub fn gather_rows(&self, src: Var<'_, T>, index: Rc<[usize]>, weights: Option<Rc<[T]>>) -> Result<Var<'_, T>> {
        let v = {
            let s = self.value_of(src.id);
            if s.rank() != 2 {
                return Err(Error::ShapeMismatch { op: "gather_rows", lhs: s.shape().to_vec(), rhs: vec![] });
            }
            let (n, c) = (s.shape()[0], s.shape()[1]);
            if let Some(w) = &weights {
                if w.len() != index.len() {
                    return Err(Error::ShapeMismatch { op: "gather_rows", lhs: vec![index.len()], rhs: vec![w.len()] });
                }
            }
            let mut out = Vec::with_capacity(index.len() * c);
            for (i, &r) in index.iter().enumerate() {
                if r >= n {
                    return Err(Error::invalid(format!("gather index {r} out of range for {n} rows")));
                }
                let row = &s.data()[r * c..(r + 1) * c];
                match &weights {
                    Some(w) => out.extend(row.iter().map(|&x| x * w[i])),
                    None => out.extend_from_slice(row),
                }
            }
            Tensor::from_parts(vec![index.len(), c], out)
        };
        Ok(self.push(v, Op::Gather { src: src.id, index, weights }, None, false))
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Returns the output and the per-channel (mean, biased var).
    pub fn batch_norm_train(&self, x: Var<'_, T>, gamma: Var<'_, T>, beta: Var<'_, T>) -> Result<(Var<'_, T>, Vec<T>, Vec<T>)> {
        let (y, xhat, inv_std, mean, var) = {
            let xv = self.value_of(x.id);
            let c = *xv.shape().last().expect("rank >= 1");
            check_channels(&xv, &self.value_of(gamma.id), &self.value_of(beta.id))?;
            let rows = xv.len() / c;
            if rows < 2 {
                return Err(Error::invalid("batch_norm in train mode needs at least 2 rows per channel"));
            }
            let inv_rows = T::one() / T::of(rows as f64);
            let mut mean = vec![T::zero(); c];
            for r in xv.data().chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_rows);
            let mut var = vec![T::zero(); c];
            for r in xv.data().chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_rows);
            let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(BN_EPS)).sqrt()).collect();
            let (y, xhat) = affine_norm(&xv, &mean, &inv_std, &self.value_of(gamma.id), &self.value_of(beta.id));
            (y, xhat, inv_std, mean, var)
        };
        let op = Op::BatchNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats: true };
        Ok((self.push(y, op, None, false), mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var<'_, T>,
        gamma: Var<'_, T>,
        beta: Var<'_, T>,
        mean: &[T],
        var: &[T],
    ) -> Result<Var<'_, T>> {
        let (y, xhat, inv_std) = {
            let xv = self.value_of(x.id);
            check_channels(&xv, &self.value_of(gamma.id), &self.value_of(beta.id))?;
            if mean.len() != *xv.shape().last().expect("rank >= 1") || var.len() != mean.len() {
                return Err(Error::ShapeMismatch { op: "batch_norm", lhs: xv.shape().to_vec(), rhs: vec![mean.len()] });
            }
            let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + T::of(BN_EPS)).sqrt()).collect();
            let (y, xhat) = affine_norm(&xv, mean, &inv_std, &self.value_of(gamma.id), &self.value_of(beta.id));
            (y, xhat, inv_std)
        };
        let op = Op::BatchNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats: false };
        Ok(self.push(y, op, None, false))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: Var<'_, T>, labels: &[usize]) -> Result<Var<'_, T>> {
        let (loss, probs) = {
            let lv = self.value_of(logits.id);
            if lv.rank() != 2 || lv.shape()[0] != labels.len() {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let c = lv.shape()[1];
            if let Some(&label) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            let mut probs = Vec::with_capacity(lv.len());
            let mut total = T::zero();
            for (row, &label) in lv.data().chunks_exact(c).zip(labels) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                let log_z = z.ln();
                total += log_z - (row[label] - m);
                probs.extend(row.iter().map(|&v| (v - m).exp() / z));
            }
            let b = T::of(labels.len() as f64);
            (Tensor::scalar(total / b), Tensor::from_parts(lv.shape().to_vec(), probs))
        };
        let op = Op::SoftmaxCe { logits: logits.id, labels: labels.to_vec(), probs };
        Ok(self.push(loss, op, None, false))
    }

    /// Gradients of a scalar `loss` for every leaf that requires them.
    /// Clears the tape.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let nodes = std::mem::take(&mut inner.nodes);
        inner.consumed = true;
        drop(inner);

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(&loss_shape));
        let mut out = Gradients { by_node: HashMap::new(), params: Vec::new() };
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                match node.param {
                    Some(p) => out.params.push((p, g)),
                    None => {
                        out.by_node.insert(id, g);
                    }
                }
                continue;
            }
            for (input, dg) in backward_op(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        out.params.sort_by_key(|(p, _)| *p);
        Ok(out)
    }

    /// Run backward and add parameter gradients into `store`.
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let g = self.gradients(loss)?;
        g.accumulate_into(store);
        Ok(g)
    }
}

fn check_channels<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = *x.shape().last().expect("rank >= 1");
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch { op: "batch_norm", lhs: x.shape().to_vec(), rhs: gamma.shape().to_vec() });
    }
    Ok(())
}

fn affine_norm<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = mean.len();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for j in 0..c {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            y.push(gamma.data()[j] * h + beta.data()[j]);
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), y), Tensor::from_parts(x.shape().to_vec(), xhat))
}

/// Input gradients of one node given its output gradient.
fn backward_op<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let bcast = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
        zip_broadcast("backward", a, b, f).expect("shapes validated in forward")
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, reduce_to_shape(g, val(*a).shape())), (*b, reduce_to_shape(g, val(*b).shape()))],
        Op::Sub(a, b) => vec![(*a, reduce_to_shape(g, val(*a).shape())), (*b, reduce_to_shape(&g.map(|v| -v), val(*b).shape()))],
        Op::Mul(a, b) => {
            let mut out = vec![];
            if needs(*a) {
                out.push((*a, reduce_to_shape(&bcast(g, val(*b), &|x, y| x * y), val(*a).shape())));
            }
            if needs(*b) {
                out.push((*b, reduce_to_shape(&bcast(g, val(*a), &|x, y| x * y), val(*b).shape())));
            }
            out
        }
        Op::Div(a, b) => {
            let mut out = vec![];
            if needs(*a) {
                out.push((*a, reduce_to_shape(&bcast(g, val(*b), &|x, y| x / y), val(*a).shape())));
            }
            if needs(*b) {
                // d(a/b)/db = -(a/b)/b = -out/b
                let t = bcast(g, &node.value, &|x, y| -x * y);
                out.push((*b, reduce_to_shape(&bcast(&t, val(*b), &|x, y| x / y), val(*b).shape())));
            }
            out
        }
        Op::Neg(a) => vec![(*a, g.map(|v| -v))],
        Op::Scale(a, c) => {
            let c = *c;
            vec![(*a, g.map(|v| v * c))]
        }
        Op::Relu(a) => {
            let x = val(*a);
            let data = g.data().iter().zip(x.data()).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() });
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data.collect()))]
        }
        Op::Sigmoid(a) => {
            let s = &node.value;
            let data = g.data().iter().zip(s.data()).map(|(&d, &v)| d * v * (T::one() - v));
            vec![(*a, Tensor::from_parts(s.shape().to_vec(), data.collect()))]
        }
        Op::MatMul { a, b, ta, tb } => matmul_backward(val(*a), val(*b), *ta, *tb, g, needs(*a), needs(*b))
            .into_iter()
            .zip([*a, *b])
            .filter_map(|(t, id)| t.map(|t| (id, t)))
            .collect(),
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (din, dout) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / din;
            let mut out = vec![];
            if needs(*x) {
                let mut dx = vec![T::zero(); xv.len()];
                gemm(MatView::new(g.data(), rows, dout), MatView::new(wv.data(), din, dout).t(), T::zero(), &mut dx);
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            if needs(*w) {
                let mut dw = vec![T::zero(); din * dout];
                gemm(MatView::new(xv.data(), rows, din).t(), MatView::new(g.data(), rows, dout), T::zero(), &mut dw);
                out.push((*w, Tensor::from_parts(vec![din, dout], dw)));
            }
            if let Some(b) = b {
                if needs(*b) {
                    out.push((*b, reduce_to_shape(&g.reshape(&[rows, dout]).expect("rows"), &[dout])));
                }
            }
            out
        }
        Op::Sum { x, axis } => vec![(*x, tensor::expand_axis(g, val(*x).shape(), *axis, T::one()))],
        Op::Mean { x, axis } => {
            let shape = val(*x).shape();
            let scale = T::one() / T::of(shape[*axis] as f64);
            vec![(*x, tensor::expand_axis(g, shape, *axis, scale))]
        }
        Op::Max { x, axis, arg } => {
            let shape = val(*x).shape();
            let (outer, len, inner) = tensor::axis_split("max", shape, *axis).expect("validated");
            let mut dx = vec![T::zero(); numel(shape)];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    dx[(o * len + arg[slot]) * inner + i] = g.data()[slot];
                }
            }
            vec![(*x, Tensor::from_parts(shape.to_vec(), dx))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("same numel"))],
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*x, g.permute(&inv).expect("valid permutation"))]
        }
        Op::Concat(parts) => {
            let widths: Vec<usize> = parts.iter().map(|&p| *val(p).shape().last().expect("rank")).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut bufs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in g.data().chunks_exact(total) {
                let mut off = 0;
                for (buf, &w) in bufs.iter_mut().zip(&widths) {
                    buf.extend_from_slice(&r[off..off + w]);
                    off += w;
                }
            }
            parts.iter().zip(bufs).map(|(&p, b)| (p, Tensor::from_parts(val(p).shape().to_vec(), b))).collect()
        }
        Op::Gather { src, index, weights } => {
            let s = val(*src);
            let c = s.shape()[1];
            let mut ds = vec![T::zero(); s.len()];
            for (i, (&r, gr)) in index.iter().zip(g.data().chunks_exact(c)).enumerate() {
                let w = weights.as_ref().map_or(T::one(), |w| w[i]);
                for (d, &v) in ds[r * c..(r + 1) * c].iter_mut().zip(gr) {
                    *d += v * w;
                }
            }
            vec![(*src, Tensor::from_parts(s.shape().to_vec(), ds))]
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let c = inv_std.len();
            let rows = g.len() / c;
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (gr, hr) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                for j in 0..c {
                    dbeta[j] += gr[j];
                    dgamma[j] += gr[j] * hr[j];
                }
            }
            let mut out = vec![];
            if needs(*x) {
                let n = T::of(rows as f64);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, hr) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                    for j in 0..c {
                        let v = if *batch_stats {
                            gam[j] * inv_std[j] / n * (n * gr[j] - dbeta[j] - hr[j] * dgamma[j])
                        } else {
                            gam[j] * inv_std[j] * gr[j]
                        };
                        dx.push(v);
                    }
                }
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
            }
            out.push((*gamma, Tensor::from_parts(vec![c], dgamma)));
            out.push((*beta, Tensor::from_parts(vec![c], dbeta)));
            out
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let c = probs.shape()[1];
            let scale = g.item() / T::of(labels.len() as f64);
            let mut d = probs.data().to_vec();
            for (row, &l) in d.chunks_exact_mut(c).zip(labels) {
                row[l] -= T::one();
                row.iter_mut().for_each(|v| *v *= scale);
            }
            vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), d))]
        }
    }
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> [Option<Tensor<T>>; 2] {
    let plan = MatmulPlan::new(a.shape(), b.shape(), ta, tb).expect("validated in forward");
    let (ar, ac) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (br, bc) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    let (m, n) = (plan.m, plan.n);
    let mut da = need_a.then(|| vec![T::zero(); a.len()]);
    let mut db = need_b.then(|| vec![T::zero(); b.len()]);
    for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let dc = MatView::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
        let mut av = MatView::new(&a.data()[ia * ar * ac..(ia + 1) * ar * ac], ar, ac);
        let mut bv = MatView::new(&b.data()[ib * br * bc..(ib + 1) * br * bc], br, bc);
        if ta {
            av = av.t();
        }
        if tb {
            bv = bv.t();
        }
        if let Some(da) = da.as_mut() {
            let blk = &mut da[ia * ar * ac..(ia + 1) * ar * ac];
            if ta {
                gemm(bv, dc.t(), T::one(), blk);
            } else {
                gemm(dc, bv.t(), T::one(), blk);
            }
        }
        if let Some(db) = db.as_mut() {
            let blk = &mut db[ib * br * bc..(ib + 1) * br * bc];
            if tb {
                gemm(dc.t(), av, T::one(), blk);
            } else {
                gemm(av.t(), dc, T::one(), blk);
            }
        }
    }
    [da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)), db.map(|d| Tensor::from_parts(b.shape().to_vec(), d))]
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary("add", self, other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary("sub", self, other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary("mul", self, other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise division; any zero in the divisor is an error.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if let Some(index) = other.value().data().iter().position(|v| v.is_zero()) {
            return Err(Error::DivisionByZero { index });
        }
        self.tape.binary("div", self, other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.tape.unary(self, |x| x.map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.tape.unary(self, |x| x.map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape.unary(self, |x| x.map(|v| if v > T::zero() { v } else { T::zero() }), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self, |x| x.map(|v| T::one() / (T::one() + (-v).exp())), Op::Sigmoid(self.id))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// Batched matmul with optional transposes of the last two axes.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let v = tensor::matmul(&self.value(), &other.value(), ta, tb)?;
        Ok(self.tape.push(v, Op::MatMul { a: self.id, b: other.id, ta, tb }, None, false))
    }

    /// `x @ weight + bias` applied over the last axis.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let v = {
            let x = self.value();
            let w = weight.value();
            let din = *x.shape().last().expect("rank >= 1");
            if w.rank() != 2 || w.shape()[0] != din {
                return Err(Error::ShapeMismatch { op: "linear", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
            }
            let dout = w.shape()[1];
            let rows = x.len() / din;
            let mut out = vec![T::zero(); rows * dout];
            if let Some(b) = bias {
                let b = b.value();
                if b.len() != dout {
                    return Err(Error::ShapeMismatch { op: "linear", lhs: w.shape().to_vec(), rhs: b.shape().to_vec() });
                }
                for r in out.chunks_exact_mut(dout) {
                    r.copy_from_slice(b.data());
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(MatView::new(x.data(), rows, din), MatView::new(w.data(), din, dout), beta, &mut out);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("rank") = dout;
            Tensor::from_parts(shape, out)
        };
        let op = Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) };
        Ok(self.tape.push(v, op, None, false))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t, T>> {
        let v = tensor::sum_axis(&self.value(), axis)?;
        Ok(self.tape.push(v, Op::Sum { x: self.id, axis }, None, false))
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t, T>> {
        let v = {
            let x = self.value();
            let s = tensor::sum_axis(&x, axis)?;
            let inv = T::one() / T::of(x.shape()[axis] as f64);
            s.map(|v| v * inv)
        };
        Ok(self.tape.push(v, Op::Mean { x: self.id, axis }, None, false))
    }

    /// Max along `axis`; the gradient goes to the lowest index among ties.
    pub fn max(self, axis: usize) -> Result<Var<'t, T>> {
        let (v, arg) = tensor::max_axis(&self.value(), axis)?;
        Ok(self.tape.push(v, Op::Max { x: self.id, axis, arg }, None, false))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let n = self.value().len();
        self.reshape(&[n])?.sum(0)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), None, false))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().permute(perm)?;
        Ok(self.tape.push(v, Op::Permute { x: self.id, perm: perm.to_vec() }, None, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn linear_identity_plus_bias() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[3.0, 3.0]));
        assert_eq!(x.linear(w, Some(b)).unwrap().value().data(), &[4.0, 5.0]);
        let one = tape.constant(t(&[1], &[1.0]));
        let w1 = tape.constant(t(&[1, 1], &[1.0]));
        let b0 = tape.constant(t(&[1], &[0.0]));
        assert_eq!(one.linear(w1, Some(b0)).unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn pointwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
        let s = tape.constant(t(&[1], &[2.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(s.mul(m).unwrap().value().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn division_by_zero_is_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(b), Err(Error::DivisionByZero { index: 1 })));
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.sum(1).unwrap().value().data(), &[3.0, 7.0]);
        let ones = tape.constant(Tensor::<f64>::ones(&[4]));
        assert_eq!(ones.mean(0).unwrap().value().data(), &[1.0]);
        assert!(matches!(x.sum(2), Err(Error::AxisOutOfRange { .. })));
    }

    #[test]
    fn max_routes_grad_to_lowest_tied_index() {
        let tape = Tape::new();
        let x = tape.input(t(&[3], &[1.0, 5.0, 5.0]));
        let m = x.max(0).unwrap();
        assert_eq!(m.value().data(), &[5.0]);
        let g = tape.gradients(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.input(t(&[3], &[0.3, -2.0, 7.0]));
        let g = tape.gradients(x.sum(0).unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.input(t(&[1], &[2.0]));
        let loss = x.mul(x).unwrap().sum(0).unwrap();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.gradients(x), Err(Error::NonScalarLoss(_))));
        let loss = x.sum(0).unwrap();
        tape.gradients(loss).unwrap();
        assert!(matches!(tape.gradients(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn params_accumulate_into_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, -1.0]));
        for _ in 0..2 {
            let tape = Tape::new();
            let v = tape.param(&store, w);
            let loss = v.mul(v).unwrap().sum(0).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[4.0, -4.0]);
    }

    #[test]
    fn batch_norm_two_points() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (y, mean, var) = tape.batch_norm_train(x, g, b).unwrap();
        let y = y.value().to_f64_vec();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5, "{y:?}");
        assert_eq!((mean[0], var[0]), (2.0, 1.0));

        let g0 = tape.constant(t(&[1], &[0.0]));
        let b7 = tape.constant(t(&[1], &[7.0]));
        let (y, _, _) = tape.batch_norm_train(x, g0, b7).unwrap();
        assert_eq!(y.value().data(), &[7.0, 7.0]);
    }

    #[test]
    fn batch_norm_needs_two_rows_and_matching_channels() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        assert!(tape.batch_norm_train(x, g, b).is_err());
        let g3 = tape.constant(t(&[3], &[1.0; 3]));
        let b3 = tape.constant(t(&[3], &[0.0; 3]));
        assert!(matches!(tape.batch_norm_eval(x, g3, b3, &[0.0; 3], &[1.0; 3]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap().value().item();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(matches!(tape.softmax_cross_entropy(l, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn gather_scatters_back() {
        let tape = Tape::new();
        let src = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let idx: Rc<[usize]> = vec![1, 1, 0].into();
        let w: Rc<[f64]> = vec![0.5, 2.0, 1.0].into();
        let out = tape.gather_rows(src, idx, Some(w)).unwrap();
        assert_eq!(out.value().data(), &[1.5, 2.0, 6.0, 8.0, 1.0, 2.0]);
        let g = tape.gradients(out.sum_all().unwrap()).unwrap();
        assert_eq!(g.wrt(src).unwrap().data(), &[1.0, 1.0, 2.5, 2.5]);
    }
}
