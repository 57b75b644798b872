//! Dense row-major tensors and the raw (non-differentiable) kernels behind
//! every tape operation.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};

/// Dense n-dimensional buffer, row-major and contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &preview).finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    /// Construct from parts that the caller already knows are consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::of(v.f64())).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy with axes reordered: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let in_strides = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.len() {
            out.push(self.data[offset]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }
}

/// Broadcast two shapes under trailing-axis alignment (extent 1 stretches).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out_shape`, zero along broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let pad = out_shape.len() - shape.len();
    (0..out_shape.len()).map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] }).collect()
}

/// Visit `(out_offset, a_offset, b_offset)` for every output element.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out_shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary map with broadcasting.
pub fn zip_broadcast<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let n = numel(&out_shape);
    if b.len() == 1 {
        let y = b.data[0];
        if a.len() == n {
            return Ok(Tensor::from_parts(out_shape, a.data.iter().map(|&x| f(x, y)).collect()));
        }
    }
    if let Some(c) = row_broadcast(&b.shape, &out_shape).filter(|_| a.len() == n) {
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i / c])).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    if let Some(c) = row_broadcast(&a.shape, &out_shape).filter(|_| b.len() == n) {
        let data = b.data.iter().enumerate().map(|(i, &y)| f(a.data[i / c], y)).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    if a.len() == n && out_shape.ends_with(&b.shape) {
        let m = b.len();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % m])).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let sa = aligned_strides(&a.shape, &out_shape);
    let sb = aligned_strides(&b.shape, &out_shape);
    let mut data = vec![T::zero(); n];
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor::from_parts(out_shape, data))
}

/// `Some(C)` when `small` is `full` with its last axis (of extent `C > 1`)
/// collapsed to 1.
fn row_broadcast(small: &[usize], full: &[usize]) -> Option<usize> {
    let r = full.len();
    (r >= 1 && small.len() == r && small[r - 1] == 1 && full[r - 1] > 1 && small[..r - 1] == full[..r - 1]).then(|| full[r - 1])
}

/// Sum a broadcast-shaped gradient back down to `shape`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let m = numel(shape);
    let mut out = vec![T::zero(); m];
    if let Some(c) = row_broadcast(shape, &grad.shape) {
        for (o, row) in out.iter_mut().zip(grad.data.chunks_exact(c)) {
            *o = row.iter().copied().sum();
        }
        return Tensor::from_parts(shape.to_vec(), out);
    }
    if grad.shape.ends_with(shape) {
        for (i, &g) in grad.data.iter().enumerate() {
            out[i % m] += g;
        }
        return Tensor::from_parts(shape.to_vec(), out);
    }
    let st = aligned_strides(shape, &grad.shape);
    let zeros = vec![0usize; grad.rank()];
    for_each_broadcast(&grad.shape, &st, &zeros, |o, it, _| out[it] += grad.data[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Shape bookkeeping for a batched matmul with broadcast batch axes.
#[derive(Clone, Debug)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: Vec<usize>,
    /// Per output batch element: (offset into a, offset into b), in matrices.
    pub pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
        let sa = aligned_strides(ba, &batch);
        let sb = aligned_strides(bb, &batch);
        let mut pairs = Vec::with_capacity(numel(&batch));
        for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| pairs.push((ia, ib)));
        Ok(MatmulPlan { m, k, n, batch, pairs })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([self.m, self.n]);
        s
    }
}

/// Batched `op(a) @ op(b)` where `op` optionally transposes the last two axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let plan = MatmulPlan::new(&a.shape, &b.shape, ta, tb)?;
    let (ar, ac) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (br, bc) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    let (m, n) = (plan.m, plan.n);
    let mut out = vec![T::zero(); plan.pairs.len() * m * n];
    for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let mut av = MatView::new(&a.data[ia * ar * ac..(ia + 1) * ar * ac], ar, ac);
        let mut bv = MatView::new(&b.data[ib * br * bc..(ib + 1) * br * bc], br, bc);
        if ta {
            av = av.t();
        }
        if tb {
            bv = bv.t();
        }
        gemm(av, bv, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
    Ok(Tensor::from_parts(plan.out_shape(), out))
}

/// Split `shape` around `axis` into (outer, axis extent, inner).
pub fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange { op, axis, rank: shape.len() });
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split("sum", &x.shape, axis)?;
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &x.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Tensor::from_parts(reduced_shape(&x.shape, axis), out))
}

/// Max along `axis`; ties resolve to the lowest index. Returns values and argmax.
pub fn max_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (outer, len, inner) = axis_split("max", &x.shape, axis)?;
    let mut out = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = x.data[(o * len + l) * inner + i];
                let slot = o * inner + i;
                if v > out[slot] || l == 0 {
                    out[slot] = v;
                    arg[slot] = l;
                }
            }
        }
    }
    Ok((Tensor::from_parts(reduced_shape(&x.shape, axis), out), arg))
}

/// Insert a broadcast axis back: inverse shape-wise of a reduction.
pub fn expand_axis<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize, scale: T) -> Tensor<T> {
    let (outer, len, inner) = axis_split("expand", shape, axis).expect("validated axis");
    let mut out = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out[(o * len + l) * inner + i] = g.data[o * inner + i] * scale;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Concatenate along the last axis; all leading extents must agree.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
    let lead = &first.shape[..first.rank() - 1];
    for p in parts {
        if &p.shape[..p.rank() - 1] != lead {
            return Err(Error::ShapeMismatch { op: "concat", lhs: first.shape.clone(), rhs: p.shape.clone() });
        }
    }
    let rows = numel(lead);
    let widths: Vec<usize> = parts.iter().map(|p| p.shape[p.rank() - 1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Maximum over entries of `|a - b|`, divided by the largest `|b|`.
///
/// Normalizing by the reference's infinity norm keeps near-zero entries from
/// dominating the figure.
pub fn max_rel_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_diff lengths");
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x.f64() - y.f64()).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
