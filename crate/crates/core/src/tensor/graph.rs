//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Parameters enter the tape
//! through [`Graph::param`], which remembers their slot in the owning
//! [`ParamSet`] so gradients can be written back after the sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};

use super::float::MatRef;
use super::{Float, ParamSet, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Right operand repeats over the leading dimensions of the output.
    RhsRepeat,
    /// Left operand repeats over the leading dimensions of the output.
    LhsRepeat,
    General {
        ia: Vec<u32>,
        ib: Vec<u32>,
    },
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize, la: usize, lb: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::RhsRepeat => (i, i % lb),
            Bcast::LhsRepeat => (i % la, i),
            Bcast::General { ia, ib } => (ia[i] as usize, ib[i] as usize),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Exp,
    Log,
    Sqrt,
    Softplus,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, plan: Bcast },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, c: F },
    AddScalar { x: Var },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Gather { x: Var, src: Vec<u32> },
    Reshape { x: Var },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    SumAll { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, len: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, width: usize, stats: Vec<F> },
    Reglu { x: Var, half: usize },
    Dropout { x: Var, mask: Vec<F> },
    GatherRows { table: Var, indices: Vec<usize>, width: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize },
    Pick { x: Var, width: usize, indices: Vec<usize> },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Grads<F> {
    /// Gradient of the root with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Computation tape for one forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    training: bool,
    rng: ChaCha8Rng,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// True when `small` (ignoring leading 1s) equals the trailing dims of `big`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed
}

fn broadcast_indices(src: &[usize], out: &[usize]) -> Vec<u32> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        idx.push(offset as u32);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<F: Float> Graph<F> {
    /// A tape in training mode (dropout active) or eval mode.
    pub fn new(training: bool, seed: u64) -> Self {
        Self { nodes: Vec::new(), training, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<F> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::Usage(format!("expected a scalar, node has {} elements", other.len()))),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node; tracks gradients when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err!("shape {:?} holds {} elements, got {}", shape, numel(&shape), data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Binds the named parameter of `params` as a leaf.
    pub fn param(&mut self, params: &ParamSet<F>, name: &str) -> Result<Var> {
        let (index, p) = params.get_full(name).ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(&p.tensor);
        self.nodes[v.0].param = Some(index);
        Ok(v)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb)?;
        let plan = if sa == sb {
            Bcast::Same
        } else if out == sa && is_suffix(&sb, &sa) {
            Bcast::RhsRepeat
        } else if out == sb && is_suffix(&sa, &sb) {
            Bcast::LhsRepeat
        } else {
            Bcast::General { ia: broadcast_indices(&sa, &out), ib: broadcast_indices(&sb, &out) }
        };
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = (va.len(), vb.len());
        let n = numel(&out);
        let mut value = Vec::with_capacity(n);
        for i in 0..n {
            let (ia, ib) = plan.index(i, la, lb);
            let (x, y) = (va[ia], vb[ib]);
            value.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, Op::Binary { kind, a, b, plan }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value: Vec<F> = match kind {
            UnaryKind::Relu => src.iter().map(|&v| v.max(F::zero())).collect(),
            UnaryKind::Exp => src.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Log => {
                if src.iter().any(|&v| !(v > F::zero())) {
                    return Err(Error::NonFinite("log of a non-positive value".into()));
                }
                src.iter().map(|&v| v.ln()).collect()
            }
            UnaryKind::Sqrt => {
                if src.iter().any(|&v| v < F::zero()) {
                    return Err(Error::NonFinite("sqrt of a negative value".into()));
                }
                src.iter().map(|&v| v.sqrt()).collect()
            }
            UnaryKind::Softplus => src.iter().map(|&v| v.max(F::zero()) + (-v.abs()).exp().ln_1p()).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Unary { kind, x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::AddScalar { x }, rg)
    }

    /// `[.., m, k] @ [k, n]` or `[.., m, k] @ [.., k, n]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2 operands, got {:?} and {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err!("matmul inner dimensions differ: {:?} @ {:?}", sa, sb));
        }
        let b_shared = sb.len() == 2;
        if !b_shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err!("matmul batch dimensions differ: {:?} @ {:?}", sa, sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut value = vec![F::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        if b_shared {
            F::gemm(batch * m, k, n, MatRef::rows(va, k), MatRef::rows(vb, n), F::zero(), &mut value);
        } else {
            for t in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    MatRef::rows(&va[t * m * k..(t + 1) * m * k], k),
                    MatRef::rows(&vb[t * k * n..(t + 1) * k * n], n),
                    F::zero(),
                    &mut value[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, value, Op::MatMul { a, b, batch, m, k, n, b_shared }, rg))
    }

    /// `x @ w + bias` with `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, src: Vec<u32>) -> Var {
        let xv = self.value(x);
        let value = src.iter().map(|&i| xv[i as usize]).collect();
        let rg = self.rg(x);
        self.push(shape, value, Op::Gather { x, src }, rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for shape {:?}", perm, shape));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&shape);
        let mut src = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            src.push(offset as u32);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        Ok(self.gather(x, out_shape, src))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a0 >= rank || a1 >= rank {
            return Err(shape_err!("transpose axes ({a0}, {a1}) out of range for rank {rank}"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    /// Slice `[start, start + len)` along `axis`, keeping the axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {:?}", shape));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            src.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(x, out_shape, src))
    }

    /// Picks index `i` along `axis`, dropping the axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let y = self.narrow(x, axis, i, 1)?;
        let mut shape = self.shape(y).to_vec();
        shape.remove(axis);
        self.reshape(y, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err!("concat shapes {:?} and {:?} disagree off axis {axis}", base, s));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let blocks: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis] * inner)).collect();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, block) in &blocks {
                value.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, value, Op::Concat { parts: blocks, outer }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum axis {axis} out of range for {:?}", shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut value = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in value[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, Op::SumAxis { x, outer, len, inner }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", shape));
        }
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut value = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    value[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    value[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err!("log_softmax of a scalar"))?;
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let mut value = vec![F::zero(); xv.len()];
        for (row, out) in xv.chunks(len).zip(value.chunks_mut(len)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::LogSoftmax { x, len }, rg))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| shape_err!("layer_norm of a scalar"))?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(shape_err!(
                "layer_norm gain {:?} / bias {:?} do not match width {width}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let eps = F::of(eps);
        let inv_n = F::one() / F::of(width as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / width.max(1);
        let mut value = vec![F::zero(); xv.len()];
        let mut stats = Vec::with_capacity(2 * rows);
        for (row, out) in xv.chunks(width).zip(value.chunks_mut(width)) {
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..width {
                out[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, value, Op::LayerNorm { x, gain, bias, width, stats }, rg))
    }

    /// `first_half * relu(second_half)` over the last axis.
    pub fn reglu(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| shape_err!("reglu of a scalar"))?;
        if last % 2 != 0 {
            return Err(shape_err!("reglu needs an even last dimension, got {:?}", shape));
        }
        let half = last / 2;
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len() / 2);
        for row in xv.chunks(last) {
            let (a, gate) = row.split_at(half);
            value.extend(a.iter().zip(gate).map(|(&a, &g)| a * g.max(F::zero())));
        }
        *shape.last_mut().unwrap() = half;
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reglu { x, half }, rg))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n).map(|_| if self.rng.random::<f64>() < p { F::zero() } else { keep }).collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Dropout { x, mask }, rg))
    }

    /// Row lookup into a `[rows, width]` table; output `[indices.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [rows, width] = shape[..] else {
            return Err(shape_err!("gather_rows needs a 2-D table, got {:?}", shape));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("row index {bad} out of range for table with {rows} rows"));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            value.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![indices.len(), width], value, Op::GatherRows { table, indices: indices.to_vec(), width }, rg))
    }

    /// Picks `x[r, indices[r]]` from `x: [.., width]` flattened to rows.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| shape_err!("pick from a scalar"))?;
        let rows = self.value(x).len() / width.max(1);
        if indices.len() != rows {
            return Err(shape_err!("pick needs {rows} indices, got {}", indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
            return Err(shape_err!("class index {bad} out of range for width {width}"));
        }
        let xv = self.value(x);
        let value = indices.iter().enumerate().map(|(r, &i)| xv[r * width + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![rows], value, Op::Pick { x, width, indices: indices.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar root, got shape {:?}", root_node.shape)));
        }
        if !root_node.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backprop_node(node, g, lower);
        }

        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(Grads { grads })
    }

    /// Adds every bound parameter's gradient into `params`.
    ///
    /// Parameters that were bound but not reached receive a zero gradient.
    pub fn write_param_grads(&self, grads: &Grads<F>, params: &mut ParamSet<F>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(pi) = node.param else { continue };
            if !node.requires_grad {
                continue;
            }
            let p = params
                .get_index_mut(pi)
                .ok_or_else(|| Error::Usage(format!("parameter slot {pi} missing from target set")))?;
            match grads.grads.get(i).and_then(|g| g.as_deref()) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => p.tensor.accumulate_grad(&vec![F::zero(); node.value.len()])?,
            }
        }
        Ok(())
    }

    /// `backward` followed by [`Graph::write_param_grads`].
    pub fn backward_into(&self, root: Var, params: &mut ParamSet<F>) -> Result<()> {
        let grads = self.backward(root)?;
        self.write_param_grads(&grads, params)
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], lower: &mut [Option<Vec<F>>]) {
        let val = |v: Var| -> &[F] { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, plan } => {
                let (va, vb) = (val(*a), val(*b));
                let (la, lb) = (va.len(), vb.len());
                if rg(*a) {
                    let ga = slot(lower, *a, la);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = plan.index(i, la, lb);
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * vb[ib],
                            BinaryKind::Div => gi / vb[ib],
                        };
                    }
                }
                if rg(*b) {
                    let gb = slot(lower, *b, lb);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = plan.index(i, la, lb);
                        gb[ib] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * va[ia],
                            BinaryKind::Div => -gi * va[ia] / (vb[ib] * vb[ib]),
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = val(*x);
                let y = &node.value;
                let gx = slot(lower, *x, xv.len());
                for i in 0..g.len() {
                    gx[i] += match kind {
                        UnaryKind::Relu => {
                            if xv[i] > F::zero() {
                                g[i]
                            } else {
                                F::zero()
                            }
                        }
                        UnaryKind::Exp => g[i] * y[i],
                        UnaryKind::Log => g[i] / xv[i],
                        UnaryKind::Sqrt => g[i] / (F::of(2.0) * y[i]),
                        UnaryKind::Softplus => g[i] / (F::one() + (-xv[i]).exp()),
                    };
                }
            }
            Op::Scale { x, c } => {
                let gx = slot(lower, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let gx = slot(lower, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::MatMul { a, b, batch, m, k, n, b_shared } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    let ga = slot(lower, *a, va.len());
                    if *b_shared {
                        F::gemm(batch * m, n, k, MatRef::rows(g, n), MatRef::transposed(vb, n), F::one(), ga);
                    } else {
                        for t in 0..batch {
                            F::gemm(
                                m,
                                n,
                                k,
                                MatRef::rows(&g[t * m * n..(t + 1) * m * n], n),
                                MatRef::transposed(&vb[t * k * n..(t + 1) * k * n], n),
                                F::one(),
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    }
                }
                if rg(*b) {
                    let gb = slot(lower, *b, vb.len());
                    if *b_shared {
                        F::gemm(k, batch * m, n, MatRef::transposed(va, k), MatRef::rows(g, n), F::one(), gb);
                    } else {
                        for t in 0..batch {
                            F::gemm(
                                k,
                                m,
                                n,
                                MatRef::transposed(&va[t * m * k..(t + 1) * m * k], k),
                                MatRef::rows(&g[t * m * n..(t + 1) * m * n], n),
                                F::one(),
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Gather { x, src } => {
                let gx = slot(lower, *x, val(*x).len());
                for (&s, &gi) in src.iter().zip(g) {
                    gx[s as usize] += gi;
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let gx = slot(lower, *x, outer * len * inner);
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let row = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        row.iter_mut().zip(go).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::SumAll { x } => {
                let gx = slot(lower, *x, val(*x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &node.value;
                let gx = slot(lower, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, len } => {
                let y = &node.value;
                let gx = slot(lower, *x, y.len());
                for ((gr, yr), out) in g.chunks(*len).zip(y.chunks(*len)).zip(gx.chunks_mut(*len)) {
                    let total: F = gr.iter().copied().sum();
                    for j in 0..*len {
                        out[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, width, stats } => {
                let w = *width;
                let xv = val(*x);
                let gv = val(*gain);
                let inv_n = F::one() / F::of(w as f64);
                let rows = xv.len() / w.max(1);
                let mut d_gain = vec![F::zero(); w];
                let mut d_bias = vec![F::zero(); w];
                let mut d_x = if rg(*x) { Some(vec![F::zero(); xv.len()]) } else { None };
                let mut dxhat = vec![F::zero(); w];
                let mut xhat = vec![F::zero(); w];
                for r in 0..rows {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let row = &xv[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    for j in 0..w {
                        xhat[j] = (row[j] - mean) * rstd;
                        d_gain[j] += gr[j] * xhat[j];
                        d_bias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    if let Some(dx) = d_x.as_mut() {
                        let m1: F = dxhat.iter().copied().sum::<F>() * inv_n;
                        let m2: F = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_n;
                        for j in 0..w {
                            dx[r * w + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = d_x {
                    add_into(slot(lower, *x, xv.len()), &dx);
                }
                if rg(*gain) {
                    add_into(slot(lower, *gain, w), &d_gain);
                }
                if rg(*bias) {
                    add_into(slot(lower, *bias, w), &d_bias);
                }
            }
            Op::Reglu { x, half } => {
                let h = *half;
                let xv = val(*x);
                let gx = slot(lower, *x, xv.len());
                for (r, gr) in g.chunks(h).enumerate() {
                    let row = &xv[r * 2 * h..(r + 1) * 2 * h];
                    let out = &mut gx[r * 2 * h..(r + 1) * 2 * h];
                    for j in 0..h {
                        let (a, gate) = (row[j], row[h + j]);
                        if gate > F::zero() {
                            out[j] += gr[j] * gate;
                            out[h + j] += gr[j] * a;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(lower, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::GatherRows { table, indices, width } => {
                let w = *width;
                let gt = slot(lower, *table, val(*table).len());
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::Concat { parts, outer } => {
                let row: usize = parts.iter().map(|&(_, b)| b).sum();
                let mut offset = 0;
                for &(p, block) in parts {
                    if rg(p) {
                        let gp = slot(lower, p, outer * block);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + block];
                            add_into(&mut gp[o * block..(o + 1) * block], src);
                        }
                    }
                    offset += block;
                }
            }
            Op::Pick { x, width, indices } => {
                let gx = slot(lower, *x, val(*x).len());
                for (r, &i) in indices.iter().enumerate() {
                    gx[r * width + i] += g[r];
                }
            }
        }
    }
}

fn slot<F: Float>(lower: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    lower[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::<f64>::eval();
        let a = g.constant(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[5.0, 6.0, 7.0, 8.0]);

        let a = g.constant(&t64(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(&t64(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);

        let bad = g.constant(&t64(&[3, 1], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::eval();
        for (input, expected) in
            [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]), ([0.0, 3f64.ln()], [0.25, 0.75])]
        {
            let x = g.constant(&t64(&[2], &input));
            let y = g.softmax(x, 0).unwrap();
            for (a, b) in g.value(y).iter().zip(expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let x = g.constant(&t64(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(&t64(&[2, 2], &[0.0, 0.0, 3f64.ln(), 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[2] - 0.75).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::eval();
        let one3 = g.constant(&t64(&[3], &[1.0; 3]));
        let zero3 = g.constant(&t64(&[3], &[0.0; 3]));
        let x = g.constant(&t64(&[3], &[1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, one3, zero3, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(&t64(&[2], &[1.0; 2]));
        let zero2 = g.constant(&t64(&[2], &[0.0; 2]));
        let x = g.constant(&t64(&[2], &[-1.0, 1.0]));
        let y = g.layer_norm(x, one2, zero2, 1e-5).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-4 && (g.value(y)[1] - 1.0).abs() < 1e-4);

        let gain = g.constant(&t64(&[3], &[2.0; 3]));
        let bias = g.constant(&t64(&[3], &[1.0; 3]));
        let x = g.constant(&t64(&[3], &[0.0, 2.0, 4.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for (a, b) in g.value(y).iter().zip([-1.4495, 1.0, 3.4495]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn reglu_cases() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(&t64(&[4], &[1.0, 2.0, 3.0, -1.0]));
        let y = g.reglu(x).unwrap();
        assert_eq!(g.value(y), &[3.0, 0.0]);
        let x = g.constant(&t64(&[4], &[5.0, 5.0, 0.0, 0.0]));
        let y = g.reglu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let x = g.constant(&t64(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.reglu(x), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_identity_and_config() {
        let mut g = Graph::<f64>::new(false, 1);
        let x = g.constant(&t64(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::<f64>::new(true, 1);
        let x = g.constant(&t64(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut g = Graph::<f64>::new(true, 7);
        let x = g.constant(&Tensor::ones(vec![1_000_000]));
        let y = g.dropout(x, 0.5).unwrap();
        let mean = g.value(y).iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn backward_polynomial_and_constant() {
        let mut g = Graph::<f64>::eval();
        let x = g.leaf(&t64(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x), Some(&[6.0][..]));

        let mut g = Graph::<f64>::eval();
        let c = g.constant(&t64(&[1], &[2.0]));
        let x = g.leaf(&t64(&[1], &[3.0]));
        let _unused = g.mul(x, x).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.wrt(x).is_none_or(|gx| gx.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::eval();
        let x = g.leaf(&t64(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn broadcasting_plans_agree() {
        let mut g = Graph::<f64>::eval();
        let a = g.leaf(&t64(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(&t64(&[3, 2], &[1.0, 10.0, 100.0, 1000.0, 0.5, 0.25]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(g.value(c)[..4], [1.0, 10.0, 200.0, 2000.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[11.0, 1100.0, 0.75, 11.0, 1100.0, 0.75]);
        assert_eq!(grads.wrt(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let mut g = Graph::<f64>::eval();
        let a = g.leaf(&t64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&t64(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let last = g.select(c, 1, 2).unwrap();
        assert_eq!(g.value(last), &[7.0, 8.0, 11.0, 12.0]);
    }
}
