//! Append-only tape recording tensor operations for reverse-mode
//! differentiation.
//!
//! Every forward method materializes its output. A node keeps its backward
//! context only when at least one input requires a gradient; otherwise it is
//! stored as a constant and never visited by [`Tape::backward`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{Gradients, ParamStore, ParamTensor};
use super::scalar::gemm;
use super::tensor::numel;
use super::{DiffError, Scalar, Tensor};

/// Handle to a node on one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    SqDiff,
    Sum,
    Mean,
    SumAll,
    Concat,
    Narrow,
    IndexSelect,
    GatherLast,
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Abs,
    Exp,
    MaskedSoftmax,
    Reshape,
    Transpose,
    Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Abs,
    Exp,
}

impl Unary {
    fn kind(self) -> OpKind {
        match self {
            Unary::Relu => OpKind::Relu,
            Unary::Elu => OpKind::Elu,
            Unary::Tanh => OpKind::Tanh,
            Unary::Sigmoid => OpKind::Sigmoid,
            Unary::Abs => OpKind::Abs,
            Unary::Exp => OpKind::Exp,
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp() - T::one()
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    SqDiff,
}

impl Binary {
    fn kind(self) -> OpKind {
        match self {
            Binary::Add => OpKind::Add,
            Binary::Sub => OpKind::Sub,
            Binary::Mul => OpKind::Mul,
            Binary::SqDiff => OpKind::SqDiff,
        }
    }

    /// Partial derivatives with respect to `a` and `b`.
    #[inline(always)]
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            Binary::Add => (T::one(), T::one()),
            Binary::Sub => (T::one(), -T::one()),
            Binary::Mul => (b, a),
            Binary::SqDiff => {
                let d = (a - b) + (a - b);
                (d, -d)
            }
        }
    }
}

/// How an input element is located from an output element index.
#[derive(Clone, Debug)]
enum IndexMap {
    Same,
    Modulo(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Table(t) => t[i],
        }
    }

    fn build(out: &[usize], input: &[usize]) -> IndexMap {
        if out == input {
            return IndexMap::Same;
        }
        let stripped: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if out.len() >= stripped.len() && out[out.len() - stripped.len()..] == *stripped {
            return IndexMap::Modulo(numel(stripped).max(1));
        }
        let rank = out.len();
        let pad = rank - input.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1usize;
        for d in (0..input.len()).rev() {
            strides[d + pad] = if input[d] == 1 { 0 } else { acc };
            acc *= input[d];
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            table.push(offset);
            for d in (0..rank).rev() {
                idx[d] += 1;
                offset += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                offset -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        IndexMap::Table(table)
    }
}

#[inline(always)]
fn zip_map<T: Scalar>(total: usize, ma: &IndexMap, mb: &IndexMap, av: &[T], bv: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(total);
    for_each_pair(total, ma, mb, |_, ia, ib| out.push(f(av[ia], bv[ib])));
    out
}

/// Accumulates the adjoint of one operand of a binary op into `g`.
#[allow(clippy::too_many_arguments)]
fn scatter<T: Scalar>(g: &mut [T], gd: &[T], ma: &IndexMap, mb: &IndexMap, av: &[T], bv: &[T], kind: Binary, lhs: bool) {
    #[inline(always)]
    fn run<T: Scalar>(g: &mut [T], gd: &[T], ma: &IndexMap, mb: &IndexMap, av: &[T], bv: &[T], kind: Binary, lhs: bool) {
        for_each_pair(gd.len(), ma, mb, |i, ia, ib| {
            let (da, db) = kind.partials(av[ia], bv[ib]);
            let (slot, d) = if lhs { (ia, da) } else { (ib, db) };
            g[slot] = g[slot] + gd[i] * d;
        });
    }
    // Constant kinds let each loop specialize.
    match (kind, lhs) {
        (Binary::Add, true) => run(g, gd, ma, mb, av, bv, Binary::Add, true),
        (Binary::Add, false) => run(g, gd, ma, mb, av, bv, Binary::Add, false),
        (Binary::Sub, true) => run(g, gd, ma, mb, av, bv, Binary::Sub, true),
        (Binary::Sub, false) => run(g, gd, ma, mb, av, bv, Binary::Sub, false),
        (Binary::Mul, true) => run(g, gd, ma, mb, av, bv, Binary::Mul, true),
        (Binary::Mul, false) => run(g, gd, ma, mb, av, bv, Binary::Mul, false),
        (Binary::SqDiff, true) => run(g, gd, ma, mb, av, bv, Binary::SqDiff, true),
        (Binary::SqDiff, false) => run(g, gd, ma, mb, av, bv, Binary::SqDiff, false),
    }
}

/// Calls `f(i, ia, ib)` for every output index with the matching input
/// indices, avoiding per-element division on the common layouts.
#[inline(always)]
fn for_each_pair(total: usize, ma: &IndexMap, mb: &IndexMap, mut f: impl FnMut(usize, usize, usize)) {
    match (ma, mb) {
        (IndexMap::Same, IndexMap::Same) => (0..total).for_each(|i| f(i, i, i)),
        (IndexMap::Same, IndexMap::Modulo(n)) => {
            for base in (0..total).step_by(*n) {
                (0..*n).for_each(|j| f(base + j, base + j, j));
            }
        }
        (IndexMap::Modulo(n), IndexMap::Same) => {
            for base in (0..total).step_by(*n) {
                (0..*n).for_each(|j| f(base + j, j, base + j));
            }
        }
        _ => (0..total).for_each(|i| f(i, ma.at(i), mb.at(i))),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

#[derive(Clone, Copy, Debug)]
enum MatLayout {
    /// `[.., k] × [k, n]`: leading dims of the left operand flatten into rows.
    Flat { rows: usize, k: usize, n: usize },
    /// `[m, k] × [batch.., k, n]`.
    SharedLeft { batch: usize, m: usize, k: usize, n: usize },
    /// `[batch.., m, k] × [batch.., k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var, MatLayout),
    Binary(Var, Var, Binary, IndexMap, IndexMap),
    Unary(Var, Unary),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, indices: Vec<usize> },
    GatherLast { x: Var, indices: Vec<usize> },
    MaskedSoftmax { x: Var, axis: usize, mask: Vec<bool> },
    Reshape(Var),
    Transpose(Var),
    Affine { x: Var, mul: T },
}

/// One recorded operation: kind, inputs (inside `op`), output value and
/// saved backward context.
#[derive(Clone, Debug)]
struct TapeNode<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

const BRANCH_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const BRANCH_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Append-only operation tape.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
    check_finite: bool,
    branches: u64,
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Clone, Debug)]
pub struct Adjoints<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Adjoints<T> {
    /// Gradient with respect to a leaf. `None` when the leaf does not require
    /// a gradient; zeros when it does but is unreachable from the seed.
    pub fn wrt(&self, var: Var) -> Option<Tensor<T>> {
        match self.grads.get(var.0) {
            Some(Some(g)) => Some(g.clone()),
            Some(None) => self.shapes.get(var.0).map(|s| Tensor::zeros(s)),
            None => None,
        }
    }

    /// Collects parameter gradients by name. Every trainable tensor of
    /// `store` gets an entry; parameters never bound on the tape map to zero.
    pub fn into_gradients(self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for (name, var) in &self.params {
            if let (Some(Some(g)), Some(slot)) = (self.grads.get(var.0), out.get_mut(name)) {
                slot.add_assign(g);
            }
        }
        out
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: false, branches: BRANCH_SEED }
    }

    /// Tape that rejects non-finite inputs to every operation.
    pub fn verifying() -> Self {
        Tape { nodes: Vec::new(), check_finite: true, branches: BRANCH_SEED }
    }

    /// Hash of every branch taken so far: the side of zero of each relu,
    /// elu and abs input, plus decisions recorded with [`Tape::note_branch`].
    /// Only verifying tapes track it. Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    /// Records a discrete decision (an argmax, say) made from tape values.
    pub fn note_branch(&mut self, key: u64) {
        if self.check_finite {
            self.branches = (self.branches ^ key.wrapping_add(1)).wrapping_mul(BRANCH_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(TapeNode { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn guard(&self, kind: OpKind, inputs: &[Var]) -> Result<(), DiffError> {
        if self.check_finite && inputs.iter().any(|v| !self.nodes[v.0].value.all_finite()) {
            return Err(DiffError::NonFinite { op: kind });
        }
        Ok(())
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, DiffError> {
        if self.check_finite && !value.all_finite() {
            return Err(DiffError::NonFinite { op: OpKind::Leaf });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, DiffError> {
        self.leaf(value, false)
    }

    /// Free leaf that receives a gradient (not tied to a parameter store).
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var, DiffError> {
        self.leaf(value, true)
    }

    /// Binds a parameter; it is differentiated iff `requires_grad` is set.
    pub fn param(&mut self, p: &ParamTensor<T>) -> Result<Var, DiffError> {
        let value = Tensor::new(p.shape().to_vec(), p.values().to_vec())?;
        let var = self.leaf(value, p.requires_grad())?;
        self.nodes[var.0].param = Some(p.name().into());
        Ok(var)
    }

    /// Binds a parameter as a constant regardless of its flag (frozen copies).
    pub fn frozen(&mut self, p: &ParamTensor<T>) -> Result<Var, DiffError> {
        let value = Tensor::new(p.shape().to_vec(), p.values().to_vec())?;
        self.leaf(value, false)
    }

    fn rg(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product. Supported layouts: `[.., k] × [k, n]`,
    /// `[m, k] × [b.., k, n]` and `[b.., m, k] × [b.., k, n]` with equal
    /// batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.guard(OpKind::MatMul, &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || DiffError::ShapeMismatch { op: OpKind::MatMul, lhs: sa.clone(), rhs: sb.clone() };
        if sa.is_empty() || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let (layout, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let n = sb[1];
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (MatLayout::Flat { rows: numel(&sa) / k.max(1), k, n }, shape)
        } else if sa.len() == 2 {
            let (m, kb, n) = (sa[0], sb[sb.len() - 2], sb[sb.len() - 1]);
            if kb != k {
                return Err(mismatch());
            }
            let batch = numel(&sb[..sb.len() - 2]);
            let mut shape = sb[..sb.len() - 2].to_vec();
            shape.extend_from_slice(&[m, n]);
            (MatLayout::SharedLeft { batch, m, k, n }, shape)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            let (m, kb, n) = (sa[sa.len() - 2], sb[sb.len() - 2], sb[sb.len() - 1]);
            if kb != k {
                return Err(mismatch());
            }
            let batch = numel(&sa[..sa.len() - 2]);
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.extend_from_slice(&[m, n]);
            (MatLayout::Batched { batch, m, k, n }, shape)
        };
        let mut out = Tensor::zeros(&out_shape);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let ov = out.data_mut();
            match layout {
                MatLayout::Flat { rows, k, n } => gemm(rows, k, n, av, false, bv, false, ov, false),
                MatLayout::SharedLeft { batch, m, k, n } => {
                    for i in 0..batch {
                        gemm(m, k, n, av, false, &bv[i * k * n..], false, &mut ov[i * m * n..], false);
                    }
                }
                MatLayout::Batched { batch, m, k, n } => {
                    for i in 0..batch {
                        gemm(m, k, n, &av[i * m * k..], false, &bv[i * k * n..], false, &mut ov[i * m * n..], false);
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b, layout), rg))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var, DiffError> {
        self.guard(kind.kind(), &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| DiffError::ShapeMismatch { op: kind.kind(), lhs: sa.clone(), rhs: sb.clone() })?;
        let ma = IndexMap::build(&out_shape, &sa);
        let mb = IndexMap::build(&out_shape, &sb);
        let total = numel(&out_shape);
        let data = {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            // One loop per kind so each can vectorize.
            match kind {
                Binary::Add => zip_map(total, &ma, &mb, av, bv, |x, y| x + y),
                Binary::Sub => zip_map(total, &ma, &mb, av, bv, |x, y| x - y),
                Binary::Mul => zip_map(total, &ma, &mb, av, bv, |x, y| x * y),
                Binary::SqDiff => zip_map(total, &ma, &mb, av, bv, |x, y| (x - y) * (x - y)),
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(a, b, kind, ma, mb), rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Binary::Mul)
    }

    /// `(a - b)²` elementwise, with broadcasting.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Binary::SqDiff)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var, DiffError> {
        self.guard(kind.kind(), &[x])?;
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| kind.apply(e)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        if self.check_finite && matches!(kind, Unary::Relu | Unary::Elu | Unary::Abs) {
            let mut h = self.branches;
            for &e in self.nodes[x.0].value.data() {
                h = (h ^ (e > T::zero()) as u64).wrapping_mul(BRANCH_PRIME);
            }
            self.branches = h;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unary(x, kind), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Relu)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Elu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Abs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Unary::Exp)
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Result<Var, DiffError> {
        self.guard(OpKind::Affine, &[x])?;
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| mul * e + add).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Affine { x, mul }, rg))
    }

    fn check_axis(&self, kind: OpKind, x: Var, axis: usize) -> Result<(), DiffError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(DiffError::BadAxis { op: kind, axis, shape: shape.to_vec() });
        }
        Ok(())
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, DiffError> {
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        self.guard(kind, &[x])?;
        self.check_axis(kind, x, axis)?;
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = lanes(v.shape(), axis);
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let mut data = vec![T::zero(); outer * inner];
        let src = v.data();
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for r in 0..inner {
                    data[o * inner + r] = data[o * inner + r] + src[base + r];
                }
            }
        }
        if mean && len > 0 {
            let scale = T::one() / T::from_usize(len).unwrap_or_else(T::one);
            for d in &mut data {
                *d = *d * scale;
            }
        }
        let rg = self.rg(&[x]);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of every element; returns a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, DiffError> {
        self.guard(OpKind::SumAll, &[x])?;
        let total = self.nodes[x.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::SumAll(x), rg))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        self.guard(OpKind::Concat, inputs)?;
        let first = *inputs.first().ok_or(DiffError::EmptyInput { op: OpKind::Concat })?;
        self.check_axis(OpKind::Concat, first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch { op: OpKind::Concat, lhs: base.clone(), rhs: s.to_vec() });
            }
            total_len += s[axis];
        }
        let (outer, _, inner) = lanes(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total_len;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let val = &self.nodes[v.0].value;
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        self.guard(OpKind::Narrow, &[x])?;
        self.check_axis(OpKind::Narrow, x, axis)?;
        let v = &self.nodes[x.0].value;
        let (outer, full, inner) = lanes(v.shape(), axis);
        if start + len > full {
            return Err(DiffError::IndexOutOfRange { op: OpKind::Narrow, index: start + len, len: full });
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Gathers rows (first axis) by index; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var, DiffError> {
        self.guard(OpKind::IndexSelect, &[x])?;
        self.check_axis(OpKind::IndexSelect, x, 0)?;
        let v = &self.nodes[x.0].value;
        let rows = v.shape()[0];
        let row = numel(&v.shape()[1..]);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(DiffError::IndexOutOfRange { op: OpKind::IndexSelect, index: i, len: rows });
            }
            data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::IndexSelect { x, indices: indices.to_vec() }, rg))
    }

    /// Picks one entry of the last axis per lane: `out[..] = x[.., indices[..]]`.
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var, DiffError> {
        self.guard(OpKind::GatherLast, &[x])?;
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        let width = *shape.last().ok_or(DiffError::BadAxis { op: OpKind::GatherLast, axis: 0, shape: Vec::new() })?;
        let lanes_n = v.len() / width.max(1);
        if indices.len() != lanes_n {
            return Err(DiffError::ShapeMismatch { op: OpKind::GatherLast, lhs: shape.to_vec(), rhs: vec![indices.len()] });
        }
        let mut data = Vec::with_capacity(lanes_n);
        for (l, &i) in indices.iter().enumerate() {
            if i >= width {
                return Err(DiffError::IndexOutOfRange { op: OpKind::GatherLast, index: i, len: width });
            }
            data.push(v.data()[l * width + i]);
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::GatherLast { x, indices: indices.to_vec() }, rg))
    }

    /// Softmax along `axis` restricted to entries where `mask` is set;
    /// masked entries are exactly zero and a fully masked lane is all zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var, DiffError> {
        self.guard(OpKind::MaskedSoftmax, &[x])?;
        self.check_axis(OpKind::MaskedSoftmax, x, axis)?;
        let v = &self.nodes[x.0].value;
        if mask.len() != v.len() {
            return Err(DiffError::ShapeMismatch { op: OpKind::MaskedSoftmax, lhs: v.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let (outer, len, inner) = lanes(v.shape(), axis);
        let src = v.data();
        let mut data = vec![T::zero(); v.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * len + i) * inner + r;
                let mut max = T::neg_infinity();
                for i in 0..len {
                    if mask[at(i)] && src[at(i)] > max {
                        max = src[at(i)];
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut denom = T::zero();
                for i in 0..len {
                    if mask[at(i)] {
                        let e = (src[at(i)] - max).exp();
                        data[at(i)] = e;
                        denom = denom + e;
                    }
                }
                for i in 0..len {
                    if mask[at(i)] {
                        data[at(i)] = data[at(i)] / denom;
                    }
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax { x, axis, mask: mask.to_vec() }, rg))
    }

    /// Copies `x` into a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        self.guard(OpKind::Reshape, &[x])?;
        let v = &self.nodes[x.0].value;
        if numel(shape) != v.len() {
            return Err(DiffError::ShapeMismatch { op: OpKind::Reshape, lhs: v.shape().to_vec(), rhs: shape.to_vec() });
        }
        let out = v.clone().with_shape(shape.to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        self.guard(OpKind::Transpose, &[x])?;
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if shape.len() < 2 {
            return Err(DiffError::BadAxis { op: OpKind::Transpose, axis: 1, shape: shape.to_vec() });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let data = transpose_data(v.data(), r, c);
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Transpose(x), rg))
    }

    /// Reverse sweep from a scalar seed, visiting nodes in strict reverse
    /// creation order.
    pub fn backward(&self, seed: Var) -> Result<Adjoints<T>, DiffError> {
        let seed_val = &self.nodes[seed.0].value;
        if seed_val.len() != 1 {
            return Err(DiffError::NonScalarSeed(seed_val.shape().to_vec()));
        }
        let count = seed.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; count];
        if self.nodes[seed.0].requires_grad {
            grads[seed.0] = Some(Tensor::full(seed_val.shape(), T::one()));
        }
        for i in (0..count).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut params = Vec::new();
        let mut shapes = Vec::with_capacity(count);
        for (i, node) in self.nodes[..count].iter().enumerate() {
            shapes.push(node.value.shape().to_vec());
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if let Some(name) = &node.param {
                if node.requires_grad {
                    params.push((name.clone(), Var(i)));
                }
            }
        }
        Ok(Adjoints { grads, params, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &TapeNode<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, layout) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let a_rg = self.nodes[a.0].requires_grad;
                let b_rg = self.nodes[b.0].requires_grad;
                let mut ga = a_rg.then(|| Tensor::zeros(self.shape(*a)));
                let mut gb = b_rg.then(|| Tensor::zeros(self.shape(*b)));
                match *layout {
                    MatLayout::Flat { rows, k, n } => {
                        if let Some(ga) = &mut ga {
                            gemm(rows, n, k, gd, false, bv, true, ga.data_mut(), false);
                        }
                        if let Some(gb) = &mut gb {
                            gemm(k, rows, n, av, true, gd, false, gb.data_mut(), false);
                        }
                    }
                    MatLayout::SharedLeft { batch, m, k, n } => {
                        for i in 0..batch {
                            let gi = &gd[i * m * n..(i + 1) * m * n];
                            if let Some(ga) = &mut ga {
                                gemm(m, n, k, gi, false, &bv[i * k * n..], true, ga.data_mut(), true);
                            }
                            if let Some(gb) = &mut gb {
                                gemm(k, m, n, av, true, gi, false, &mut gb.data_mut()[i * k * n..], false);
                            }
                        }
                    }
                    MatLayout::Batched { batch, m, k, n } => {
                        for i in 0..batch {
                            let gi = &gd[i * m * n..(i + 1) * m * n];
                            if let Some(ga) = &mut ga {
                                gemm(m, n, k, gi, false, &bv[i * k * n..], true, &mut ga.data_mut()[i * m * k..], false);
                            }
                            if let Some(gb) = &mut gb {
                                gemm(k, m, n, &av[i * m * k..], true, gi, false, &mut gb.data_mut()[i * k * n..], false);
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Binary(a, b, kind, ma, mb) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let a_rg = self.nodes[a.0].requires_grad;
                let b_rg = self.nodes[b.0].requires_grad;
                let mut ga = a_rg.then(|| Tensor::zeros(self.shape(*a)));
                let mut gb = b_rg.then(|| Tensor::zeros(self.shape(*b)));
                if let Some(g) = &mut ga {
                    scatter(g.data_mut(), gd, ma, mb, av, bv, *kind, true);
                }
                if let Some(g) = &mut gb {
                    scatter(g.data_mut(), gd, ma, mb, av, bv, *kind, false);
                }
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.nodes[x.0].value.data();
                let yv = node.value.data();
                let data = gd.iter().zip(xv).zip(yv).map(|((&gi, &xi), &yi)| gi * kind.derivative(xi, yi)).collect();
                let t = Tensor::new(self.shape(*x).to_vec(), data).expect("shape preserved");
                self.accumulate(grads, *x, t);
            }
            Op::Affine { x, mul } => {
                let data = gd.iter().map(|&gi| gi * *mul).collect();
                let t = Tensor::new(self.shape(*x).to_vec(), data).expect("shape preserved");
                self.accumulate(grads, *x, t);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = lanes(shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) && len > 0 {
                    T::one() / T::from_usize(len).unwrap_or_else(T::one)
                } else {
                    T::one()
                };
                let mut t = Tensor::zeros(shape);
                let td = t.data_mut();
                for o in 0..outer {
                    for i in 0..len {
                        for r in 0..inner {
                            td[(o * len + i) * inner + r] = gd[o * inner + r] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, t);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = lanes(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.nodes[v.0].requires_grad {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[from..from + len * inner]);
                        }
                        let t = Tensor::new(self.shape(v).to_vec(), data).expect("concat slice");
                        self.accumulate(grads, v, t);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, full, inner) = lanes(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut t = Tensor::zeros(shape);
                let td = t.data_mut();
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    td[to..to + len * inner].copy_from_slice(&gd[from..from + len * inner]);
                }
                self.accumulate(grads, *x, t);
            }
            Op::IndexSelect { x, indices } => {
                let shape = self.shape(*x);
                let row = numel(&shape[1..]);
                let mut t = Tensor::zeros(shape);
                let td = t.data_mut();
                for (j, &i) in indices.iter().enumerate() {
                    for r in 0..row {
                        td[i * row + r] = td[i * row + r] + gd[j * row + r];
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::GatherLast { x, indices } => {
                let shape = self.shape(*x);
                let width = shape[shape.len() - 1];
                let mut t = Tensor::zeros(shape);
                let td = t.data_mut();
                for (l, &i) in indices.iter().enumerate() {
                    td[l * width + i] = td[l * width + i] + gd[l];
                }
                self.accumulate(grads, *x, t);
            }
            Op::MaskedSoftmax { x, axis, mask } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = lanes(shape, *axis);
                let y = node.value.data();
                let mut t = Tensor::zeros(shape);
                let td = t.data_mut();
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + r;
                        let mut dot = T::zero();
                        for i in 0..len {
                            dot = dot + y[at(i)] * gd[at(i)];
                        }
                        for i in 0..len {
                            if mask[at(i)] {
                                td[at(i)] = y[at(i)] * (gd[at(i)] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(x) => {
                let t = g.clone().with_shape(self.shape(*x).to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Transpose(x) => {
                let shape = self.shape(*x);
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                // The gradient is laid out [.., c, r].
                let data = transpose_data(gd, c, r);
                let t = Tensor::new(shape.to_vec(), data).expect("transpose shape");
                self.accumulate(grads, *x, t);
            }
        }
    }
}

fn transpose_data<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let block = rows * cols;
    if block == 0 {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(src.len());
    for b in 0..src.len() / block {
        let m = &src[b * block..(b + 1) * block];
        for c in 0..cols {
            for r in 0..rows {
                out.push(m[r * cols + c]);
            }
        }
    }
    out
}
