//! Reverse-mode differentiation over flat vector nodes.
//!
//! A [`Tape`] records every primitive application in construction order,
//! which is therefore a topological order. Matrices are flat row-major
//! vectors with the shape carried by the op that consumes them.
//! Differentiable leaves are always rows (or the whole of) a parameter in
//! a [`ParamSet`]; [`Tape::backward`] returns a [`GradientMap`] keyed by
//! [`ParamId`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::specfn::{self, DomainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape { op: &'static str, left: usize, right: usize },
    #[error("domain error in {op}: {source}")]
    Domain {
        op: &'static str,
        #[source]
        source: DomainError,
    },
    #[error("node does not belong to this tape")]
    ForeignNode,
    #[error("backward seed must be a scalar node, got length {0}")]
    NonScalarSeed(usize),
    #[error("parameter {0:?} has no row {1}")]
    RowOutOfRange(ParamId, usize),
    #[error("every entry of a masked softmax is masked")]
    FullyMasked,
    #[error("finite-difference step must be positive and finite")]
    BadStep,
    #[error("loss function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named row-major parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<T>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data does not match its shape");
        self.params.push(Param { name: name.into(), rows, cols, data });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Gradient of one parameter: dense contributions plus sparse row contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub rows: usize,
    pub cols: usize,
    dense: Option<Vec<T>>,
    sparse: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> ParamGrad<T> {
    fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, dense: None, sparse: BTreeMap::new() }
    }

    fn add_row(&mut self, row: usize, g: &[T]) {
        let slot = self.sparse.entry(row).or_insert_with(|| vec![T::zero(); g.len()]);
        for (s, &x) in slot.iter_mut().zip(g) {
            *s = *s + x;
        }
    }

    fn add_dense(&mut self, g: &[T]) {
        let slot = self.dense.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (s, &x) in slot.iter_mut().zip(g) {
            *s = *s + x;
        }
    }

    /// Rows carrying a sparse contribution, ascending.
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.sparse.keys().copied()
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = self.dense.clone().unwrap_or_else(|| vec![T::zero(); self.rows * self.cols]);
        for (&r, g) in &self.sparse {
            for (o, &x) in out[r * self.cols..(r + 1) * self.cols].iter_mut().zip(g) {
                *o = *o + x;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.dense.iter().flatten().chain(self.sparse.values().flatten()).all(|x| x.is_finite())
    }

    fn scale(&mut self, s: T) {
        for x in self.dense.iter_mut().flatten().chain(self.sparse.values_mut().flatten()) {
            *x = *x * s;
        }
    }
}

/// dL/dθ for every parameter reached by a backward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientMap<T> {
    grads: BTreeMap<ParamId, ParamGrad<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.grads.get(&id)
    }

    /// Dense gradient with the parameter's shape; zeros when untouched.
    pub fn dense(&self, params: &ParamSet<T>, id: ParamId) -> Vec<T> {
        match self.grads.get(&id) {
            Some(g) => g.to_dense(),
            None => vec![T::zero(); params.get(id).data.len()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    /// `self += other`, in ascending parameter/row order.
    pub fn accumulate(&mut self, other: &GradientMap<T>) {
        for (&id, g) in &other.grads {
            let slot = self.grads.entry(id).or_insert_with(|| ParamGrad::new(g.rows, g.cols));
            if let Some(d) = &g.dense {
                slot.add_dense(d);
            }
            for (&r, row) in &g.sparse {
                slot.add_row(r, row);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }

    fn entry(&mut self, id: ParamId, rows: usize, cols: usize) -> &mut ParamGrad<T> {
        self.grads.entry(id).or_insert_with(|| ParamGrad::new(rows, cols))
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param { id: ParamId, row: Option<usize>, rows: usize, cols: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Softplus(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Tanh(usize),
    Lgamma(usize),
    Digamma(usize),
    Floor { a: usize, floor: T },
    Sum(usize),
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    MatVec { m: usize, x: usize, rows: usize, cols: usize },
    Softmax(usize),
    SoftmaxColumns { a: usize, rows: usize, cols: usize },
    SumRows { a: usize, rows: usize, cols: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Vec<T>,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_len(op: &'static str, a: usize, b: usize) -> Result<usize, DiffError> {
    if a == b || b == 1 {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else {
        Err(DiffError::Shape { op, left: a, right: b })
    }
}

#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, g: impl Iterator<Item = (usize, T)>) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    for (i, x) in g {
        buf[i] = buf[i] + x;
    }
}

/// Adjoint of a broadcasting operand: sums over broadcast entries.
fn add_broadcast<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, g: impl Iterator<Item = (usize, T)>) {
    if len == 1 {
        let total = g.fold(T::zero(), |acc, (_, x)| acc + x);
        add_into(slot, 1, std::iter::once((0, total)));
    } else {
        add_into(slot, len, g);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Vec<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, n: NodeId) -> Result<usize, DiffError> {
        if n.tape == self.id && n.index < self.nodes.len() {
            Ok(n.index)
        } else {
            Err(DiffError::ForeignNode)
        }
    }

    pub fn value(&self, n: NodeId) -> &[T] {
        assert_eq!(n.tape, self.id, "node from a different tape");
        &self.nodes[n.index].value
    }

    /// First entry of a node; meant for scalar nodes.
    pub fn scalar(&self, n: NodeId) -> T {
        self.value(n)[0]
    }

    pub fn constant(&mut self, values: Vec<T>) -> NodeId {
        self.push(Op::Constant, values)
    }

    pub fn constant_scalar(&mut self, value: T) -> NodeId {
        self.push(Op::Constant, vec![value])
    }

    /// Whole parameter matrix as one differentiable leaf.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        let p = params.get(id);
        self.push(Op::Param { id, row: None, rows: p.rows, cols: p.cols }, p.data.clone())
    }

    /// One row of a parameter matrix as a differentiable leaf.
    pub fn param_row(&mut self, params: &ParamSet<T>, id: ParamId, row: usize) -> Result<NodeId, DiffError> {
        let p = params.get(id);
        if row >= p.rows {
            return Err(DiffError::RowOutOfRange(id, row));
        }
        Ok(self.push(Op::Param { id, row: Some(row), rows: p.rows, cols: p.cols }, p.row(row).to_vec()))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<NodeId, DiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let len = broadcast_len(name, va.len(), vb.len())?;
        let value = (0..len).map(|i| f(at(va, i), at(vb, i))).collect();
        Ok(self.push(op(ia, ib), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product (either operand may be a length-1 broadcast).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let ib = self.idx(b)?;
        if let Some(&z) = self.nodes[ib].value.iter().find(|x| **x == T::zero() || !x.is_finite()) {
            return Err(DiffError::Domain { op: "div", source: DomainError::NotFinite(z.as_f64()) });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| f(x)).collect();
        Ok(self.push(op(ia), value))
    }

    fn require_positive(&self, name: &'static str, a: NodeId) -> Result<(), DiffError> {
        let ia = self.idx(a)?;
        match self.nodes[ia].value.iter().find(|&&x| !(x > T::zero() && x.is_finite())) {
            Some(&bad) => Err(DiffError::Domain { op: name, source: DomainError::NotPositive(bad.as_f64()) }),
            None => Ok(()),
        }
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_positive("log", a)?;
        self.unary(a, T::ln, Op::Log)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, T::exp, Op::Exp)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_positive("sqrt", a)?;
        self.unary(a, T::sqrt, Op::Sqrt)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, specfn::softplus, Op::Softplus)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, specfn::sigmoid, Op::Sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, specfn::log_sigmoid, Op::LogSigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, T::tanh, Op::Tanh)
    }

    pub fn lgamma(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_positive("lgamma", a)?;
        self.unary(a, specfn::ln_gamma_unchecked, Op::Lgamma)
    }

    pub fn digamma(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_positive("digamma", a)?;
        self.unary(a, specfn::digamma_unchecked, Op::Digamma)
    }

    /// max(a, floor); the gradient is zero where the floor is active.
    pub fn floor(&mut self, a: NodeId, floor: T) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| x.max(floor)).collect();
        Ok(self.push(Op::Floor { a: ia, floor }, value))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let total = self.nodes[ia].value.iter().copied().sum();
        Ok(self.push(Op::Sum(ia), vec![total]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let value = idx.iter().flat_map(|&i| self.nodes[i].value.iter().copied()).collect();
        Ok(self.push(Op::Concat(idx), value))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        if start + len > src.len() {
            return Err(DiffError::Shape { op: "slice", left: src.len(), right: start + len });
        }
        let value = src[start..start + len].to_vec();
        Ok(self.push(Op::Slice { a: ia, start }, value))
    }

    /// `m` is a row-major `rows × cols` matrix, `x` has length `cols`.
    pub fn matvec(&mut self, m: NodeId, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        let (im, ix) = (self.idx(m)?, self.idx(x)?);
        let (vm, vx) = (&self.nodes[im].value, &self.nodes[ix].value);
        if vm.len() != rows * cols {
            return Err(DiffError::Shape { op: "matvec", left: vm.len(), right: rows * cols });
        }
        if vx.len() != cols {
            return Err(DiffError::Shape { op: "matvec", left: cols, right: vx.len() });
        }
        let value = vm.chunks_exact(cols).map(|row| row.iter().zip(vx).map(|(&a, &b)| a * b).sum()).collect();
        Ok(self.push(Op::MatVec { m: im, x: ix, rows, cols }, value))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let value = specfn::softmax(&self.nodes[ia].value).map_err(|source| DiffError::Domain { op: "softmax", source })?;
        Ok(self.push(Op::Softmax(ia), value))
    }

    /// Softmax over the entries where `mask` is true; the rest are exactly 0.
    pub fn softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.len() != mask.len() {
            return Err(DiffError::Shape { op: "softmax_masked", left: v.len(), right: mask.len() });
        }
        let value = specfn::softmax_masked(v, mask).ok_or(DiffError::FullyMasked)?;
        Ok(self.push(Op::Softmax(ia), value))
    }

    /// Softmax down each column of a row-major `rows × cols` matrix.
    pub fn softmax_columns(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.len() != rows * cols || rows == 0 {
            return Err(DiffError::Shape { op: "softmax_columns", left: v.len(), right: rows * cols });
        }
        let mut value = v.clone();
        let mut column = vec![T::zero(); rows];
        for c in 0..cols {
            for r in 0..rows {
                column[r] = v[r * cols + c];
            }
            specfn::softmax_in_place(&mut column);
            for r in 0..rows {
                value[r * cols + c] = column[r];
            }
        }
        Ok(self.push(Op::SoftmaxColumns { a: ia, rows, cols }, value))
    }

    /// Column sums of a row-major `rows × cols` matrix.
    pub fn sum_rows(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.len() != rows * cols {
            return Err(DiffError::Shape { op: "sum_rows", left: v.len(), right: rows * cols });
        }
        let mut value = vec![T::zero(); cols];
        for row in v.chunks_exact(cols) {
            for (o, &x) in value.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        Ok(self.push(Op::SumRows { a: ia, rows, cols }, value))
    }

    /// Inner product, built from `mul` and `sum`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Gradients of the scalar `seed` with respect to every parameter leaf.
    /// The tape is left untouched, so this can be called repeatedly.
    pub fn backward(&self, seed: NodeId) -> Result<GradientMap<T>, DiffError> {
        let is = self.idx(seed)?;
        let seed_len = self.nodes[is].value.len();
        if seed_len != 1 {
            return Err(DiffError::NonScalarSeed(seed_len));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; is + 1];
        adj[is] = Some(vec![T::one()]);
        let mut grads = GradientMap::new();

        for i in (0..=is).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            let val = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Constant => {}
                Op::Param { id, row, rows, cols } => {
                    let slot = grads.entry(*id, *rows, *cols);
                    match row {
                        Some(r) => slot.add_row(*r, &g),
                        None => slot.add_dense(&g),
                    }
                }
                &Op::Add(a, b) => {
                    add_broadcast(&mut adj[a], val(a).len(), g.iter().copied().enumerate());
                    add_broadcast(&mut adj[b], val(b).len(), g.iter().copied().enumerate());
                }
                &Op::Sub(a, b) => {
                    add_broadcast(&mut adj[a], val(a).len(), g.iter().copied().enumerate());
                    add_broadcast(&mut adj[b], val(b).len(), g.iter().map(|&x| -x).enumerate());
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    add_broadcast(&mut adj[a], va.len(), g.iter().enumerate().map(|(k, &x)| (k, x * at(vb, k))));
                    add_broadcast(&mut adj[b], vb.len(), g.iter().enumerate().map(|(k, &x)| (k, x * at(va, k))));
                }
                &Op::Div(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    add_broadcast(&mut adj[a], va.len(), g.iter().enumerate().map(|(k, &x)| (k, x / at(vb, k))));
                    add_broadcast(
                        &mut adj[b],
                        vb.len(),
                        g.iter().enumerate().map(|(k, &x)| {
                            let d = at(vb, k);
                            (k, -x * at(va, k) / (d * d))
                        }),
                    );
                }
                &Op::Neg(a) => add_into(&mut adj[a], y.len(), g.iter().map(|&x| -x).enumerate()),
                &Op::Log(a) => {
                    let va = val(a);
                    add_into(&mut adj[a], y.len(), g.iter().zip(va).map(|(&x, &v)| x / v).enumerate())
                }
                &Op::Exp(a) => add_into(&mut adj[a], y.len(), g.iter().zip(y).map(|(&x, &v)| x * v).enumerate()),
                &Op::Sqrt(a) => add_into(
                    &mut adj[a],
                    y.len(),
                    g.iter().zip(y).map(|(&x, &v)| x / (v + v)).enumerate(),
                ),
                &Op::Softplus(a) => {
                    let va = val(a);
                    add_into(&mut adj[a], y.len(), g.iter().zip(va).map(|(&x, &v)| x * specfn::sigmoid(v)).enumerate())
                }
                &Op::Sigmoid(a) => add_into(
                    &mut adj[a],
                    y.len(),
                    g.iter().zip(y).map(|(&x, &s)| x * s * (T::one() - s)).enumerate(),
                ),
                &Op::LogSigmoid(a) => {
                    let va = val(a);
                    add_into(&mut adj[a], y.len(), g.iter().zip(va).map(|(&x, &v)| x * specfn::sigmoid(-v)).enumerate())
                }
                &Op::Tanh(a) => add_into(
                    &mut adj[a],
                    y.len(),
                    g.iter().zip(y).map(|(&x, &t)| x * (T::one() - t * t)).enumerate(),
                ),
                &Op::Lgamma(a) => {
                    let va = val(a);
                    add_into(
                        &mut adj[a],
                        y.len(),
                        g.iter().zip(va).map(|(&x, &v)| x * specfn::digamma_unchecked(v)).enumerate(),
                    )
                }
                &Op::Digamma(a) => {
                    let va = val(a);
                    add_into(
                        &mut adj[a],
                        y.len(),
                        g.iter().zip(va).map(|(&x, &v)| x * specfn::trigamma_unchecked(v)).enumerate(),
                    )
                }
                &Op::Floor { a, floor } => {
                    let va = val(a);
                    add_into(
                        &mut adj[a],
                        y.len(),
                        g.iter().zip(va).map(|(&x, &v)| if v > floor { x } else { T::zero() }).enumerate(),
                    )
                }
                &Op::Sum(a) => {
                    let len = val(a).len();
                    add_into(&mut adj[a], len, (0..len).map(|k| (k, g[0])));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        add_into(&mut adj[p], len, g[offset..offset + len].iter().copied().enumerate());
                        offset += len;
                    }
                }
                &Op::Slice { a, start } => {
                    let len = val(a).len();
                    add_into(&mut adj[a], len, g.iter().enumerate().map(|(k, &x)| (start + k, x)));
                }
                &Op::MatVec { m, x, rows, cols } => {
                    let (vm, vx) = (val(m), val(x));
                    add_into(
                        &mut adj[m],
                        rows * cols,
                        (0..rows * cols).map(|k| (k, g[k / cols] * vx[k % cols])),
                    );
                    let mut gx = vec![T::zero(); cols];
                    for (r, row) in vm.chunks_exact(cols).enumerate() {
                        for (o, &w) in gx.iter_mut().zip(row) {
                            *o = *o + g[r] * w;
                        }
                    }
                    add_into(&mut adj[x], cols, gx.into_iter().enumerate());
                }
                &Op::Softmax(a) => {
                    // Masked entries have y = 0, so their adjoint vanishes too.
                    let inner: T = g.iter().zip(y).map(|(&x, &s)| x * s).sum();
                    add_into(&mut adj[a], y.len(), g.iter().zip(y).map(|(&x, &s)| s * (x - inner)).enumerate());
                }
                &Op::SoftmaxColumns { a, rows, cols } => {
                    let mut ga = vec![T::zero(); rows * cols];
                    for c in 0..cols {
                        let inner: T = (0..rows).map(|r| g[r * cols + c] * y[r * cols + c]).sum();
                        for r in 0..rows {
                            let k = r * cols + c;
                            ga[k] = y[k] * (g[k] - inner);
                        }
                    }
                    add_into(&mut adj[a], rows * cols, ga.into_iter().enumerate());
                }
                &Op::SumRows { a, rows, cols } => {
                    add_into(&mut adj[a], rows * cols, (0..rows * cols).map(|k| (k, g[k % cols])));
                }
            }
        }
        Ok(grads)
    }
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` records a scalar loss on a fresh tape from the given
/// parameters. Every scalar of every parameter is perturbed by `±step`.
/// Returns `max |analytic − numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<T, E, F>(params: &ParamSet<T>, step: T, mut build: F) -> Result<T, E>
where
    T: Scalar,
    E: From<DiffError>,
    F: FnMut(&ParamSet<T>, &mut Tape<T>) -> Result<NodeId, E>,
{
    if !(step > T::zero() && step.is_finite()) {
        return Err(DiffError::BadStep.into());
    }
    let (reference, analytic) = {
        let mut tape = Tape::new();
        let out = build(params, &mut tape)?;
        (tape.scalar(out), tape.backward(out).map_err(E::from)?)
    };
    let mut eval = |p: &ParamSet<T>| -> Result<T, E> {
        let mut tape = Tape::new();
        let out = build(p, &mut tape)?;
        Ok(tape.scalar(out))
    };
    let again = eval(params)?;
    if reference != again && !(reference.is_nan() && again.is_nan()) {
        return Err(DiffError::NonDeterministic { first: reference.as_f64(), second: again.as_f64() }.into());
    }

    let mut probe = params.clone();
    let mut worst = T::zero();
    let two = T::lit(2.0);
    for id in params.ids() {
        let dense = analytic.dense(params, id);
        for k in 0..dense.len() {
            let base = probe.get(id).data[k];
            probe.get_mut(id).data[k] = base + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data[k] = base - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data[k] = base;
            let numeric = (up - down) / (two * step);
            let err = (dense[k] - numeric).abs() / numeric.abs().max(T::one());
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}
