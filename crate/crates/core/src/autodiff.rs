//! Eager reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters enter as
//! borrowed leaves so no weights are copied per forward pass. `backward` walks
//! the record in reverse and returns gradients for every node that needs one.

use std::cell::RefCell;

use crate::scalar::Real;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Owned(Matrix<T>),
    Borrowed(&'p Matrix<T>),
}

impl<T> Value<'_, T> {
    #[inline]
    fn get(&self) -> &Matrix<T> {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

struct GruSaved<T> {
    gx: Var,
    h: Var,
    wh: Var,
    bh: Var,
    active: Vec<bool>,
    r: Matrix<T>,
    z: Matrix<T>,
    n: Matrix<T>,
    ghn: Matrix<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    MulRowBroadcast(Var, Var),
    RowSum(Var),
    WeightedSum(Var, Matrix<T>),
    LogSoftmax(Var),
    PickWeighted(Var, Vec<(usize, T)>),
    StraightThrough(Var),
    SelectRows(Vec<bool>, Var, Var),
    Gru(Box<GruSaved<T>>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Graph<'p, T: Real> {
    nodes: RefCell<Vec<Node<'p, T>>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, shape: (usize, usize), f: impl FnOnce(&mut Matrix<T>)) {
    let m = slot.get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
    f(m);
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(1024)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&self, m: &'p Matrix<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, needs_grad: true });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient (e.g. an input being differentiated).
    pub fn variable(&self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn constant(&self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Matrix<T> {
        self.nodes.borrow()[v.0].value.get().clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Matrix<T>) -> R) -> R {
        f(self.nodes.borrow()[v.0].value.get())
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.get().shape()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.with_value(v, |m| {
            debug_assert_eq!(m.shape(), (1, 1));
            m.as_slice()[0]
        })
    }

    fn unary(&self, a: Var, f: impl Fn(&Matrix<T>) -> Matrix<T>, op: Op<T>) -> Var {
        let value = self.with_value(a, f);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Matrix<T>, &Matrix<T>) -> Matrix<T>, op: Op<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(nodes[a.0].value.get(), nodes[b.0].value.get())
        };
        let ng = self.needs(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a, b))
    }

    /// `a + b` with `b` a `1×n` row broadcast over the rows of `a`.
    pub fn add_bias(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(y.rows(), 1, "bias must be a row vector");
                assert_eq!(x.cols(), y.cols(), "bias width mismatch");
                let mut out = x.clone();
                for r in 0..out.rows() {
                    for (o, &bv) in out.row_mut(r).iter_mut().zip(y.row(0)) {
                        *o += bv;
                    }
                }
                out
            },
            Op::AddBias(a, b),
        )
    }

    /// `x · w + b`
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p + q), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p - q), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p * q), Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        self.unary(a, |x| x.map(|v| v * s), Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        self.unary(a, |x| x.map(|v| v + s), Op::AddScalar(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(sigmoid), Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(T::tanh), Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(|v| v.max(T::zero())), Op::Relu(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(T::sqrt), Op::Sqrt(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(T::exp), Op::Exp(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ms: Vec<&Matrix<T>> = parts.iter().map(|v| nodes[v.0].value.get()).collect();
            let rows = ms[0].rows();
            let cols: usize = ms.iter().map(|m| m.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let orow = out.row_mut(r);
                let mut off = 0;
                for m in &ms {
                    assert_eq!(m.rows(), rows, "row mismatch in concat_cols");
                    orow[off..off + m.cols()].copy_from_slice(m.row(r));
                    off += m.cols();
                }
            }
            out
        };
        let ng = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(
            a,
            |x| Matrix::from_fn(x.rows(), end - start, |r, c| x[(r, start + c)]),
            Op::SliceCols(a, start),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ms: Vec<&Matrix<T>> = parts.iter().map(|v| nodes[v.0].value.get()).collect();
            Matrix::vstack(&ms)
        };
        let ng = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice_rows(start, end), Op::SliceRows(a, start))
    }

    /// Embedding-style row lookup.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        self.unary(table, |x| x.select_rows(idx), Op::GatherRows(table, idx.to_vec()))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Matrix::transpose, Op::Transpose(a))
    }

    /// `a ⊙ b` with `b` a `1×n` row broadcast over rows.
    pub fn mul_row_broadcast(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(y.rows(), 1);
                Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] * y[(0, c)])
            },
            Op::MulRowBroadcast(a, b),
        )
    }

    /// Per-row sum, `m×n → m×1`.
    pub fn row_sum(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Matrix::from_fn(x.rows(), 1, |r, _| x.row(r).iter().copied().sum()),
            Op::RowSum(a),
        )
    }

    /// `Σ w ⊙ a` as a `1×1` node.
    pub fn weighted_sum(&self, a: Var, weights: Matrix<T>) -> Var {
        let value = self.with_value(a, |x| {
            assert_eq!(x.shape(), weights.shape(), "weight shape mismatch");
            let s: T = x.as_slice().iter().zip(weights.as_slice()).map(|(&p, &q)| p * q).sum();
            Matrix::filled(1, 1, s)
        });
        let ng = self.needs(&[a]);
        self.push(value, Op::WeightedSum(a, weights), ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.weighted_sum(a, Matrix::filled(r, c, T::one()))
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                    for v in row.iter_mut() {
                        *v = *v - lse;
                    }
                }
                out
            },
            Op::LogSoftmax(a),
        )
    }

    /// `Σ_r w_r · a[r, idx_r]` over the listed `(idx_r, w_r)` per row.
    pub fn pick_weighted(&self, a: Var, picks: Vec<(usize, T)>) -> Var {
        let value = self.with_value(a, |x| {
            assert_eq!(picks.len(), x.rows(), "one pick per row required");
            let s: T = picks.iter().enumerate().map(|(r, &(c, w))| x[(r, c)] * w).sum();
            Matrix::filled(1, 1, s)
        });
        let ng = self.needs(&[a]);
        self.push(value, Op::PickWeighted(a, picks), ng)
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&self, soft: Var, hard: Matrix<T>) -> Var {
        assert_eq!(self.shape(soft), hard.shape(), "straight-through shape mismatch");
        let ng = self.needs(&[soft]);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// Row `r` from `a` where `take_a[r]`, otherwise from `b`.
    pub fn select_rows(&self, take_a: &[bool], a: Var, b: Var) -> Var {
        let mask = take_a.to_vec();
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape());
                let mut out = y.clone();
                for (r, &t) in mask.iter().enumerate() {
                    if t {
                        out.row_mut(r).copy_from_slice(x.row(r));
                    }
                }
                out
            },
            Op::SelectRows(take_a.to_vec(), a, b),
        )
    }

    /// One masked GRU step. `gx` holds the input projection `x·Wx + bx` laid out
    /// as `[reset | update | candidate]`; rows with `active[r] == false` carry
    /// `h` through unchanged.
    pub fn gru_step(&self, gx: Var, h: Var, wh: Var, bh: Var, active: &[bool]) -> Var {
        let (out, saved) = {
            let nodes = self.nodes.borrow();
            let gxm = nodes[gx.0].value.get();
            let hm = nodes[h.0].value.get();
            let whm = nodes[wh.0].value.get();
            let bhm = nodes[bh.0].value.get();
            let (b, hd) = hm.shape();
            assert_eq!(gxm.shape(), (b, 3 * hd), "gru input projection shape");
            assert_eq!(whm.shape(), (hd, 3 * hd), "gru recurrent weight shape");
            assert_eq!(active.len(), b, "gru mask length");
            let mut gh = Matrix::zeros(b, 3 * hd);
            for r in 0..b {
                gh.row_mut(r).copy_from_slice(bhm.row(0));
            }
            gemm_acc(hm, whm, &mut gh);
            let mut rg = Matrix::zeros(b, hd);
            let mut zg = Matrix::zeros(b, hd);
            let mut ng = Matrix::zeros(b, hd);
            let mut ghn = Matrix::zeros(b, hd);
            let mut out = hm.clone();
            for row in 0..b {
                let gxr = gxm.row(row);
                let ghr = gh.row(row);
                for j in 0..hd {
                    let rv = sigmoid(gxr[j] + ghr[j]);
                    let zv = sigmoid(gxr[hd + j] + ghr[hd + j]);
                    let hn = ghr[2 * hd + j];
                    let nv = (gxr[2 * hd + j] + rv * hn).tanh();
                    rg[(row, j)] = rv;
                    zg[(row, j)] = zv;
                    ng[(row, j)] = nv;
                    ghn[(row, j)] = hn;
                    if active[row] {
                        out[(row, j)] = (T::one() - zv) * nv + zv * hm[(row, j)];
                    }
                }
            }
            let saved = GruSaved { gx, h, wh, bh, active: active.to_vec(), r: rg, z: zg, n: ng, ghn };
            (out, saved)
        };
        let needs = self.needs(&[gx, h, wh, bh]);
        self.push(out, Op::Gru(Box::new(saved)), needs)
    }

    /// Gradients of the `1×1` node `root` with respect to every upstream node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.get().shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        let shape = |v: Var| nodes[v.0].value.get().shape();
        let val = |v: Var| nodes[v.0].value.get();
        let wants = |v: Var| nodes[v.0].needs_grad;

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = nodes[i].value.get();
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], shape(*a), |m| gemm_nt_acc(&g, val(*b), m));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], shape(*b), |m| gemm_tn_acc(val(*a), &g, m));
                    }
                }
                Op::AddBias(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], shape(*b), |m| {
                            for r in 0..g.rows() {
                                for (o, &gv) in m.row_mut(0).iter_mut().zip(g.row(r)) {
                                    *o += gv;
                                }
                            }
                        });
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], shape(*a), |m| m.add_assign(&g));
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if wants(*v) {
                            accumulate(&mut grads[v.0], shape(*v), |m| m.add_assign(&g));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], shape(*a), |m| m.add_assign(&g));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], shape(*b), |m| {
                            for (o, &gv) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                                *o -= gv;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let bv = val(*b);
                        accumulate(&mut grads[a.0], shape(*a), |m| {
                            for ((o, &gv), &y) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                                *o += gv * y;
                            }
                        });
                    }
                    if wants(*b) {
                        let av = val(*a);
                        accumulate(&mut grads[b.0], shape(*b), |m| {
                            for ((o, &gv), &x) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                                *o += gv * x;
                            }
                        });
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for (o, &gv) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *o += gv * s;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| m.add_assign(&g));
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for ((o, &gv), &y) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                            *o += gv * y * (T::one() - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for ((o, &gv), &y) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                            *o += gv * (T::one() - y * y);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for ((o, &gv), &xv) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                            if xv > T::zero() {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let half = T::from_f64_lossy(0.5);
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for ((o, &gv), &y) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                            *o += gv * half / y;
                        }
                    });
                }
                Op::Exp(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for ((o, &gv), &y) in m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                            *o += gv * y;
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, pc) = shape(*p);
                        if wants(*p) {
                            accumulate(&mut grads[p.0], (pr, pc), |m| {
                                for r in 0..pr {
                                    for (o, &gv) in m.row_mut(r).iter_mut().zip(&g.row(r)[off..off + pc]) {
                                        *o += gv;
                                    }
                                }
                            });
                        }
                        off += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let start = *start;
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for r in 0..g.rows() {
                            for (o, &gv) in m.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, pc) = shape(*p);
                        if wants(*p) {
                            accumulate(&mut grads[p.0], (pr, pc), |m| {
                                let src = &g.as_slice()[off * pc..(off + pr) * pc];
                                for (o, &gv) in m.as_mut_slice().iter_mut().zip(src) {
                                    *o += gv;
                                }
                            });
                        }
                        off += pr;
                    }
                }
                Op::SliceRows(a, start) => {
                    let start = *start;
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        let c = g.cols();
                        let dst = &mut m.as_mut_slice()[start * c..(start + g.rows()) * c];
                        for (o, &gv) in dst.iter_mut().zip(g.as_slice()) {
                            *o += gv;
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for (r, &src) in idx.iter().enumerate() {
                            for (o, &gv) in m.row_mut(src).iter_mut().zip(g.row(r)) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    accumulate(&mut grads[a.0], shape(*a), |m| m.add_assign(&gt));
                }
                Op::MulRowBroadcast(a, b) => {
                    if wants(*a) {
                        let bv = val(*b);
                        accumulate(&mut grads[a.0], shape(*a), |m| {
                            for r in 0..g.rows() {
                                for ((o, &gv), &y) in m.row_mut(r).iter_mut().zip(g.row(r)).zip(bv.row(0)) {
                                    *o += gv * y;
                                }
                            }
                        });
                    }
                    if wants(*b) {
                        let av = val(*a);
                        accumulate(&mut grads[b.0], shape(*b), |m| {
                            for r in 0..g.rows() {
                                for ((o, &gv), &x) in m.row_mut(0).iter_mut().zip(g.row(r)).zip(av.row(r)) {
                                    *o += gv * x;
                                }
                            }
                        });
                    }
                }
                Op::RowSum(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for r in 0..m.rows() {
                            let gv = g[(r, 0)];
                            for o in m.row_mut(r) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::WeightedSum(a, w) => {
                    let gv = g[(0, 0)];
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for (o, &wv) in m.as_mut_slice().iter_mut().zip(w.as_slice()) {
                            *o += gv * wv;
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for r in 0..g.rows() {
                            let gs: T = g.row(r).iter().copied().sum();
                            for ((o, &gv), &y) in m.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                                *o += gv - y.exp() * gs;
                            }
                        }
                    });
                }
                Op::PickWeighted(a, picks) => {
                    let gv = g[(0, 0)];
                    accumulate(&mut grads[a.0], shape(*a), |m| {
                        for (r, &(c, w)) in picks.iter().enumerate() {
                            m[(r, c)] += gv * w;
                        }
                    });
                }
                Op::StraightThrough(a) => {
                    accumulate(&mut grads[a.0], shape(*a), |m| m.add_assign(&g));
                }
                Op::SelectRows(mask, a, b) => {
                    for (v, take) in [(a, true), (b, false)] {
                        if wants(*v) {
                            accumulate(&mut grads[v.0], shape(*v), |m| {
                                for (r, &t) in mask.iter().enumerate() {
                                    if t == take {
                                        for (o, &gv) in m.row_mut(r).iter_mut().zip(g.row(r)) {
                                            *o += gv;
                                        }
                                    }
                                }
                            });
                        }
                    }
                }
                Op::Gru(s) => {
                    let hm = val(s.h);
                    let (b, hd) = hm.shape();
                    let mut dgx = Matrix::zeros(b, 3 * hd);
                    let mut dgh = Matrix::zeros(b, 3 * hd);
                    let mut dh = Matrix::zeros(b, hd);
                    for row in 0..b {
                        if !s.active[row] {
                            dh.row_mut(row).copy_from_slice(g.row(row));
                            continue;
                        }
                        for j in 0..hd {
                            let go = g[(row, j)];
                            let (rv, zv, nv, hn) = (s.r[(row, j)], s.z[(row, j)], s.n[(row, j)], s.ghn[(row, j)]);
                            let dn = go * (T::one() - zv);
                            let dz = go * (hm[(row, j)] - nv);
                            dh[(row, j)] = go * zv;
                            let dn_pre = dn * (T::one() - nv * nv);
                            let dr = dn_pre * hn;
                            let dr_pre = dr * rv * (T::one() - rv);
                            let dz_pre = dz * zv * (T::one() - zv);
                            dgx[(row, j)] = dr_pre;
                            dgx[(row, hd + j)] = dz_pre;
                            dgx[(row, 2 * hd + j)] = dn_pre;
                            dgh[(row, j)] = dr_pre;
                            dgh[(row, hd + j)] = dz_pre;
                            dgh[(row, 2 * hd + j)] = dn_pre * rv;
                        }
                    }
                    if wants(s.wh) {
                        accumulate(&mut grads[s.wh.0], shape(s.wh), |m| gemm_tn_acc(hm, &dgh, m));
                    }
                    if wants(s.bh) {
                        accumulate(&mut grads[s.bh.0], shape(s.bh), |m| {
                            for r in 0..b {
                                for (o, &gv) in m.row_mut(0).iter_mut().zip(dgh.row(r)) {
                                    *o += gv;
                                }
                            }
                        });
                    }
                    if wants(s.h) {
                        gemm_nt_acc(&dgh, val(s.wh), &mut dh);
                        accumulate(&mut grads[s.h.0], (b, hd), |m| m.add_assign(&dh));
                    }
                    if wants(s.gx) {
                        accumulate(&mut grads[s.gx.0], (b, 3 * hd), |m| m.add_assign(&dgx));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of `f` w.r.t. every entry of the listed inputs.
    fn check(inputs: Vec<Matrix<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        let eps = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                x.as_mut_slice()[idx] += delta;
                            }
                            g2.variable(x)
                        })
                        .collect();
                    let o = f(&g2, &vs);
                    g2.scalar(o)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = grads.get(vars[k]).map_or(0.0, |gm| gm.as_slice()[idx]);
                let tol = 1e-6 * (1.0 + fd.abs());
                assert!((fd - an).abs() < tol, "input {k} entry {idx}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        check(vec![mat(3, 4, 1), mat(4, 2, 2), mat(1, 2, 3)], |g, v| {
            let y = g.affine(v[0], v[1], v[2]);
            let t = g.tanh(y);
            let s = g.sigmoid(y);
            let m = g.mul(t, s);
            let d = g.sub(m, y);
            let sc = g.scale(d, 0.7);
            let sq = g.mul(sc, sc);
            g.sum(sq)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check(vec![mat(3, 2, 4), mat(3, 3, 5), mat(4, 5, 6)], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]]);
            let s = g.slice_cols(c, 1, 4);
            let r = g.concat_rows(&[s, v[1]]);
            let sr = g.slice_rows(r, 1, 5);
            let emb = g.gather_rows(v[2], &[0, 3, 3, 1]);
            let es = g.slice_cols(emb, 0, 3);
            let p = g.mul(sr, es);
            let t = g.transpose(p);
            let rs = g.row_sum(t);
            let sq = g.mul(rs, rs);
            g.sum(sq)
        });
    }

    #[test]
    fn log_softmax_pick_and_broadcast_gradients() {
        check(vec![mat(3, 5, 7), mat(1, 5, 8)], |g, v| {
            let b = g.mul_row_broadcast(v[0], v[1]);
            let ls = g.log_softmax(b);
            g.pick_weighted(ls, vec![(0, 1.0), (4, 0.5), (2, 2.0)])
        });
    }

    #[test]
    fn relu_sqrt_exp_select_gradients() {
        check(vec![mat(4, 3, 9), mat(4, 3, 10)], |g, v| {
            let sel = g.select_rows(&[true, false, false, true], v[0], v[1]);
            let r = g.relu(sel);
            let sq = g.mul(r, r);
            let sh = g.add_scalar(sq, 0.3);
            let s = g.sqrt(sh);
            let s = g.exp(s);
            g.weighted_sum(s, Matrix::from_fn(4, 3, |r, c| (r + 2 * c) as f64 * 0.1))
        });
    }

    #[test]
    fn masked_gru_step_gradients() {
        check(vec![mat(3, 12, 11), mat(3, 4, 12), mat(4, 12, 13), mat(1, 12, 14)], |g, v| {
            let h1 = g.gru_step(v[0], v[1], v[2], v[3], &[true, false, true]);
            let h2 = g.gru_step(v[0], h1, v[2], v[3], &[true, true, false]);
            let sq = g.mul(h2, h2);
            g.sum(sq)
        });
    }

    #[test]
    fn inactive_gru_rows_are_copied_exactly() {
        let g = Graph::new();
        let h = g.constant(mat(2, 3, 3));
        let gx = g.constant(mat(2, 9, 4));
        let wh = g.constant(mat(3, 9, 5));
        let bh = g.constant(mat(1, 9, 6));
        let out = g.gru_step(gx, h, wh, bh, &[false, true]);
        assert_eq!(g.value(out).row(0), g.value(h).row(0));
        assert_ne!(g.value(out).row(1), g.value(h).row(1));
    }

    #[test]
    fn straight_through_passes_gradient_to_soft_input() {
        let g = Graph::new();
        let soft = g.variable(Matrix::from_rows(&[vec![0.2, 0.8]]));
        let st = g.straight_through(soft, Matrix::from_rows(&[vec![0.0, 1.0]]));
        assert_eq!(g.value(st).as_slice(), &[0.0, 1.0]);
        let out = g.weighted_sum(st, Matrix::from_rows(&[vec![3.0, 5.0]]));
        let grads = g.backward(out);
        assert_eq!(grads.get(soft).unwrap().as_slice(), &[3.0, 5.0]);
    }
}
