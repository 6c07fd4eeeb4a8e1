//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! the backward sweep is a single reverse pass over it.

use super::{Array, ParamId, ParamStore};
use crate::error::{LabError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Abs,
    /// Softmax over the last axis.
    Softmax,
    Sigmoid,
    Tanh,
    Elu,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elementwise(Var, Activation),
    Softmax(Var),
    Square(Var),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    PickCols(Var, Vec<usize>),
    RowVecMat(Var, Var),
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` depends on a
    /// parameter or was created with [`Tape::input_tracked`].
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Array>,
    tracked: Vec<bool>,
}

// C (m x n) (+)= op(A) (m x k) * op(B) (k x n); `ta`/`tb` read the stored
// row-major buffer transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the buffers hold m*k, k*n and m*n elements laid out with the
    // strides computed above; callers check shapes before reaching here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn apply(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Abs => x.abs(),
        Activation::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Softmax => unreachable!("softmax is not elementwise"),
    }
}

// Derivative given input x and output y. Kinks (relu/abs at 0) take 0.
fn derivative(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Tanh => 1.0 - y * y,
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Activation::Softmax => unreachable!(),
    }
}

pub(crate) fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.values[v.0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    fn push(&mut self, op: Op, value: Array, tracked: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(LabError::NonFinite(name.to_string()));
        }
        self.ops.push(op);
        self.values.push(value);
        self.tracked.push(tracked);
        Ok(Var(self.values.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Input, value, false, "input")
    }

    /// Input whose gradient is kept in [`Gradients`] (used for probing
    /// derivatives with respect to data, e.g. agent utilities).
    pub fn input_tracked(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Input, value, true, "input")
    }

    /// Leaf bound to a parameter; its gradient accumulates into the store
    /// passed to [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.ops.push(Op::Param(id));
        self.values.push(value);
        self.tracked.push(true);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(LabError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMul(a, b), Array::matrix(m, n, out)?, tracked, "matmul")
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(LabError::dim("add_row", xv.shape(), bv.shape()));
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        self.push(Op::AddRow(x, bias), out, tracked, "add_row")
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight).map_err(|e| match e {
            LabError::Dimension { lhs, rhs, .. } => LabError::Dimension {
                op: "linear",
                lhs,
                rhs,
            },
            other => other,
        })?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(LabError::dim(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Array::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), out, t, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub(a, b), out, t, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Mul(a, b), out, t, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let t = self.tracked(x);
        self.push(Op::Scale(x, s), out, t, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += s);
        let t = self.tracked(x);
        self.push(Op::AddScalar(x), out, t, "add_scalar")
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(LabError::contract("activation on empty array"));
        }
        let t = self.tracked(x);
        if kind == Activation::Softmax {
            let mut out = xv.clone();
            let cols = out.cols();
            softmax_rows(out.data_mut(), cols);
            return self.push(Op::Softmax(x), out, t, "softmax");
        }
        let mut out = xv.clone();
        out.data_mut().iter_mut().for_each(|v| *v = apply(kind, *v));
        self.push(Op::Elementwise(x, kind), out, t, "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Abs, x)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Softmax, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        let t = self.tracked(x);
        self.push(Op::Square(x), out, t, "square")
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let t = self.tracked(x);
        self.push(Op::SumAll(x), Array::scalar(s), t, "sum_all")
    }

    /// Row sums: `[r, c] -> [r]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let data: Vec<f64> = xv.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let t = self.tracked(x);
        self.push(Op::SumLast(x), Array::vector(data), t, "sum_last")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let t = self.tracked(x);
        self.push(Op::Reshape(x), out, t, "reshape")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::contract("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(LabError::dim(
                    "concat_cols",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Array::matrix(rows, total, out)?,
            t,
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start + width > cols {
            return Err(LabError::dim("slice_cols", xv.shape(), &[start, width]));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let t = self.tracked(x);
        self.push(
            Op::SliceCols(x, start),
            Array::matrix(rows, width, out)?,
            t,
            "slice_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::contract("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(LabError::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / cols.max(1);
        let t = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Array::matrix(rows, cols, out)?,
            t,
            "concat_rows",
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(LabError::dim("gather_rows", xv.shape(), &[r]));
            }
            out.extend_from_slice(xv.row(r));
        }
        let t = self.tracked(x);
        self.push(
            Op::GatherRows(x, rows.to_vec()),
            Array::matrix(rows.len(), cols, out)?,
            t,
            "gather_rows",
        )
    }

    /// `[r, c] -> [r * times, c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(xv.row(r));
            }
        }
        let t = self.tracked(x);
        self.push(
            Op::RepeatRows(x, times),
            Array::matrix(rows * times, cols, out)?,
            t,
            "repeat_rows",
        )
    }

    /// One entry per row: `out[r] = x[r, cols[r]]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if cols.len() != xv.rows() {
            return Err(LabError::dim("pick_cols", xv.shape(), &[cols.len()]));
        }
        let width = xv.cols();
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= width {
                return Err(LabError::dim("pick_cols", xv.shape(), &[r, c]));
            }
            out.push(xv.row(r)[c]);
        }
        let t = self.tracked(x);
        self.push(
            Op::PickCols(x, cols.to_vec()),
            Array::vector(out),
            t,
            "pick_cols",
        )
    }

    /// Per-row vector-matrix product: `v [b, n]`, `m [b, n*e]` viewed as a
    /// stack of `n x e` matrices, output `[b, e]`.
    pub fn row_vec_mat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (vv, mv) = (self.value(v), self.value(m));
        let (b, n) = (vv.rows(), vv.cols());
        if mv.rows() != b || n == 0 || mv.cols() % n != 0 {
            return Err(LabError::dim("row_vec_mat", vv.shape(), mv.shape()));
        }
        let e = mv.cols() / n;
        let mut out = vec![0.0; b * e];
        for r in 0..b {
            let vr = vv.row(r);
            let mr = mv.row(r);
            let o = &mut out[r * e..(r + 1) * e];
            for (i, vi) in vr.iter().enumerate() {
                for (oj, mij) in o.iter_mut().zip(&mr[i * e..(i + 1) * e]) {
                    *oj += vi * mij;
                }
            }
        }
        let t = self.tracked(v) || self.tracked(m);
        self.push(
            Op::RowVecMat(v, m),
            Array::matrix(b, e, out)?,
            t,
            "row_vec_mat",
        )
    }

    /// Back-propagates from a scalar node. Parameter gradients accumulate
    /// into `store`; the caller zeroes them between steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LabError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite("backward".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let out = &self.values[i];
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.tracked[v.0] {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.values[v.0].len()]);
            f(slot);
        };
        match &self.ops[i] {
            Op::Input => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                send(grads, *a, &|ga| gemm(m, n, k, g, false, bv.data(), true, ga, true));
                send(grads, *b, &|gb| gemm(k, m, n, av.data(), true, g, false, gb, true));
            }
            Op::AddRow(x, b) => {
                let cols = out.cols();
                send(grads, *x, &|gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                send(grads, *b, &|gb| {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Add(a, b) => {
                send(grads, *a, &|ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                send(grads, *b, &|gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                send(grads, *a, &|ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                send(grads, *b, &|gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(grads, *a, &|ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                send(grads, *b, &|gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(x, s) => {
                send(grads, *x, &|gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v));
            }
            Op::AddScalar(x) => {
                send(grads, *x, &|gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Elementwise(x, kind) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                send(grads, *x, &|gx| {
                    for (((d, s), xi), yi) in gx.iter_mut().zip(g).zip(xv).zip(yv) {
                        *d += s * derivative(*kind, *xi, *yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                send(grads, *x, &|gx| {
                    for ((dr, gr), yr) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                send(grads, *x, &|gx| {
                    for ((d, s), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * xi * s;
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g[0];
                send(grads, *x, &|gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::SumLast(x) => {
                let cols = self.value(*x).cols();
                send(grads, *x, &|gx| {
                    for (row, s) in gx.chunks_mut(cols).zip(g) {
                        row.iter_mut().for_each(|d| *d += s);
                    }
                });
            }
            Op::Reshape(x) => {
                send(grads, *x, &|gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    send(grads, *p, &|gp| {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            dst.iter_mut()
                                .zip(&src[offset..offset + w])
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (w, cols) = (out.cols(), self.value(*x).cols());
                send(grads, *x, &|gx| {
                    for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(w)) {
                        dst[*start..*start + w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    send(grads, *p, &|gp| {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, s)| *d += s);
                    });
                    offset += n;
                }
            }
            Op::GatherRows(x, rows) => {
                let cols = out.cols();
                send(grads, *x, &|gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * cols..(k + 1) * cols];
                        gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::RepeatRows(x, times) => {
                let cols = out.cols();
                send(grads, *x, &|gx| {
                    for (r, dst) in gx.chunks_mut(cols).enumerate() {
                        for k in 0..*times {
                            let src = &g[(r * times + k) * cols..(r * times + k + 1) * cols];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::PickCols(x, cols) => {
                let width = self.value(*x).cols();
                send(grads, *x, &|gx| {
                    for (r, (&c, s)) in cols.iter().zip(g).enumerate() {
                        gx[r * width + c] += s;
                    }
                });
            }
            Op::RowVecMat(v, m) => {
                let (vv, mv) = (self.value(*v), self.value(*m));
                let n = vv.cols();
                let e = out.cols();
                send(grads, *v, &|gv| {
                    for (r, gr) in g.chunks(e).enumerate() {
                        let mr = mv.row(r);
                        for i in 0..n {
                            let dot: f64 =
                                gr.iter().zip(&mr[i * e..(i + 1) * e]).map(|(a, b)| a * b).sum();
                            gv[r * n + i] += dot;
                        }
                    }
                });
                send(grads, *m, &|gm| {
                    for (r, gr) in g.chunks(e).enumerate() {
                        let vr = vv.row(r);
                        for (i, vi) in vr.iter().enumerate() {
                            let dst = &mut gm[(r * n + i) * e..(r * n + i + 1) * e];
                            dst.iter_mut().zip(gr).for_each(|(d, s)| *d += vi * s);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
