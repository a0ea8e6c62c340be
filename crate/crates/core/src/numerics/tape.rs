//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order. Because inputs always precede outputs, walking the node list
//! backwards from the root is a valid reverse topological order and each
//! node is visited once. Tapes are cheap and meant to be rebuilt for every
//! forward pass.

use std::cell::RefCell;

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softplus(usize),
    ClampMax(usize, T),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    L2Norm(usize),
    NormalizeRows(usize, T),
    SqDist(usize, usize),
    Pick(usize, usize),
    Im2Col(usize, ConvGeometry),
    LstmCell(LstmInputs, Vec<T>),
}

/// Geometry of a 3×3 convolution lowered to a matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const KERNEL: usize = 3;

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - Self::KERNEL) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - Self::KERNEL) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.channels
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmInputs {
    x: usize,
    h: usize,
    c: usize,
    w: usize,
    b: usize,
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients can be read back for any leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward root belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![T::one()]);
        let mut visited = 0;

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        Ok(Gradients {
            shapes: nodes[..=root.id].iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            visited,
        })
    }
}

/// Gradients of a scalar root with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(self.shapes[var.id].clone(), g.clone()),
            None => {
                let shape = self
                    .shapes
                    .get(var.id)
                    .cloned()
                    .unwrap_or_else(|| var.value().shape().to_vec());
                Tensor::zeros(&shape)
            }
        }
    }

    /// Number of nodes that received a gradient during the sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    contribution: impl Iterator<Item = T>,
) {
    let target = slot(grads, id, nodes[id].value.len());
    for (t, c) in target.iter_mut().zip(contribution) {
        *t += c;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| nodes[id].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            matmul_bt_into(g, val(b), slot(grads, a, n * k), n, m, k);
            matmul_at_into(val(a), g, slot(grads, b, k * m), n, k, m);
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, g.iter().copied());
            acc(nodes, grads, b, g.iter().copied());
        }
        &Op::AddRow(a, b) => {
            acc(nodes, grads, a, g.iter().copied());
            let m = nodes[b].value.len();
            let gb = slot(grads, b, m);
            for row in g.chunks(m) {
                for (t, &x) in gb.iter_mut().zip(row) {
                    *t += x;
                }
            }
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, g.iter().copied());
            acc(nodes, grads, b, g.iter().map(|&x| -x));
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            acc(nodes, grads, a, g.iter().zip(vb).map(|(&g, &v)| g * v));
            acc(nodes, grads, b, g.iter().zip(va).map(|(&g, &v)| g * v));
        }
        &Op::Affine(a, mul) => acc(nodes, grads, a, g.iter().map(|&x| x * mul)),
        &Op::Tanh(a) => acc(nodes, grads, a, g.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t))),
        &Op::Sigmoid(a) => acc(nodes, grads, a, g.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s))),
        &Op::Relu(a) => acc(
            nodes,
            grads,
            a,
            g.iter()
                .zip(val(a))
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }),
        ),
        &Op::Exp(a) => acc(nodes, grads, a, g.iter().zip(y).map(|(&g, &e)| g * e)),
        &Op::Log(a) => acc(nodes, grads, a, g.iter().zip(val(a)).map(|(&g, &x)| g / x)),
        &Op::Square(a) => {
            let two = T::of(2.0);
            acc(nodes, grads, a, g.iter().zip(val(a)).map(|(&g, &x)| two * g * x))
        }
        &Op::Softplus(a) => acc(nodes, grads, a, g.iter().zip(val(a)).map(|(&g, &x)| g * sigmoid(x))),
        &Op::ClampMax(a, c) => acc(
            nodes,
            grads,
            a,
            g.iter()
                .zip(val(a))
                .map(|(&g, &x)| if x <= c { g } else { T::zero() }),
        ),
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                let gp = slot(grads, p, rows * w);
                for r in 0..rows {
                    for j in 0..w {
                        gp[r * w + j] += g[r * total + offset + j];
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc(nodes, grads, p, g[offset..offset + n].iter().copied());
                offset += n;
            }
        }
        &Op::SliceCols(a, start) => {
            let rows = node.value.rows();
            let w = node.value.cols();
            let src = &nodes[a].value;
            let total = src.cols();
            let ga = slot(grads, a, src.len());
            for r in 0..rows {
                for j in 0..w {
                    ga[r * total + start + j] += g[r * w + j];
                }
            }
        }
        &Op::SoftmaxRows(a) => {
            let m = node.value.cols();
            let mut out = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(m).zip(y.chunks(m)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                out.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
            }
            acc(nodes, grads, a, out.into_iter());
        }
        &Op::LogSoftmaxRows(a) => {
            let m = node.value.cols();
            let mut out = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(m).zip(y.chunks(m)) {
                let total: T = gr.iter().copied().sum();
                out.extend(gr.iter().zip(yr).map(|(&g, &ly)| g - ly.exp() * total));
            }
            acc(nodes, grads, a, out.into_iter());
        }
        &Op::Sum(a) => {
            let n = nodes[a].value.len();
            acc(nodes, grads, a, std::iter::repeat_n(g[0], n));
        }
        &Op::Mean(a) => {
            let n = nodes[a].value.len();
            let share = g[0] / T::of(n as f64);
            acc(nodes, grads, a, std::iter::repeat_n(share, n));
        }
        &Op::MeanRows(a) => {
            let src = &nodes[a].value;
            let (n, m) = (src.rows(), src.cols());
            let inv = T::one() / T::of(n as f64);
            let ga = slot(grads, a, n * m);
            for r in 0..n {
                for j in 0..m {
                    ga[r * m + j] += g[j] * inv;
                }
            }
        }
        &Op::L2Norm(a) => {
            let norm = y[0];
            acc(nodes, grads, a, val(a).iter().map(|&x| g[0] * x / norm));
        }
        &Op::NormalizeRows(a, eps) => {
            let m = node.value.cols();
            let mut out = Vec::with_capacity(g.len());
            for ((gr, yr), xr) in g.chunks(m).zip(y.chunks(m)).zip(val(a).chunks(m)) {
                let norm = (xr.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                out.extend(gr.iter().zip(yr).map(|(&g, &y)| (g - y * dot) / norm));
            }
            acc(nodes, grads, a, out.into_iter());
        }
        &Op::SqDist(a, b) => {
            let two = T::of(2.0) * g[0];
            let diff: Vec<T> = val(a).iter().zip(val(b)).map(|(&x, &y)| two * (x - y)).collect();
            acc(nodes, grads, a, diff.iter().copied());
            acc(nodes, grads, b, diff.iter().map(|&d| -d));
        }
        &Op::Pick(a, index) => {
            let n = nodes[a].value.len();
            slot(grads, a, n)[index] += g[0];
        }
        &Op::Im2Col(a, geo) => {
            let (oh, ow, c) = (geo.out_height(), geo.out_width(), geo.channels);
            let patch = geo.patch_len();
            let ga = slot(grads, a, geo.height * geo.width * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oy * ow + ox) * patch;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some(src) = geo.source(oy, ox, ky, kx) {
                                let col = row + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    ga[src * c + ch] += g[col + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::LstmCell(inp, cache) => lstm_backward(nodes, *inp, cache, g, grads),
    }
}

fn lstm_backward<T: Scalar>(
    nodes: &[Node<T>],
    inp: LstmInputs,
    cache: &[T],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let x = nodes[inp.x].value.data();
    let h = nodes[inp.h].value.data();
    let c = nodes[inp.c].value.data();
    let w = nodes[inp.w].value.data();
    let n = nodes[inp.x].value.rows();
    let ni = nodes[inp.x].value.cols();
    let nh = nodes[inp.h].value.cols();
    let one = T::one();

    // cache rows: [i f g o tanh(c')] activated, 5H wide
    let mut dz = vec![T::zero(); n * 4 * nh];
    let mut dc_prev = vec![T::zero(); n * nh];
    for r in 0..n {
        let cr = &cache[r * 5 * nh..(r + 1) * 5 * nh];
        let (gi, gf, gg, go, tc) = (
            &cr[..nh],
            &cr[nh..2 * nh],
            &cr[2 * nh..3 * nh],
            &cr[3 * nh..4 * nh],
            &cr[4 * nh..],
        );
        let gh_out = &g[r * 2 * nh..r * 2 * nh + nh];
        let gc_out = &g[r * 2 * nh + nh..(r + 1) * 2 * nh];
        let dzr = &mut dz[r * 4 * nh..(r + 1) * 4 * nh];
        for j in 0..nh {
            let d_o = gh_out[j] * tc[j];
            let dc = gc_out[j] + gh_out[j] * go[j] * (one - tc[j] * tc[j]);
            let di = dc * gg[j];
            let dg = dc * gi[j];
            let df = dc * c[r * nh + j];
            dc_prev[r * nh + j] = dc * gf[j];
            dzr[j] = di * gi[j] * (one - gi[j]);
            dzr[nh + j] = df * gf[j] * (one - gf[j]);
            dzr[2 * nh + j] = dg * (one - gg[j] * gg[j]);
            dzr[3 * nh + j] = d_o * go[j] * (one - go[j]);
        }
    }

    let k = ni + nh;
    let mut xh = Vec::with_capacity(n * k);
    for r in 0..n {
        xh.extend_from_slice(&x[r * ni..(r + 1) * ni]);
        xh.extend_from_slice(&h[r * nh..(r + 1) * nh]);
    }
    matmul_at_into(&xh, &dz, slot(grads, inp.w, k * 4 * nh), n, k, 4 * nh);
    {
        let gb = slot(grads, inp.b, 4 * nh);
        for row in dz.chunks(4 * nh) {
            for (t, &v) in gb.iter_mut().zip(row) {
                *t += v;
            }
        }
    }
    let mut dxh = vec![T::zero(); n * k];
    matmul_bt_into(&dz, w, &mut dxh, n, 4 * nh, k);
    {
        let gx = slot(grads, inp.x, n * ni);
        for r in 0..n {
            for j in 0..ni {
                gx[r * ni + j] += dxh[r * k + j];
            }
        }
    }
    {
        let gh = slot(grads, inp.h, n * nh);
        for r in 0..n {
            for j in 0..nh {
                gh[r * nh + j] += dxh[r * k + ni + j];
            }
        }
    }
    acc(nodes, grads, inp.c, dc_prev.into_iter());
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $op:ident, $f:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Var<'t, T> {
            let v = self.value();
            let f = $f;
            self.tape.push(Op::$op(self.id), v.map(f))
        }
    };
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("vars from different tapes"))
        }
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.tape.push(op, v))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(Op::MatMul(self.id, other.id), v))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias)?;
        let (a, b) = (self.value(), bias.value());
        if !a.is_matrix() || b.len() != a.cols() {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let m = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i % m])
            .collect();
        Ok(self.tape.push(Op::AddRow(self.id, bias.id), Tensor::from_parts(a.shape().to_vec(), data)))
    }

    /// `mul · x + add`.
    pub fn affine(self, mul: T, add: T) -> Var<'t, T> {
        let v = self.value().map(|x| mul * x + add);
        self.tape.push(Op::Affine(self.id, mul), v)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.affine(c, T::zero())
    }

    unary!(tanh, Tanh, |x: T| x.tanh());
    unary!(sigmoid, Sigmoid, sigmoid::<T>);
    unary!(relu, Relu, |x: T| x.max(T::zero()));
    unary!(exp, Exp, |x: T| x.exp());
    unary!(
        /// Natural log; inputs must be positive.
        log,
        Log,
        |x: T| x.ln()
    );
    unary!(square, Square, |x: T| x * x);
    unary!(
        /// `ln(1 + eˣ)`, evaluated stably.
        softplus,
        Softplus,
        softplus::<T>
    );

    /// Elementwise `min(x, max)`; gradient is zero where clamped.
    pub fn clamp_max(self, max: T) -> Var<'t, T> {
        let v = self.value().map(|x| x.min(max));
        self.tape.push(Op::ClampMax(self.id, max), v)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if !v.is_matrix() || v.rows() != rows {
                return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        Ok(first.tape.push(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            Tensor::from_parts(vec![rows, total], data),
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let cols = first.value().cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            if !v.is_matrix() || v.cols() != cols {
                return Err(Error::dim("concat_rows", first.value().shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(first.tape.push(
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            Tensor::from_parts(vec![rows, cols], data),
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        if !v.is_matrix() || start >= end || end > v.cols() {
            return Err(Error::dim("slice_cols", v.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(r)[start..end]);
        }
        Ok(self.tape.push(
            Op::SliceCols(self.id, start),
            Tensor::from_parts(vec![v.rows(), end - start], data),
        ))
    }

    pub fn softmax_rows(self) -> Var<'t, T> {
        let v = self.value();
        let m = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(m) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        self.tape.push(Op::SoftmaxRows(self.id), Tensor::from_parts(v.shape().to_vec(), data))
    }

    pub fn log_softmax_rows(self) -> Var<'t, T> {
        let v = self.value();
        let m = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(m) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        self.tape.push(Op::LogSoftmaxRows(self.id), Tensor::from_parts(v.shape().to_vec(), data))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let m = v.sum() / T::of(v.len() as f64);
        self.tape.push(Op::Mean(self.id), Tensor::scalar(m))
    }

    /// Column means of a matrix, as a `1 × m` row.
    pub fn mean_rows(self) -> Var<'t, T> {
        let v = self.value();
        let (n, m) = (v.rows(), v.cols());
        let mut data = vec![T::zero(); m];
        for row in v.data().chunks(m) {
            for (d, &x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        let inv = T::one() / T::of(n as f64);
        data.iter_mut().for_each(|d| *d *= inv);
        self.tape.push(Op::MeanRows(self.id), Tensor::from_parts(vec![1, m], data))
    }

    /// `sqrt(Σx² + eps)`; `eps > 0` keeps the gradient defined at the origin.
    pub fn l2_norm(self, eps: T) -> Var<'t, T> {
        let v = self.value();
        let n = (v.data().iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
        self.tape.push(Op::L2Norm(self.id), Tensor::scalar(n))
    }

    /// Scales each row to unit L2 norm (`eps` guards the zero row).
    pub fn normalize_rows(self, eps: T) -> Var<'t, T> {
        let v = self.value();
        let m = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(m) {
            let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            data.extend(row.iter().map(|&x| x / n));
        }
        self.tape.push(Op::NormalizeRows(self.id, eps), Tensor::from_parts(v.shape().to_vec(), data))
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn sq_dist(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim("sq_dist", a.shape(), b.shape()));
        }
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.tape.push(Op::SqDist(self.id, other.id), Tensor::scalar(d)))
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(self, index: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        if index >= v.len() {
            return Err(Error::dim("pick", v.shape(), &[index]));
        }
        Ok(self.tape.push(Op::Pick(self.id, index), Tensor::scalar(v.data()[index])))
    }

    /// Lowers an `[H·W, C]` feature map to `[Ho·Wo, 9·C]` 3×3 patches.
    pub fn im2col(self, geo: ConvGeometry) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.shape() != [geo.height * geo.width, geo.channels] {
            return Err(Error::dim(
                "im2col",
                v.shape(),
                &[geo.height * geo.width, geo.channels],
            ));
        }
        let (oh, ow, c) = (geo.out_height(), geo.out_width(), geo.channels);
        let patch = geo.patch_len();
        let src = v.data();
        let mut data = vec![T::zero(); oh * ow * patch];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * patch;
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(s) = geo.source(oy, ox, ky, kx) {
                            let col = row + (ky * 3 + kx) * c;
                            data[col..col + c].copy_from_slice(&src[s * c..(s + 1) * c]);
                        }
                    }
                }
            }
        }
        Ok(self
            .tape
            .push(Op::Im2Col(self.id, geo), Tensor::from_parts(vec![oh * ow, patch], data)))
    }

    /// Fused LSTM step. `self` is the input `[n, I]`; `w` is `[(I+H), 4H]`
    /// with gate blocks ordered input, forget, cell, output. Returns
    /// `[n, 2H]` holding the new hidden state followed by the new cell state.
    pub fn lstm_cell(
        self,
        h: Var<'t, T>,
        c: Var<'t, T>,
        w: Var<'t, T>,
        b: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        for v in [&h, &c, &w, &b] {
            self.same_tape(v)?;
        }
        let (xv, hv, cv, wv, bv) = (self.value(), h.value(), c.value(), w.value(), b.value());
        let n = xv.rows();
        let (ni, nh) = (xv.cols(), hv.cols());
        if hv.rows() != n || cv.shape() != hv.shape() {
            return Err(Error::dim("lstm_cell", hv.shape(), cv.shape()));
        }
        if wv.shape() != [ni + nh, 4 * nh] {
            return Err(Error::dim("lstm_cell", wv.shape(), &[ni + nh, 4 * nh]));
        }
        if bv.len() != 4 * nh {
            return Err(Error::dim("lstm_cell", bv.shape(), &[1, 4 * nh]));
        }
        let k = ni + nh;
        let mut xh = Vec::with_capacity(n * k);
        for r in 0..n {
            xh.extend_from_slice(xv.row_slice(r));
            xh.extend_from_slice(hv.row_slice(r));
        }
        let mut z = vec![T::zero(); n * 4 * nh];
        for row in z.chunks_mut(4 * nh) {
            row.copy_from_slice(bv.data());
        }
        matmul_into(&xh, wv.data(), &mut z, n, k, 4 * nh);

        let mut cache = vec![T::zero(); n * 5 * nh];
        let mut out = vec![T::zero(); n * 2 * nh];
        for r in 0..n {
            let zr = &z[r * 4 * nh..(r + 1) * 4 * nh];
            let cr = &mut cache[r * 5 * nh..(r + 1) * 5 * nh];
            for j in 0..nh {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[nh + j]);
                let g = zr[2 * nh + j].tanh();
                let o = sigmoid(zr[3 * nh + j]);
                let c_new = f * cv.data()[r * nh + j] + i * g;
                let tc = c_new.tanh();
                cr[j] = i;
                cr[nh + j] = f;
                cr[2 * nh + j] = g;
                cr[3 * nh + j] = o;
                cr[4 * nh + j] = tc;
                out[r * 2 * nh + j] = o * tc;
                out[r * 2 * nh + nh + j] = c_new;
            }
        }
        let inputs = LstmInputs {
            x: self.id,
            h: h.id,
            c: c.id,
            w: w.id,
            b: b.id,
        };
        Ok(self
            .tape
            .push(Op::LstmCell(inputs, cache), Tensor::from_parts(vec![n, 2 * nh], out)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 0.0, 5.5, -1.0]).unwrap());
        let root = x.sum();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn squared_distance_gradient_is_twice_difference() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row(vec![1.0, -2.0, 0.5]));
        let c = tape.leaf(Tensor::row(vec![0.0, 1.0, 0.5]));
        let root = x.sq_dist(c).unwrap();
        assert_eq!(root.value().item(), 1.0 + 9.0);
        let g = tape.backward(root).unwrap().wrt(x);
        assert_eq!(g.to_vec(), vec![2.0, -6.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let y = x.tanh();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let y = tape.leaf(Tensor::row(vec![0.0; 3])).softmax_rows().value();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::row(vec![3.0]));
        let grads = tape.backward(x.square().sum()).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[1, 1]));
    }

    #[test]
    fn each_reachable_node_visited_once() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row(vec![0.3, -0.7]));
        let a = x.tanh();
        let b = x.sigmoid();
        let _dead = x.exp();
        let root = a.mul(b).unwrap().sum();
        let grads = tape.backward(root).unwrap();
        // x, a, b, mul, sum
        assert_eq!(grads.visited(), 5);
        assert_eq!(tape.len(), 6);
    }

    #[test]
    fn conv_geometry_output_size() {
        let geo = ConvGeometry {
            height: 64,
            width: 64,
            channels: 1,
            stride: 2,
            pad: 1,
        };
        assert_eq!(geo.out_height(), 32);
        assert_eq!(geo.out_width(), 32);
    }
}
