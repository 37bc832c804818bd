use std::collections::HashMap;

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

use crate::conv::{col2im, im2col, Conv2dSpec, ConvTranspose2dSpec, Patch};
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::{cst, Real};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    SwapLast(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize, bool),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTranspose2dSpec,
    },
    MaxPoolLast(Var, usize),
    Embedding(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: ArrayD<T>,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation tape.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums a broadcast gradient back down to `shape`.
fn sum_to_shape<T: Real>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn standard<T: Real>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn reshape<T: Real>(a: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    standard(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("element count checked by caller")
}

fn zip_map<T: Real>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    f: impl Fn(T, T) -> T,
) -> Option<ArrayD<T>> {
    let sh = broadcast_shape(a.shape(), b.shape())?;
    let av = a.broadcast(IxDyn(&sh))?;
    let bv = b.broadcast(IxDyn(&sh))?;
    Some(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

fn zip_map_into<T: Real>(g: &ArrayD<T>, x: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    Zip::from(g).and(x).map_collect(|&a, &b| f(a, b))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on shape {:?}", val.shape());
        *val.iter().next().expect("one element")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Leaf whose gradient is reported by [`Gradients::var`].
    pub fn variable(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the
    /// same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    /// Copies a node's value into a fresh constant, cutting the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.value(v).clone();
        self.constant(val)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let out = zip_map(self.value(a), self.value(b), f)
            .ok_or_else(|| shape_err(name, self.shape(a), self.shape(b)))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let out = self.value(x).mapv(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kk: T = cst(k);
        self.unary(x, move |v| v * kk, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let kk: T = cst(k);
        self.unary(x, move |v| v + kk, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // Written so NaN passes through; `max` would swallow it.
        self.unary(x, |v| if v < T::zero() { T::zero() } else { v }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s: T = cst(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h): (T, T) = (cst(lo), cst(hi));
        self.unary(x, move |v| if v < l { l } else if v > h { h } else { v }, Op::Clamp(x, lo, hi))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let out = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product `[n, m, k] x [n, k, p]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let out = bmm(self.value(a), self.value(b), false, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(invalid("swap_last", "needs rank >= 2"));
        }
        let mut v = self.value(x).clone();
        v.swap_axes(nd - 2, nd - 1);
        let out = standard(v);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SwapLast(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.value(x).ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid("permute", format!("bad axes {axes:?} for rank {nd}")));
        }
        let out = standard(self.value(x).clone().permuted_axes(IxDyn(axes)));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = reshape(self.value(x).clone(), shape);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .broadcast(IxDyn(shape))
            .ok_or_else(|| shape_err("broadcast_to", self.shape(x), shape))?
            .to_owned();
        let rg = self.rg(x);
        Ok(self.push(out, Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let views: Vec<ArrayViewD<T>> = xs.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| {
            shape_err("concat", self.shape(xs[0]), self.shape(xs[xs.len() - 1]))
        })?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(standard(out), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x);
        if axis >= sh.len() || start + len > sh[axis] || len == 0 {
            return Err(invalid(
                "narrow",
                format!("axis {axis} range {start}+{len} of {sh:?}"),
            ));
        }
        let out = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(x);
        Ok(self.push(standard(out), Op::Narrow(x, axis, start), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / cst::<T>(v.len() as f64);
        let rg = self.rg(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(x), rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        if axis >= self.value(x).ndim() {
            return Err(invalid("sum_axis", format!("axis {axis}")));
        }
        let mut out = self.value(x).sum_axis(Axis(axis));
        if keepdim {
            out = out.insert_axis(Axis(axis));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis(x, axis, keepdim), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd == 0 {
            return Err(invalid("softmax", "rank 0"));
        }
        let mut out = self.value(x).clone();
        for mut lane in out.lanes_mut(Axis(nd - 1)) {
            let m = lane.fold(T::neg_infinity(), |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// 2-D convolution. `x: [n, c, h, w]`, `w: [co, c, kh, kw]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", self.shape(b), &ws[..1]));
            }
        }
        let (oh, ow) = spec
            .output_hw(xs[2], xs[3], ws[2], ws[3])
            .ok_or_else(|| shape_err("conv2d geometry", &xs, &ws))?;
        let p = Patch {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            spec,
        };
        let wmat = reshape(self.value(w).clone(), &[ws[0], p.rows()]);
        let wmat = as2(&wmat);
        let xv = standard(self.value(x).clone());
        let xsl = xv.as_slice().expect("standard layout");
        let per = p.c * p.h * p.w;
        let mut out = ArrayD::zeros(IxDyn(&[xs[0], ws[0], oh, ow]));
        let mut cols = Array2::zeros((p.rows(), p.cols()));
        for n in 0..xs[0] {
            im2col(&xsl[n * per..(n + 1) * per], &p, &mut cols.view_mut());
            let y = wmat.dot(&cols);
            let mut dst = out.index_axis_mut(Axis(0), n);
            let dst = dst.as_slice_mut().expect("contiguous");
            dst.copy_from_slice(y.as_slice().expect("contiguous"));
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for mut plane in out.axis_iter_mut(Axis(0)) {
                for (co, mut ch) in plane.axis_iter_mut(Axis(0)).enumerate() {
                    let bb = bv[co];
                    ch.mapv_inplace(|v| v + bb);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Transposed convolution. `x: [n, ci, h, w]`, `w: [ci, co, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTranspose2dSpec,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(shape_err("conv_transpose2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err("conv_transpose2d bias", self.shape(b), &ws[1..2]));
            }
        }
        let (oh, ow) = spec
            .output_hw(xs[2], xs[3], ws[2], ws[3])
            .ok_or_else(|| shape_err("conv_transpose2d geometry", &xs, &ws))?;
        let p = transpose_patch(&ws, oh, ow, xs[2], xs[3], spec);
        let wmat = reshape(self.value(w).clone(), &[ws[0], p.rows()]);
        let wt = as2(&wmat).reversed_axes();
        let xv = standard(self.value(x).clone());
        let mut out = ArrayD::zeros(IxDyn(&[xs[0], ws[1], oh, ow]));
        for n in 0..xs[0] {
            let xn = as2_owned(&xv.index_axis(Axis(0), n).to_owned(), xs[1], xs[2] * xs[3]);
            let cols = wt.dot(&xn);
            let mut dst = out.index_axis_mut(Axis(0), n);
            col2im(
                &cols.view(),
                &p,
                dst.as_slice_mut().expect("contiguous"),
            );
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for mut plane in out.axis_iter_mut(Axis(0)) {
                for (co, mut ch) in plane.axis_iter_mut(Axis(0)).enumerate() {
                    let bb = bv[co];
                    ch.mapv_inplace(|v| v + bb);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    /// Sliding max over the last axis with stride 1; windows are truncated
    /// at the end so the length is preserved.
    pub fn max_pool_last(&mut self, x: Var, window: usize) -> Result<Var> {
        if window == 0 || self.value(x).ndim() == 0 {
            return Err(invalid("max_pool_last", "window and rank must be positive"));
        }
        let nd = self.value(x).ndim();
        let mut out = self.value(x).clone();
        for (mut o, i) in out
            .lanes_mut(Axis(nd - 1))
            .into_iter()
            .zip(self.value(x).lanes(Axis(nd - 1)))
        {
            let t = i.len();
            for s in 0..t {
                let mut m = i[s];
                for j in s + 1..(s + window).min(t) {
                    if !(m.is_nan() || i[j] <= m) {
                        m = i[j];
                    }
                }
                o[s] = m;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPoolLast(x, window), rg))
    }

    /// Row lookup: `weight: [v, d]` gathered by `ids` into `[ids.len(), d]`.
    pub fn embedding(&mut self, weight: Var, ids: &[usize]) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(invalid("embedding", "weight must be rank 2"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ws[0]) {
            return Err(invalid(
                "embedding",
                format!("id {bad} out of range for vocabulary {}", ws[0]),
            ));
        }
        let wv = self.value(weight);
        let mut out = ArrayD::zeros(IxDyn(&[ids.len(), ws[1]]));
        for (r, &id) in ids.iter().enumerate() {
            out.index_axis_mut(Axis(0), r)
                .assign(&wv.index_axis(Axis(0), id));
        }
        let rg = self.rg(weight);
        Ok(self.push(out, Op::Embedding(weight, ids.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(ArrayD::from_elem(lv.raw_dim(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.rg(v) {
            return;
        }
        let g = if g.shape() == self.shape(v) {
            g
        } else {
            sum_to_shape(g, self.shape(v))
        };
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.acc(grads, *b, g.mapv(|v| -v));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y).expect("forward shapes");
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y).expect("forward shapes");
                    self.acc(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let ga = zip_map(&g, self.value(*b), |x, y| x / y).expect("forward shapes");
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = zip_map(&g, y, |x, q| -x * q).expect("same shape");
                    let gb = zip_map(&t, self.value(*b), |x, d| x / d).expect("forward shapes");
                    self.acc(grads, *b, gb);
                }
            }
            Op::Neg(x) => self.acc(grads, *x, g.mapv(|v| -v)),
            Op::Scale(x, k) => {
                let k: T = cst(*k);
                self.acc(grads, *x, g.mapv(|v| v * k));
            }
            Op::AddScalar(x) => self.acc(grads, *x, g),
            Op::Exp(x) => self.acc(grads, *x, zip_map_into(&g, y, |a, e| a * e)),
            Op::Ln(x) => self.acc(grads, *x, zip_map_into(&g, self.value(*x), |a, v| a / v)),
            Op::Tanh(x) => self.acc(
                grads,
                *x,
                zip_map_into(&g, y, |a, t| a * (T::one() - t * t)),
            ),
            Op::Sigmoid(x) => self.acc(
                grads,
                *x,
                zip_map_into(&g, y, |a, s| a * s * (T::one() - s)),
            ),
            Op::Relu(x) => self.acc(
                grads,
                *x,
                zip_map_into(&g, self.value(*x), |a, v| if v > T::zero() { a } else { T::zero() }),
            ),
            Op::LeakyRelu(x, s) => {
                let s: T = cst(*s);
                self.acc(
                    grads,
                    *x,
                    zip_map_into(&g, self.value(*x), |a, v| if v > T::zero() { a } else { a * s }),
                )
            }
            Op::Abs(x) => self.acc(
                grads,
                *x,
                zip_map_into(&g, self.value(*x), |a, v| {
                    if v > T::zero() {
                        a
                    } else if v < T::zero() {
                        -a
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(x) => {
                let two: T = cst(2.0);
                self.acc(grads, *x, zip_map_into(&g, self.value(*x), |a, v| a * two * v))
            }
            Op::Sqrt(x) => {
                let half: T = cst(0.5);
                self.acc(grads, *x, zip_map_into(&g, y, |a, r| a * half / r))
            }
            Op::Softplus(x) => {
                self.acc(grads, *x, zip_map_into(&g, self.value(*x), |a, v| a * sigmoid(v)))
            }
            Op::Clamp(x, lo, hi) => {
                let (l, h): (T, T) = (cst(*lo), cst(*hi));
                self.acc(
                    grads,
                    *x,
                    zip_map_into(&g, self.value(*x), |a, v| {
                        if v >= l && v <= h {
                            a
                        } else {
                            T::zero()
                        }
                    }),
                )
            }
            Op::MatMul(a, b) => {
                let g2 = as2(&g);
                if self.rg(*a) {
                    let ga = g2.dot(&as2(self.value(*b)).t()).into_dyn();
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = as2(self.value(*a)).t().dot(&g2).into_dyn();
                    self.acc(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                if self.rg(*a) {
                    let ga = bmm(&g, self.value(*b), false, true);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = bmm(self.value(*a), &g, true, false);
                    self.acc(grads, *b, gb);
                }
            }
            Op::SwapLast(x) => {
                let mut t = g;
                let nd = t.ndim();
                t.swap_axes(nd - 2, nd - 1);
                self.acc(grads, *x, standard(t));
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.acc(grads, *x, standard(g.permuted_axes(IxDyn(&inv))));
            }
            Op::Reshape(x) => {
                let sh = self.shape(*x).to_vec();
                self.acc(grads, *x, reshape(g, &sh));
            }
            Op::BroadcastTo(x) => self.acc(grads, *x, g),
            Op::Concat(xs, axis) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if self.rg(x) {
                        let part = g
                            .slice_axis(Axis(*axis), Slice::from(off..off + n))
                            .to_owned();
                        self.acc(grads, x, standard(part));
                    }
                    off += n;
                }
            }
            Op::Narrow(x, axis, start) => {
                let mut full = ArrayD::zeros(self.value(*x).raw_dim());
                let n = g.shape()[*axis];
                full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + n))
                    .assign(&g);
                self.acc(grads, *x, full);
            }
            Op::SumAll(x) => {
                let s = *g.iter().next().expect("scalar");
                self.acc(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let s = *g.iter().next().expect("scalar") / cst::<T>(n as f64);
                self.acc(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::SumAxis(x, axis, keepdim) => {
                let g = if *keepdim { g } else { g.insert_axis(Axis(*axis)) };
                let full = g
                    .broadcast(self.value(*x).raw_dim())
                    .expect("reduced axis broadcasts")
                    .to_owned();
                self.acc(grads, *x, full);
            }
            Op::Softmax(x) => {
                let nd = y.ndim();
                let mut out = zip_map_into(&g, y, |a, s| a * s);
                for (mut o, s) in out.lanes_mut(Axis(nd - 1)).into_iter().zip(y.lanes(Axis(nd - 1))) {
                    let dot = o.sum();
                    Zip::from(&mut o).and(&s).for_each(|v, &sv| *v -= sv * dot);
                }
                self.acc(grads, *x, out);
            }
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, *spec, &g, grads),
            Op::ConvTranspose2d { x, w, b, spec } => {
                self.conv_t_backward(*x, *w, *b, *spec, &g, grads)
            }
            Op::MaxPoolLast(x, window) => {
                let xv = self.value(*x);
                let nd = xv.ndim();
                let mut gx = ArrayD::zeros(xv.raw_dim());
                for ((mut o, i), gl) in gx
                    .lanes_mut(Axis(nd - 1))
                    .into_iter()
                    .zip(xv.lanes(Axis(nd - 1)))
                    .zip(g.lanes(Axis(nd - 1)))
                {
                    let t = i.len();
                    for s in 0..t {
                        let mut arg = s;
                        for j in s + 1..(s + window).min(t) {
                            if i[j] > i[arg] {
                                arg = j;
                            }
                        }
                        o[arg] += gl[s];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Embedding(wt, ids) => {
                let mut gw = ArrayD::zeros(self.value(*wt).raw_dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = gw.index_axis_mut(Axis(0), id);
                    row += &g.index_axis(Axis(0), r);
                }
                self.acc(grads, *wt, gw);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let p = Patch {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            spec,
        };
        let per = p.c * p.h * p.w;
        let g = standard(g.clone());
        let wmat = reshape(self.value(w).clone(), &[ws[0], p.rows()]);
        let wmat = as2(&wmat);
        let xv = standard(self.value(x).clone());
        let xsl = xv.as_slice().expect("standard layout");
        let mut gw = Array2::<T>::zeros((ws[0], p.rows()));
        let mut gx = ArrayD::<T>::zeros(IxDyn(&xs));
        let mut cols = Array2::zeros((p.rows(), p.cols()));
        for n in 0..xs[0] {
            let gn = as2_owned(&g.index_axis(Axis(0), n).to_owned(), ws[0], oh * ow);
            if self.rg(w) {
                im2col(&xsl[n * per..(n + 1) * per], &p, &mut cols.view_mut());
                gw += &gn.dot(&cols.t());
            }
            if self.rg(x) {
                let dcols = wmat.t().dot(&gn);
                let gxs = gx.as_slice_mut().expect("contiguous");
                col2im(&dcols.view(), &p, &mut gxs[n * per..(n + 1) * per]);
            }
        }
        if self.rg(w) {
            self.acc(grads, w, reshape(gw.into_dyn(), &ws));
        }
        if self.rg(x) {
            self.acc(grads, x, gx);
        }
        if let Some(b) = b {
            if self.rg(b) {
                let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                self.acc(grads, b, gb);
            }
        }
    }

    fn conv_t_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTranspose2dSpec,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let p = transpose_patch(&ws, oh, ow, xs[2], xs[3], spec);
        let g = standard(g.clone());
        let gsl = g.as_slice().expect("standard layout");
        let per = ws[1] * oh * ow;
        let wmat = reshape(self.value(w).clone(), &[ws[0], p.rows()]);
        let wmat = as2(&wmat);
        let xv = standard(self.value(x).clone());
        let mut gw = Array2::<T>::zeros((ws[0], p.rows()));
        let mut gx = ArrayD::<T>::zeros(IxDyn(&xs));
        let mut cols = Array2::zeros((p.rows(), p.cols()));
        for n in 0..xs[0] {
            im2col(&gsl[n * per..(n + 1) * per], &p, &mut cols.view_mut());
            if self.rg(w) {
                let xn = as2_owned(&xv.index_axis(Axis(0), n).to_owned(), xs[1], xs[2] * xs[3]);
                gw += &xn.dot(&cols.t());
            }
            if self.rg(x) {
                let dx = wmat.dot(&cols);
                gx.index_axis_mut(Axis(0), n)
                    .assign(&reshape(dx.into_dyn(), &xs[1..]));
            }
        }
        if self.rg(w) {
            self.acc(grads, w, reshape(gw.into_dyn(), &ws));
        }
        if self.rg(x) {
            self.acc(grads, x, gx);
        }
        if let Some(b) = b {
            if self.rg(b) {
                let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                self.acc(grads, b, gb);
            }
        }
    }
}

/// Patch geometry of the forward convolution adjoint to a transposed one:
/// it maps the `(oh, ow)` output back to the `(h, w)` input.
fn transpose_patch(
    ws: &[usize],
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    spec: ConvTranspose2dSpec,
) -> Patch {
    Patch {
        c: ws[1],
        h: oh,
        w: ow,
        kh: ws[2],
        kw: ws[3],
        oh: h,
        ow: w,
        spec: spec.as_conv(),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn as2<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

fn as2_owned<T: Real>(a: &ArrayD<T>, r: usize, c: usize) -> Array2<T> {
    standard(a.clone())
        .into_shape_with_order((r, c))
        .expect("element count")
}

fn bmm<T: Real>(a: &ArrayD<T>, b: &ArrayD<T>, ta: bool, tb: bool) -> ArrayD<T> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("rank 3");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("rank 3");
    let mats: Vec<Array2<T>> = a3
        .outer_iter()
        .zip(b3.outer_iter())
        .map(|(x, y)| {
            let x = if ta { x.reversed_axes() } else { x };
            let y = if tb { y.reversed_axes() } else { y };
            x.dot(&y)
        })
        .collect();
    let views: Vec<_> = mats.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("uniform shapes")
        .into_dyn()
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a bound parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.bound
            .get(&id)
            .and_then(|v| self.grads.get(v.0))
            .and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf created with [`Graph::variable`] (or a parameter).
    pub fn var(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameters that received a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, &ArrayD<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, v)| self.grads.get(v.0)?.as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = ArrayD::<f64>::ones(IxDyn(&[2, 3, 4]));
        let r = sum_to_shape(g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn stable_scalars() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
