//! Operation recording and the reverse sweep.
//!
//! Every op appends one node to the [`Tape`] holding its forward value and
//! enough bookkeeping to route gradients back to its inputs. Node ids are
//! assigned in creation order, so inputs always precede their consumers and
//! a single reverse pass over the node list is a valid topological sweep.

use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;
use crate::Real;

/// Handle to a node recorded on a [`Tape`].
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
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, Real),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Mse(Var, Var),
    L2Normalize {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    GatherDot {
        x: Var,
        table: Var,
        indices: Vec<usize>,
        per_row: usize,
    },
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    /// Unfold one image into a `patch_len × out_pixels` column matrix.
    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let p = self.out_pixels();
        for ci in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * self.out_w + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                x[(ci * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns back into an image.
    fn col2im(&self, cols: &[Real], dx: &mut [Real]) {
        let p = self.out_pixels();
        for ci in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            dx[(ci * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// A tape is a single-threaded object. To differentiate batch shards in
/// parallel, give each shard its own tape and sum the resulting gradients.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for `vars` in order; leaves the loss does not reach get zeros.
    pub fn collect(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
            })
            .collect()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a differentiable input whose gradient [`backward`](Self::backward) reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    /// `x·Wᵀ + b` for `x` of shape `[in]` or `[batch, in]` and `W` of shape `[out, in]`.
    pub fn linear(&mut self, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        if ws.len() != 2 {
            return Err(shape_err("linear", &ws, &xs));
        }
        let (out, inp) = (ws[0], ws[1]);
        let (batch, out_shape) = match xs.as_slice() {
            [n] if *n == inp => (1, vec![out]),
            [bs, n] if *n == inp => (*bs, vec![*bs, out]),
            _ => return Err(shape_err("linear", &ws, &xs)),
        };
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [out] {
                return Err(shape_err("linear bias", bs, &[out]));
            }
        }
        let mut y = vec![0.0; batch * out];
        gemm(
            MatRef::new(self.value(x).data(), batch, inp),
            MatRef::new(self.value(w).data(), out, inp).t(),
            0.0,
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(out_shape, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D convolution of `x: [batch, in_ch, h, w]` with `k: [out_ch, in_ch, kh, kw]`
    /// and optional per-channel bias `b: [out_ch]`, zero padding on every side.
    pub fn conv2d(
        &mut self,
        k: Var,
        b: Option<Var>,
        x: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ks = self.value(k).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        if ks.len() != 4 || xs.len() != 4 || ks[1] != xs[1] {
            return Err(shape_err("conv2d", &ks, &xs));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (padded_h, padded_w) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if padded_h < ks[2] || padded_w < ks[3] {
            return Err(shape_err("conv2d", &ks, &xs));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            out_h: (padded_h - ks[2]) / stride + 1,
            out_w: (padded_w - ks[3]) / stride + 1,
        };
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [geom.out_ch] {
                return Err(shape_err("conv2d bias", bs, &[geom.out_ch]));
            }
        }
        let p = geom.out_pixels();
        let mut y = vec![0.0; geom.batch * geom.out_ch * p];
        let mut cols = vec![0.0; geom.patch_len() * p];
        {
            let xd = self.value(x).data();
            let kd = self.value(k).data();
            let bias = b.map(|b| self.value(b).data());
            for (n, out) in y.chunks_mut(geom.out_ch * p).enumerate() {
                geom.im2col(
                    &xd[n * geom.in_image()..(n + 1) * geom.in_image()],
                    &mut cols,
                );
                gemm(
                    MatRef::new(kd, geom.out_ch, geom.patch_len()),
                    MatRef::new(&cols, geom.patch_len(), p),
                    0.0,
                    out,
                );
                if let Some(bias) = bias {
                    for (o, chan) in out.chunks_mut(p).enumerate() {
                        for v in chan {
                            *v += bias[o];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], y)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn scalar_mul(&mut self, x: Var, c: Real) -> Var {
        self.unary(x, |a| a * c, Op::ScalarMul(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scalar_mul(x, -1.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = xv.data().iter().sum::<Real>() / xv.len() as Real;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Real::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Real::ln, Op::Log(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        if av.is_empty() {
            return Err(invalid("mse", "empty tensor"));
        }
        let sq: Real = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let value = Tensor::scalar(sq / av.len() as Real);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    ///
    /// A slice with zero norm is an error; slices are numbered in row-major
    /// order of the remaining axes.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(invalid(
                "l2_normalize",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut y = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len)
                    .map(|j| src[at(j)] * src[at(j)])
                    .sum::<Real>()
                    .sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(AutodiffError::ZeroNorm {
                        index: o * inner + i,
                    });
                }
                for j in 0..len {
                    y[at(j)] = src[at(j)] / norm;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), y)?;
        Ok(self.push(
            value,
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Log-softmax over the last axis, computed with max-logit subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv
            .shape()
            .last()
            .ok_or_else(|| invalid("log_softmax", "scalar input"))?;
        if k == 0 {
            return Err(invalid("log_softmax", "empty last axis"));
        }
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(k) {
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Selects `x[b, indices[b]]` from a `[batch, k]` tensor.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (batch, k) = match xv.shape() {
            [b, k] => (*b, *k),
            s => return Err(shape_err("pick", s, &[indices.len()])),
        };
        if batch != indices.len() {
            return Err(shape_err("pick", xv.shape(), &[indices.len()]));
        }
        let mut y = Vec::with_capacity(batch);
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= k {
                return Err(AutodiffError::IndexOutOfRange { index: idx, len: k });
            }
            y.push(xv.data()[row * k + idx]);
        }
        let value = Tensor::vector(y);
        Ok(self.push(
            value,
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Dot products of each row of `x: [batch, d]` with selected rows of
    /// `table: [n, d]`. `indices` holds `per_row` table rows for each batch row;
    /// the result has shape `[batch, per_row]`.
    pub fn gather_dot(
        &mut self,
        x: Var,
        table: Var,
        indices: &[usize],
        per_row: usize,
    ) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        let (batch, d) = match xv.shape() {
            [b, d] => (*b, *d),
            s => return Err(shape_err("gather_dot", s, tv.shape())),
        };
        let n = match tv.shape() {
            [n, td] if *td == d => *n,
            s => return Err(shape_err("gather_dot", xv.shape(), s)),
        };
        if indices.len() != batch * per_row {
            return Err(invalid(
                "gather_dot",
                format!(
                    "expected {} indices, got {}",
                    batch * per_row,
                    indices.len()
                ),
            ));
        }
        let mut y = Vec::with_capacity(batch * per_row);
        for (pos, &j) in indices.iter().enumerate() {
            if j >= n {
                return Err(AutodiffError::IndexOutOfRange { index: j, len: n });
            }
            let row = xv.row(pos / per_row.max(1));
            y.push(row.iter().zip(tv.row(j)).map(|(a, b)| a * b).sum());
        }
        let value = Tensor::new(vec![batch, per_row], y)?;
        Ok(self.push(
            value,
            Op::GatherDot {
                x,
                table,
                indices: indices.to_vec(),
                per_row,
            },
            &[x, table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Nearest-neighbor upsampling of `[batch, ch, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = match xv.shape() {
            [b, c, h, w] => [*b, *c, *h, *w],
            s => return Err(shape_err("upsample_nearest", s, &[0, 0, 0, 0])),
        };
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = xv.data();
        let mut y = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    y[(plane * oh + oy) * ow + ox] =
                        src[(plane * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], y)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients of shared subexpressions accumulate. Only leaves created
    /// with [`param`](Self::param) are reported.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<Real>>], v: Var) -> Option<&'g mut Vec<Real>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add_scaled(&self, grads: &mut [Option<Vec<Real>>], v: Var, g: &[Real], scale: Real) {
        if let Some(buf) = self.buf(grads, v) {
            for (d, &s) in buf.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }

    fn backprop(&self, op: &Op, y: &Tensor, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        match *op {
            Op::Leaf => unreachable!(),
            Op::Linear { x, w, b } => {
                let (out, inp) = {
                    let s = self.value(w).shape();
                    (s[0], s[1])
                };
                let batch = g.len() / out;
                let gm = MatRef::new(g, batch, out);
                if let Some(dx) = self.buf(grads, x) {
                    gemm(gm, MatRef::new(self.value(w).data(), out, inp), 1.0, dx);
                }
                if let Some(dw) = self.buf(grads, w) {
                    gemm(
                        gm.t(),
                        MatRef::new(self.value(x).data(), batch, inp),
                        1.0,
                        dw,
                    );
                }
                if let Some(db) = b.and_then(|b| self.buf(grads, b)) {
                    for row in g.chunks(out) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let p = geom.out_pixels();
                let per_out = geom.out_ch * p;
                let xd = self.value(x).data();
                let kd = self.value(k).data();
                let mut cols = vec![0.0; geom.patch_len() * p];
                if let Some(dk) = self.buf(grads, k) {
                    for n in 0..geom.batch {
                        geom.im2col(
                            &xd[n * geom.in_image()..(n + 1) * geom.in_image()],
                            &mut cols,
                        );
                        gemm(
                            MatRef::new(&g[n * per_out..(n + 1) * per_out], geom.out_ch, p),
                            MatRef::new(&cols, geom.patch_len(), p).t(),
                            1.0,
                            dk,
                        );
                    }
                }
                if let Some(dx) = self.buf(grads, x) {
                    for n in 0..geom.batch {
                        gemm(
                            MatRef::new(kd, geom.out_ch, geom.patch_len()).t(),
                            MatRef::new(&g[n * per_out..(n + 1) * per_out], geom.out_ch, p),
                            0.0,
                            &mut cols,
                        );
                        geom.col2im(
                            &cols,
                            &mut dx[n * geom.in_image()..(n + 1) * geom.in_image()],
                        );
                    }
                }
                if let Some(db) = b.and_then(|b| self.buf(grads, b)) {
                    for img in g.chunks(per_out) {
                        for (o, chan) in img.chunks(p).enumerate() {
                            db[o] += chan.iter().sum::<Real>();
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(x).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &s), &a) in dx.iter_mut().zip(g).zip(xd) {
                        if a > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_scaled(grads, a, g, 1.0);
                self.add_scaled(grads, b, g, 1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.buf(grads, a) {
                    for ((d, &s), &q) in da.iter_mut().zip(g).zip(bd) {
                        *d += s * q;
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    for ((d, &s), &q) in db.iter_mut().zip(g).zip(ad) {
                        *d += s * q;
                    }
                }
            }
            Op::ScalarMul(x, c) => self.add_scaled(grads, x, g, c),
            Op::AddScalar(x) | Op::Reshape(x) => self.add_scaled(grads, x, g, 1.0),
            Op::Sum(x) => {
                if let Some(dx) = self.buf(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.buf(grads, x) {
                    let s = g[0] / dx.len() as Real;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &s), &e) in dx.iter_mut().zip(g).zip(y.data()) {
                        *d += s * e;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(x).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &s), &a) in dx.iter_mut().zip(g).zip(xd) {
                        *d += s / a;
                    }
                }
            }
            Op::Softplus(x) => {
                let xd = self.value(x).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &s), &a) in dx.iter_mut().zip(g).zip(xd) {
                        *d += s * sigmoid(a);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let scale = 2.0 * g[0] / ad.len() as Real;
                let diff: Vec<Real> = ad.iter().zip(bd).map(|(p, q)| scale * (p - q)).collect();
                self.add_scaled(grads, a, &diff, 1.0);
                self.add_scaled(grads, b, &diff, -1.0);
            }
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
            } => {
                let xd = self.value(x).data();
                let yd = y.data();
                if let Some(dx) = self.buf(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let norm = (0..len).map(|j| xd[at(j)] * xd[at(j)]).sum::<Real>().sqrt();
                            let dot: Real = (0..len).map(|j| yd[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += (g[at(j)] - yd[at(j)] * dot) / norm;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let k = *y.shape().last().unwrap();
                if let Some(dx) = self.buf(grads, x) {
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(k).zip(g.chunks(k)).zip(y.data().chunks(k))
                    {
                        let total: Real = grow.iter().sum();
                        for ((d, &s), &ly) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += s - ly.exp() * total;
                        }
                    }
                }
            }
            Op::Pick { x, ref indices } => {
                let k = self.value(x).shape()[1];
                if let Some(dx) = self.buf(grads, x) {
                    for (row, (&idx, &s)) in indices.iter().zip(g).enumerate() {
                        dx[row * k + idx] += s;
                    }
                }
            }
            Op::GatherDot {
                x,
                table,
                ref indices,
                per_row,
            } => {
                let (xv, tv) = (self.value(x), self.value(table));
                let d = xv.shape()[1];
                if let Some(dx) = self.buf(grads, x) {
                    for (pos, (&j, &s)) in indices.iter().zip(g).enumerate() {
                        let row = pos / per_row;
                        for (dv, &t) in dx[row * d..(row + 1) * d].iter_mut().zip(tv.row(j)) {
                            *dv += s * t;
                        }
                    }
                }
                if let Some(dt) = self.buf(grads, table) {
                    for (pos, (&j, &s)) in indices.iter().zip(g).enumerate() {
                        let row = pos / per_row;
                        for (dv, &a) in dt[j * d..(j + 1) * d].iter_mut().zip(xv.row(row)) {
                            *dv += s * a;
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.value(x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(dx) = self.buf(grads, x) {
                    for (plane, gp) in g.chunks(oh * ow).enumerate() {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dx[(plane * h + oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 0.0, 0.0]));
        let na = tape.l2_normalize(a, 0).unwrap();
        assert_eq!(tape.value(na).data(), &[1.0, 0.0, 0.0]);

        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let nb = tape.l2_normalize(b, 0).unwrap();
        let got = tape.value(nb).data();
        assert!((got[0] - 0.6).abs() < 1e-12 && (got[1] - 0.8).abs() < 1e-12);

        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let err = tape.l2_normalize(z, 0).unwrap_err();
        assert_eq!(err, AutodiffError::ZeroNorm { index: 0 });
        assert!(err.to_string().contains("zero norm"));
    }

    #[test]
    fn l2_normalize_names_offending_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 1.0, 2.0, 0.0, 0.0, 0.0]));
        assert_eq!(
            tape.l2_normalize(x, 1).unwrap_err(),
            AutodiffError::ZeroNorm { index: 2 }
        );
    }

    #[test]
    fn forward_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-2.0));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).item(), Some(0.0));

        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let v = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.linear(w, Some(b), v).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let img = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.conv2d(k, None, img, 1, 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(c).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let mut tape = Tape::new();
        let k = tape.constant(Tensor::filled(vec![4, 3, 3, 3], 1.0));
        let x = tape.constant(Tensor::filled(vec![2, 3, 32, 32], 1.0));
        let y = tape.conv2d(k, None, x, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 16, 16]);
        // Interior output sees the full 3x3x3 window of ones.
        assert_eq!(tape.value(y).data()[16 + 1], 27.0);
        // The top-left corner loses a row and a column to padding.
        assert_eq!(tape.value(y).data()[0], 12.0);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "add",
                left: vec![2, 3],
                right: vec![3, 2]
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shared_paths_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.exp(x);
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0]));
        let y = tape.log_softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let total: Real = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - (2.0 as Real).ln()).abs() < 1e-15);
    }

    #[test]
    fn pick_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.pick(x, &[0, 3]),
            Err(AutodiffError::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
    }
}
