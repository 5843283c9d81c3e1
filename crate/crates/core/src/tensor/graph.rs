use super::kernels::{self, ConvShape, Exec};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activations with their own backward rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Log,
    Exp,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv { x: Var, k: Var, bias: Var, shape: ConvShape },
    Upsample(Var),
    AvgPool2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Expand(Var),
    Gather(Var, Vec<usize>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in evaluation order, so the tape is always
/// topologically sorted and [`Graph::backward`] walks it once in reverse.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    exec: Exec,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape<S>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()>
where
    S: Scalar,
{
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::with_exec(Exec::DEFAULT)
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<S>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// A constant copy of `v`'s current value, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * p];
        kernels::matmul(
            self.exec,
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            p,
            &mut out,
        );
        let t = Tensor::new(&[m, p], out)?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// 3×3 convolution, zero padding 1, stride 1.
    pub fn conv3x3(&mut self, x: Var, k: Var, bias: Var) -> Result<Var> {
        self.conv3x3_strided(x, k, bias, 1)
    }

    /// 3×3 convolution with zero padding 1 and the given stride (1 or 2).
    pub fn conv3x3_strided(&mut self, x: Var, k: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(k), self.shape(bias));
        if sx.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(dim_err!("conv3x3: input {sx:?}, kernel {sk:?}"));
        }
        if sk[1] != sx[0] {
            return Err(dim_err!(
                "conv3x3: kernel expects {} input channels, got {}",
                sk[1],
                sx[0]
            ));
        }
        if sb != [sk[0]] {
            return Err(dim_err!("conv3x3: bias {sb:?} for {} output channels", sk[0]));
        }
        if stride == 0 {
            return Err(dim_err!("conv3x3: stride must be positive"));
        }
        let shape = ConvShape {
            c_in: sx[0],
            c_out: sk[0],
            h: sx[1],
            w: sx[2],
            stride,
        };
        let (ho, wo) = (shape.out_h(), shape.out_w());
        let mut out = vec![S::ZERO; shape.c_out * ho * wo];
        kernels::conv3x3_forward(
            self.exec,
            shape,
            self.value(x).data(),
            self.value(k).data(),
            self.value(bias).data(),
            &mut out,
        );
        let t = Tensor::new(&[shape.c_out, ho, wo], out)?;
        Ok(self.derived(t, Op::Conv { x, k, bias, shape }, &[x, k, bias]))
    }

    /// Nearest-neighbour 2× upsampling of a `[C,H,W]` map.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(dim_err!("upsample: expected [C,H,W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.derived(t, Op::Upsample(x), &[x]))
    }

    /// 2×2 average pooling of a `[C,H,W]` map with even H and W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(dim_err!("avg_pool2: expected [C,2H,2W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
        let src = self.value(x).data();
        let quarter = S::from_f64(0.25);
        let mut out = vec![S::ZERO; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let at = |dy: usize, dx: usize| src[(ch * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx];
                    out[(ch * h + y) * w + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
                }
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.derived(t, Op::AvgPool2(x), &[x]))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.derived(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&S::ZERO) {
            return Err(Error::Domain("division by zero".into()));
        }
        let t = self.zip_with(a, b, "div", |x, y| x / y)?;
        Ok(self.derived(t, Op::Div(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (S::from_f64(scale), S::from_f64(shift));
        let t = self.value(x).map(|v| a * v + b);
        self.derived(t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let v = self.value(x);
        match f {
            Unary::Log if v.data().iter().any(|&e| e <= S::ZERO) => {
                return Err(Error::Domain("log of a non-positive value".into()));
            }
            Unary::Sqrt if v.data().iter().any(|&e| e < S::ZERO) => {
                return Err(Error::Domain("sqrt of a negative value".into()));
            }
            _ => {}
        }
        let t = match f {
            Unary::Sigmoid => v.map(S::sigmoid),
            Unary::Tanh => v.map(S::tanh),
            Unary::Relu => v.map(|e| if e > S::ZERO { e } else { S::ZERO }),
            Unary::LeakyRelu(slope) => {
                let s = S::from_f64(slope);
                v.map(|e| if e > S::ZERO { e } else { s * e })
            }
            Unary::Log => v.map(S::ln),
            Unary::Exp => v.map(S::exp),
            Unary::Sqrt => v.map(S::sqrt),
        };
        Ok(self.derived(t, Op::Unary(x, f), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("total function")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("total function")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("total function")
    }

    /// Leaky ReLU with negative slope 0.2.
    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LeakyRelu(0.2)).expect("total function")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("total function")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let f = S::from_f64(floor);
        let t = self.value(x).map(|v| if v > f { v } else { f });
        self.derived(t, Op::ClampMin(x, floor), &[x])
    }

    // ----- normalisation --------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(dim_err!("axis {axis} out of range for {:?}", self.shape(x)));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![S::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mx = (0..n).map(|a| src[idx(a)]).fold(src[idx(0)], S::max);
                let mut total = S::ZERO;
                for a in 0..n {
                    let e = (src[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..n {
                    out[idx(a)] = out[idx(a)] / total;
                }
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.derived(t, Op::Softmax(x, axis), &[x]))
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![S::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mx = (0..n).map(|a| src[idx(a)]).fold(src[idx(0)], S::max);
                let total: S = (0..n).map(|a| (src[idx(a)] - mx).exp()).sum();
                let lse = mx + total.ln();
                for a in 0..n {
                    out[idx(a)] = src[idx(a)] - lse;
                }
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.derived(t, Op::LogSoftmax(x, axis), &[x]))
    }

    // ----- reductions and shape -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: S = v.data().iter().copied().sum();
        let m = s / S::from_f64(v.numel() as f64);
        self.derived(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + a) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::SumAxis(x, axis), &[x]))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        if len == 0 || start + len > n {
            return Err(dim_err!("slice {start}..{} of axis with extent {n}", start + len));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(dim_err!("transpose expects rank 2, got {:?}", v.shape()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let t = Tensor::new(&[c, r], kernels::transpose(v.data(), r, c))?;
        Ok(self.derived(t, Op::Transpose(x), &[x]))
    }

    /// Repeats extent-1 axes of `x` up to `shape`. Ranks must agree.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let src_shape = v.shape();
        if src_shape.len() != shape.len()
            || src_shape
                .iter()
                .zip(shape)
                .any(|(&a, &b)| a != b && a != 1)
        {
            return Err(dim_err!("cannot expand {src_shape:?} to {shape:?}"));
        }
        let n: usize = shape.iter().product();
        let out: Vec<S> = (0..n)
            .map(|flat| v.data()[expand_source(flat, shape, src_shape)])
            .collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Expand(x), &[x]))
    }

    /// Rows `ids` of a rank-2 table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table);
        if v.rank() != 2 || ids.is_empty() {
            return Err(dim_err!("gather_rows: table {:?}, {} ids", v.shape(), ids.len()));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(dim_err!("gather_rows: id {id} out of {rows} rows"));
            }
            out.extend_from_slice(v.row(id));
        }
        let t = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.derived(t, Op::Gather(table, ids.to_vec()), &[table]))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode accumulation from a one-element `loss` into every
    /// `requires_grad` leaf. Leaf gradients add onto any existing value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs.
    fn local_grads(&self, idx: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if need(*a) {
                    let bt = kernels::transpose(vb.data(), k, p);
                    let mut da = vec![S::ZERO; m * k];
                    kernels::matmul(self.exec, g.data(), &bt, m, p, k, &mut da);
                    out.push((*a, Tensor::new(&[m, k], da)?));
                }
                if need(*b) {
                    let at = kernels::transpose(va.data(), m, k);
                    let mut db = vec![S::ZERO; k * p];
                    kernels::matmul(self.exec, &at, g.data(), k, m, p, &mut db);
                    out.push((*b, Tensor::new(&[k, p], db)?));
                }
            }
            Op::Conv { x, k, bias, shape } => {
                if need(*x) {
                    let mut dx = vec![S::ZERO; shape.c_in * shape.h * shape.w];
                    kernels::conv3x3_grad_input(self.exec, *shape, g.data(), val(*k).data(), &mut dx);
                    out.push((*x, Tensor::new(val(*x).shape(), dx)?));
                }
                if need(*k) || need(*bias) {
                    let mut dk = vec![S::ZERO; val(*k).numel()];
                    let mut db = vec![S::ZERO; shape.c_out];
                    kernels::conv3x3_grad_kernel(
                        self.exec,
                        *shape,
                        g.data(),
                        val(*x).data(),
                        &mut dk,
                        &mut db,
                    );
                    out.push((*k, Tensor::new(val(*k).shape(), dk)?));
                    out.push((*bias, Tensor::new(val(*bias).shape(), db)?));
                }
            }
            Op::Upsample(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![S::ZERO; c * h * w];
                for ch in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + yy / 2) * w + xx / 2] += g.data()[(ch * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                out.push((*x, Tensor::new(s, dx)?));
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let (c, h2, w2) = (s[0], s[1], s[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                let quarter = S::from_f64(0.25);
                let mut dx = vec![S::ZERO; c * h2 * w2];
                for ch in 0..c {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            dx[(ch * h2 + yy) * w2 + xx] = g.data()[(ch * h + yy / 2) * w + xx / 2] * quarter;
                        }
                    }
                }
                out.push((*x, Tensor::new(s, dx)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, zip(g, val(*b), |gv, bv| gv * bv)));
                }
                if need(*b) {
                    out.push((*b, zip(g, val(*a), |gv, av| gv * av)));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if need(*a) {
                    out.push((*a, zip(g, vb, |gv, bv| gv / bv)));
                }
                if need(*b) {
                    // d(a/b)/db = -y/b
                    let t = zip(y, vb, |yv, bv| yv / bv);
                    out.push((*b, zip(g, &t, |gv, q| -(gv * q))));
                }
            }
            Op::Affine(x, scale) => {
                let s = S::from_f64(*scale);
                out.push((*x, g.map(|v| v * s)));
            }
            Op::Unary(x, f) => {
                let vx = val(*x);
                let d = match f {
                    Unary::Sigmoid => zip(g, y, |gv, yv| gv * yv * (S::ONE - yv)),
                    Unary::Tanh => zip(g, y, |gv, yv| gv * (S::ONE - yv * yv)),
                    Unary::Relu => zip(g, vx, |gv, xv| if xv > S::ZERO { gv } else { S::ZERO }),
                    Unary::LeakyRelu(slope) => {
                        let s = S::from_f64(*slope);
                        zip(g, vx, |gv, xv| if xv > S::ZERO { gv } else { gv * s })
                    }
                    Unary::Log => zip(g, vx, |gv, xv| gv / xv),
                    Unary::Exp => zip(g, y, |gv, yv| gv * yv),
                    Unary::Sqrt => {
                        let half = S::from_f64(0.5);
                        zip(g, y, |gv, yv| gv * half / yv)
                    }
                };
                out.push((*x, d));
            }
            Op::ClampMin(x, floor) => {
                let f = S::from_f64(*floor);
                out.push((*x, zip(g, val(*x), |gv, xv| if xv > f { gv } else { S::ZERO })));
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![S::ZERO; y.numel()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let dot: S = (0..n).map(|a| gd[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..n {
                            dx[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), dx)?));
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![S::ZERO; y.numel()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let total: S = (0..n).map(|a| gd[idx(a)]).sum();
                        for a in 0..n {
                            dx[idx(a)] = gd[idx(a)] - yd[idx(a)].exp() * total;
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), dx)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Mean(x) => {
                let n = S::from_f64(val(*x).numel() as f64);
                out.push((*x, Tensor::full(val(*x).shape(), g.item() / n)));
            }
            Op::SumAxis(x, axis) => {
                let s = val(*x).shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let mut dx = vec![S::ZERO; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                out.push((*x, Tensor::new(s, dx)?));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape();
                    let n = s[*axis];
                    if need(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        out.push((p, Tensor::new(s, dp)?));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = val(*x).shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![S::ZERO; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(s, dx)?));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshaped(val(*x).shape())?)),
            Op::Transpose(x) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                out.push((*x, Tensor::new(&[c, r], kernels::transpose(g.data(), r, c))?));
            }
            Op::Expand(x) => {
                let s = val(*x).shape();
                let mut dx = vec![S::ZERO; val(*x).numel()];
                for (flat, &gv) in g.data().iter().enumerate() {
                    dx[expand_source(flat, y.shape(), s)] += gv;
                }
                out.push((*x, Tensor::new(s, dx)?));
            }
            Op::Gather(table, ids) => {
                let s = val(*table).shape();
                let cols = s[1];
                let mut dt = vec![S::ZERO; s[0] * cols];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[id * cols + c] += g.data()[r * cols + c];
                    }
                }
                out.push((*table, Tensor::new(s, dt)?));
            }
        }
        Ok(out)
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked on forward")
}

/// Flat source index feeding output element `flat` of an expand.
fn expand_source(flat: usize, out_shape: &[usize], src_shape: &[usize]) -> usize {
    let mut rem = flat;
    let mut src = 0;
    let mut stride = 1;
    for ax in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[ax];
        rem /= out_shape[ax];
        if src_shape[ax] != 1 {
            src += coord * stride;
        }
        stride *= src_shape[ax];
    }
    src
}
