//! Reverse-mode autodiff over a linear computation record.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes whose inputs always precede them, so reverse iteration over node ids
//! is a valid backward schedule and visits each node exactly once. Parameter
//! tensors enter through [`Graph::param`]; everything downstream of a
//! parameter participates in [`Graph::backward`].

use std::rc::Rc;

use crate::tensor::{broadcast_shape, broadcast_strides, Tensor};
use crate::Error;

/// Handle to a value recorded on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// A differentiable operation with a hand-written vector-Jacobian product,
/// for kernels that live outside this crate (the splat compositor).
pub trait TapeOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, Error>;
    /// Per-input gradients; `None` for inputs the op is not differentiable in.
    fn vjp(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Neg(ValueId),
    AddScalar(ValueId),
    MulScalar(ValueId, f64),
    MinScalar(ValueId, f64),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    Tanh(ValueId),
    Exp(ValueId),
    Ln(ValueId),
    Sqrt(ValueId),
    Abs(ValueId),
    Softmax(ValueId),
    SumAll(ValueId),
    MeanAll(ValueId),
    Concat(Vec<ValueId>, usize),
    Slice { input: ValueId, axis: usize, start: usize, len: usize },
    Reshape(ValueId),
    Conv2d { x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize },
    GroupNorm { x: ValueId, gamma: ValueId, beta: ValueId, groups: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId },
    AvgPool { x: ValueId, k: usize },
    BilinearSample { map: ValueId, coords: Rc<Vec<[f64; 2]>> },
    GatherRows { x: ValueId, idx: Rc<Vec<usize>> },
    SparseMix { x: ValueId, idx: Rc<Vec<usize>>, w: Rc<Vec<f64>>, arity: usize },
    PerPointAffine { x: ValueId, mats: Rc<Vec<f64>> },
    ChwToHwc(ValueId),
    Custom { op: Rc<dyn TapeOp>, inputs: Vec<ValueId> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Normalization epsilon for group/layer norm. Small enough that unit-variance
/// activations normalize to variance 1 within 1e-8.
pub const NORM_EPS: f64 = 1e-12;

/// The computation record for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Gradients of a scalar loss with respect to recorded values.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Gradient of a leaf, zero-filled when the leaf is not on any path to
    /// the loss.
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Graph that rejects non-finite values flowing into any op.
    pub fn with_finite_checks() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<ValueId, Error> {
        self.leaf(t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<ValueId, Error> {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.leaf(Tensor::scalar(v), false).expect("finite scalar")
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<ValueId, Error> {
        if !t.all_finite() {
            return Err(Error::NonFinite { context: "graph leaf".into() });
        }
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { value, op, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn rg(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_inputs(&self, op: &'static str, ids: &[ValueId]) -> Result<(), Error> {
        if self.check_finite {
            for &id in ids {
                if !self.nodes[id.0].value.all_finite() {
                    return Err(Error::NonFinite { context: op.to_string() });
                }
            }
        }
        Ok(())
    }

    // ---- elementwise binary ops (numpy broadcasting) ----

    fn binary(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(ValueId, ValueId) -> Op,
    ) -> Result<ValueId, Error> {
        self.check_inputs(op_name, &[a, b])?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if ta.shape() == tb.shape() {
            let mut data = Vec::with_capacity(ta.len());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                data.push(f(*x, *y));
            }
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = broadcast_shape(op_name, ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut idx = vec![0usize; shape.len()];
            let (da, db) = (ta.data(), tb.data());
            let (mut oa, mut ob) = (0usize, 0usize);
            for _ in 0..n {
                data.push(f(da[oa], db[ob]));
                for ax in (0..shape.len()).rev() {
                    idx[ax] += 1;
                    oa += sa[ax];
                    ob += sb[ax];
                    if idx[ax] < shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                    oa -= sa[ax] * shape[ax];
                    ob -= sb[ax] * shape[ax];
                }
            }
            Tensor::new(&shape, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, Error> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, Error> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, Error> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, Error> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ops ----

    fn unary(
        &mut self,
        op_name: &'static str,
        x: ValueId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(ValueId) -> Op,
    ) -> Result<ValueId, Error> {
        self.check_inputs(op_name, &[x])?;
        let out = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        Ok(self.push(out, make(x), rg))
    }

    pub fn neg(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("neg", x, |v| -v, Op::Neg)
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> Result<ValueId, Error> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, x: ValueId, c: f64) -> Result<ValueId, Error> {
        self.unary("mul_scalar", x, |v| v * c, |i| Op::MulScalar(i, c))
    }

    /// Elementwise `min(x, c)` (upper clamp).
    pub fn min_scalar(&mut self, x: ValueId, c: f64) -> Result<ValueId, Error> {
        self.unary("min_scalar", x, |v| v.min(c), |i| Op::MinScalar(i, c))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("ln", x, f64::ln, Op::Ln)
    }

    pub fn sqrt(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.unary("abs", x, f64::abs, Op::Abs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, Error> {
        self.check_inputs("matmul", &[a, b])?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.check_inputs("transpose", &[x])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                why: "expected rank 2".into(),
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::new(&[n, m], transpose_raw(t.data(), m, n))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.check_inputs("sum_all", &[x])?;
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.check_inputs("mean_all", &[x])?;
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x), rg))
    }

    /// Numerically stable softmax along the last dimension.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.check_inputs("softmax", &[x])?;
        let t = &self.nodes[x.0].value;
        let d = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    // ---- shape ops ----

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId, Error> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                why: "no inputs".into(),
            });
        }
        self.check_inputs("concat", parts)?;
        let base = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: base,
                why: format!("axis {} out of range", axis),
            });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let ax = t.shape()[axis];
                let chunk = ax * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(
        &mut self,
        x: ValueId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<ValueId, Error> {
        self.check_inputs("slice", &[x])?;
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                why: format!("axis {} range {}..{}", axis, start, start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[off..off + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { input: x, axis, start, len }, rg))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId, Error> {
        self.check_inputs("reshape", &[x])?;
        let out = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ---- neural-net kernels ----

    /// 2-D convolution, NCHW without the batch axis: `x` is `(C,H,W)`,
    /// `w` is `(OC,C,k,k)`, `b` is `(OC)`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId, Error> {
        self.check_inputs("conv2d", &[x, w, b])?;
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (oc, wc, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wc != c || tb.shape() != [oc] || h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f64; oc * oh * ow];
        conv2d_forward(
            tx.data(), tw.data(), tb.data(), &mut out,
            c, h, wd, oc, k, stride, pad, oh, ow,
        );
        let out = Tensor::new(&[oc, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Group normalization over `(C,H,W)` with per-channel affine terms.
    pub fn group_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        groups: usize,
    ) -> Result<ValueId, Error> {
        self.check_inputs("group_norm", &[x, gamma, beta])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 3 || groups == 0 || t.shape()[0] % groups != 0 {
            return Err(Error::InvalidShape {
                op: "group_norm",
                shape: t.shape().to_vec(),
                why: format!("channels {} not divisible by groups {}", t.shape()[0], groups),
            });
        }
        let c = t.shape()[0];
        let g_sz = c / groups * t.shape()[1] * t.shape()[2];
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let hw = t.shape()[1] * t.shape()[2];
        let mut data = t.data().to_vec();
        for g in 0..groups {
            let seg = &mut data[g * g_sz..(g + 1) * g_sz];
            let mean = seg.iter().sum::<f64>() / g_sz as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g_sz as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for v in seg.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        for ch in 0..c {
            let (ga, be) = (tg.data()[ch], tb.data()[ch]);
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v = *v * ga + be;
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups }, rg))
    }

    /// Layer normalization over the last dimension with affine terms.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<ValueId, Error> {
        self.check_inputs("layer_norm", &[x, gamma, beta])?;
        let t = &self.nodes[x.0].value;
        let d = *t.shape().last().unwrap();
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data()[i] + tb.data()[i];
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, rg))
    }

    /// Average pooling with a square window `k`, dims must divide evenly.
    pub fn avg_pool(&mut self, x: ValueId, k: usize) -> Result<ValueId, Error> {
        self.check_inputs("avg_pool", &[x])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 3 || t.shape()[1] % k != 0 || t.shape()[2] % k != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool",
                shape: t.shape().to_vec(),
                why: format!("spatial dims must divide window {}", k),
            });
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; c * oh * ow];
        let d = t.data();
        let norm = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = ch * h * w + (oy * k + dy) * w + ox * k;
                        for dx in 0..k {
                            s += d[row + dx];
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = s * norm;
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool { x, k }, rg))
    }

    /// Bilinear sampling of a `(H,W,C)` map at fixed `[0,1]^2` coordinates
    /// (texel-center convention, edge clamped). Differentiable in the map
    /// only; the coordinates are constants.
    pub fn bilinear_sample(
        &mut self,
        map: ValueId,
        coords: Rc<Vec<[f64; 2]>>,
    ) -> Result<ValueId, Error> {
        self.check_inputs("bilinear_sample", &[map])?;
        let t = &self.nodes[map.0].value;
        if t.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "bilinear_sample",
                shape: t.shape().to_vec(),
                why: "expected (H,W,C) map".into(),
            });
        }
        let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![0.0; coords.len() * c];
        for (i, uv) in coords.iter().enumerate() {
            let (i0, i1, j0, j1, fy, fx) = bilinear_corners(uv[0], uv[1], h, w);
            for ch in 0..c {
                let v00 = t.data()[(i0 * w + j0) * c + ch];
                let v01 = t.data()[(i0 * w + j1) * c + ch];
                let v10 = t.data()[(i1 * w + j0) * c + ch];
                let v11 = t.data()[(i1 * w + j1) * c + ch];
                out[i * c + ch] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
        let out = Tensor::new(&[coords.len(), c], out)?;
        let rg = self.rg(map);
        Ok(self.push(out, Op::BilinearSample { map, coords }, rg))
    }

    /// Gather rows of a 2-D tensor (axis 0) by constant indices.
    pub fn gather_rows(&mut self, x: ValueId, idx: Rc<Vec<usize>>) -> Result<ValueId, Error> {
        self.check_inputs("gather_rows", &[x])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                why: "expected rank 2".into(),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                why: "index out of range or empty".into(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, rg))
    }

    /// Fixed sparse row mixing: `out[r] = sum_j w[r*arity+j] * x[idx[r*arity+j]]`.
    /// The interpolation structure (indices and weights) is constant.
    pub fn sparse_mix(
        &mut self,
        x: ValueId,
        idx: Rc<Vec<usize>>,
        w: Rc<Vec<f64>>,
        arity: usize,
    ) -> Result<ValueId, Error> {
        self.check_inputs("sparse_mix", &[x])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || arity == 0 || idx.len() != w.len() || idx.len() % arity != 0 {
            return Err(Error::InvalidShape {
                op: "sparse_mix",
                shape: t.shape().to_vec(),
                why: "bad mixing structure".into(),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::InvalidShape {
                op: "sparse_mix",
                shape: t.shape().to_vec(),
                why: "index out of range".into(),
            });
        }
        let rows = idx.len() / arity;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..arity {
                let (src, wt) = (idx[r * arity + j], w[r * arity + j]);
                let xs = &t.data()[src * d..(src + 1) * d];
                let os = &mut out[r * d..(r + 1) * d];
                for k in 0..d {
                    os[k] += wt * xs[k];
                }
            }
        }
        let out = Tensor::new(&[rows, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SparseMix { x, idx, w, arity }, rg))
    }

    /// Per-row affine map of an `(N,3)` tensor: `out[i] = M_i x[i] + t_i`,
    /// with constant `mats` (N*9, row-major) and `trans` (N*3).
    pub fn per_point_affine(
        &mut self,
        x: ValueId,
        mats: Rc<Vec<f64>>,
        trans: Rc<Vec<f64>>,
    ) -> Result<ValueId, Error> {
        self.check_inputs("per_point_affine", &[x])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::InvalidShape {
                op: "per_point_affine",
                shape: t.shape().to_vec(),
                why: "expected (N,3)".into(),
            });
        }
        let n = t.shape()[0];
        if mats.len() != n * 9 || trans.len() != n * 3 {
            return Err(Error::InvalidShape {
                op: "per_point_affine",
                shape: t.shape().to_vec(),
                why: "transform arrays do not match point count".into(),
            });
        }
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let p = &t.data()[i * 3..i * 3 + 3];
            let m = &mats[i * 9..i * 9 + 9];
            for r in 0..3 {
                out[i * 3 + r] =
                    m[r * 3] * p[0] + m[r * 3 + 1] * p[1] + m[r * 3 + 2] * p[2] + trans[i * 3 + r];
            }
        }
        let out = Tensor::new(&[n, 3], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::PerPointAffine { x, mats }, rg))
    }

    /// Permute a `(C,H,W)` tensor to `(H,W,C)`.
    pub fn chw_to_hwc(&mut self, x: ValueId) -> Result<ValueId, Error> {
        self.check_inputs("chw_to_hwc", &[x])?;
        let t = &self.nodes[x.0].value;
        if t.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "chw_to_hwc",
                shape: t.shape().to_vec(),
                why: "expected rank 3".into(),
            });
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![0.0; t.len()];
        for ch in 0..c {
            for y in 0..h {
                for xp in 0..w {
                    out[(y * w + xp) * c + ch] = t.data()[(ch * h + y) * w + xp];
                }
            }
        }
        let out = Tensor::new(&[h, w, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChwToHwc(x), rg))
    }

    /// Record an externally defined differentiable kernel.
    pub fn custom(&mut self, op: Rc<dyn TapeOp>, inputs: &[ValueId]) -> Result<ValueId, Error> {
        let name: &'static str = op.name();
        self.check_inputs(name, inputs)?;
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let out = op.forward(&vals)?;
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::Custom { op, inputs: inputs.to_vec() }, rg))
    }

    // ---- composites ----

    /// Affine layer `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, Error> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Scaled dot-product attention, composed from primitives:
    /// `softmax(q k^T / sqrt(d)) v` for 2-D `q`, `k`, `v`.
    pub fn scaled_dot_attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
    ) -> Result<ValueId, Error> {
        let d = self.shape(q)[1];
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.mul_scalar(scores, 1.0 / (d as f64).sqrt())?;
        let attn = self.softmax(scaled)?;
        self.matmul(attn, v)
    }

    /// Elementwise clamp to `[lo, hi]` tensors (broadcastable), built from
    /// relu so the subgradient is zero outside the range.
    pub fn clamp_between(
        &mut self,
        x: ValueId,
        lo: ValueId,
        hi: ValueId,
    ) -> Result<ValueId, Error> {
        let over = self.sub(x, hi)?;
        let over = self.relu(over)?;
        let under = self.sub(lo, x)?;
        let under = self.relu(under)?;
        let y = self.sub(x, over)?;
        self.add(y, under)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Every reachable `requires_grad`
    /// node receives a gradient; gradients accumulate additively across uses.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients, Error> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        if !lt.item().is_finite() {
            return Err(Error::NonFinite { context: "backward loss".into() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: ValueId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce a broadcast-shaped gradient back to the input's shape.
    fn reduce_to(&self, g: &Tensor, shape: &[usize]) -> Tensor {
        if g.shape() == shape {
            return g.clone();
        }
        let strides = broadcast_strides(shape, g.shape());
        let mut out = Tensor::zeros(shape);
        let gshape = g.shape().to_vec();
        let mut idx = vec![0usize; gshape.len()];
        let mut off = 0usize;
        for &v in g.data() {
            out.data_mut()[off] += v;
            for ax in (0..gshape.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < gshape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= strides[ax] * gshape[ax];
            }
        }
        out
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) =
                    (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
                self.accumulate(grads, *a, self.reduce_to(g, &sa));
                self.accumulate(grads, *b, self.reduce_to(g, &sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) =
                    (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
                self.accumulate(grads, *a, self.reduce_to(g, &sa));
                let gn = g.map(|v| -v);
                self.accumulate(grads, *b, self.reduce_to(&gn, &sb));
            }
            Op::Mul(a, b) => {
                let ga = self.broadcast_mul_grad(g, *b);
                let gb = self.broadcast_mul_grad(g, *a);
                let (sa, sb) =
                    (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
                self.accumulate(grads, *a, self.reduce_to(&ga, &sa));
                self.accumulate(grads, *b, self.reduce_to(&gb, &sb));
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                let tb = &self.nodes[b.0].value;
                let ta = &self.nodes[a.0].value;
                let ga = self.broadcast_binary(g, tb, |gv, bv| gv / bv);
                let gb_full = self.broadcast_trinary(g, ta, tb, |gv, av, bv| -gv * av / (bv * bv));
                let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
                self.accumulate(grads, *a, self.reduce_to(&ga, &sa));
                self.accumulate(grads, *b, self.reduce_to(&gb_full, &sb));
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::MinScalar(x, c) => {
                let t = &self.nodes[x.0].value;
                let c = *c;
                let gx = Tensor::from_fn(t.shape(), |i| {
                    if t.data()[i] < c { g.data()[i] } else { 0.0 }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G B^T ; dB = A^T G
                let bt = transpose_raw(tb.data(), k, n);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose_raw(ta.data(), m, k);
                let gb = matmul_raw(&at, g.data(), k, m, n);
                self.accumulate(grads, *a, Tensor::new(&[m, k], ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(&[k, n], gb).unwrap());
            }
            Op::Transpose(x) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let gx = transpose_raw(g.data(), n, m);
                self.accumulate(grads, *x, Tensor::new(&[m, n], gx).unwrap());
            }
            Op::Relu(x) => {
                let t = &self.nodes[x.0].value;
                let gx =
                    Tensor::from_fn(t.shape(), |i| if t.data()[i] > 0.0 { g.data()[i] } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = Tensor::from_fn(y.shape(), |i| {
                    let v = y.data()[i];
                    g.data()[i] * v * (1.0 - v)
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = Tensor::from_fn(y.shape(), |i| {
                    let v = y.data()[i];
                    g.data()[i] * (1.0 - v * v)
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let y = &node.value;
                let gx = Tensor::from_fn(y.shape(), |i| g.data()[i] * y.data()[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Ln(x) => {
                let t = &self.nodes[x.0].value;
                let gx = Tensor::from_fn(t.shape(), |i| g.data()[i] / t.data()[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let gx = Tensor::from_fn(y.shape(), |i| g.data()[i] / (2.0 * y.data()[i]));
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let t = &self.nodes[x.0].value;
                let gx = Tensor::from_fn(t.shape(), |i| {
                    let v = t.data()[i];
                    if v > 0.0 {
                        g.data()[i]
                    } else if v < 0.0 {
                        -g.data()[i]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let ys = &y.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        gx[r * d + i] = ys[i] * (gs[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), gx).unwrap());
            }
            Op::SumAll(x) => {
                let t = &self.nodes[x.0].value;
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(t.shape(), gv));
            }
            Op::MeanAll(x) => {
                let t = &self.nodes[x.0].value;
                let gv = g.item() / t.len() as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape(), gv));
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let shape = node.value.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0usize;
                for &p in parts {
                    let ps = self.nodes[p.0].value.shape().to_vec();
                    let pa = ps[axis];
                    let mut gp = Vec::with_capacity(outer * pa * inner);
                    for o in 0..outer {
                        let off = (o * shape[axis] + offset) * inner;
                        gp.extend_from_slice(&g.data()[off..off + pa * inner]);
                    }
                    offset += pa;
                    self.accumulate(grads, p, Tensor::new(&ps, gp).unwrap());
                }
            }
            Op::Slice { input, axis, start, len } => {
                let t = &self.nodes[input.0].value;
                let shape = t.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape).unwrap());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (oc, k) = (tw.shape()[0], tw.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let (mut gx, mut gw, mut gb) = (
                    vec![0.0; tx.len()],
                    vec![0.0; tw.len()],
                    vec![0.0; oc],
                );
                conv2d_backward(
                    tx.data(), tw.data(), g.data(),
                    &mut gx, &mut gw, &mut gb,
                    c, h, wd, oc, k, *stride, *pad, oh, ow,
                );
                self.accumulate(grads, *x, Tensor::new(tx.shape(), gx).unwrap());
                self.accumulate(grads, *w, Tensor::new(tw.shape(), gw).unwrap());
                self.accumulate(grads, *b, Tensor::new(&[oc], gb).unwrap());
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let t = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let c = t.shape()[0];
                let hw = t.shape()[1] * t.shape()[2];
                let g_sz = c / groups * hw;
                let mut gx = vec![0.0; t.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for gi in 0..*groups {
                    let seg = &t.data()[gi * g_sz..(gi + 1) * g_sz];
                    let mean = seg.iter().sum::<f64>() / g_sz as f64;
                    let var =
                        seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g_sz as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    // dxhat, and the two reduction terms of the norm backward
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; g_sz];
                    for j in 0..g_sz {
                        let ch = (gi * g_sz + j) / hw;
                        let xhat = (seg[j] - mean) * inv;
                        let gout = g.data()[gi * g_sz + j];
                        gg[ch] += gout * xhat;
                        gb[ch] += gout;
                        let d = gout * tg.data()[ch];
                        dxhat[j] = d;
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat;
                    }
                    let n = g_sz as f64;
                    for j in 0..g_sz {
                        let xhat = (seg[j] - mean) * inv;
                        gx[gi * g_sz + j] =
                            inv * (dxhat[j] - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(&[c], gg).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&[c], gb).unwrap());
            }
            Op::LayerNorm { x, gamma, beta } => {
                let t = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let d = *t.shape().last().unwrap();
                let rows = t.len() / d;
                let mut gx = vec![0.0; t.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let seg = &t.data()[r * d..(r + 1) * d];
                    let mean = seg.iter().sum::<f64>() / d as f64;
                    let var =
                        seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        let xhat = (seg[j] - mean) * inv;
                        let gout = g.data()[r * d + j];
                        gg[j] += gout * xhat;
                        gb[j] += gout;
                        let dh = gout * tg.data()[j];
                        dxhat[j] = dh;
                        sum_dxhat += dh;
                        sum_dxhat_xhat += dh * xhat;
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let xhat = (seg[j] - mean) * inv;
                        gx[r * d + j] =
                            inv * (dxhat[j] - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(&[d], gg).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&[d], gb).unwrap());
            }
            Op::AvgPool { x, k } => {
                let t = &self.nodes[x.0].value;
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; t.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[ch * oh * ow + oy * ow + ox] * norm;
                            for dy in 0..*k {
                                let row = ch * h * w + (oy * k + dy) * w + ox * k;
                                for dx in 0..*k {
                                    gx[row + dx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap());
            }
            Op::BilinearSample { map, coords } => {
                let t = &self.nodes[map.0].value;
                let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut gm = vec![0.0; t.len()];
                for (i, uv) in coords.iter().enumerate() {
                    let (i0, i1, j0, j1, fy, fx) = bilinear_corners(uv[0], uv[1], h, w);
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch];
                        gm[(i0 * w + j0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                        gm[(i0 * w + j1) * c + ch] += gv * (1.0 - fy) * fx;
                        gm[(i1 * w + j0) * c + ch] += gv * fy * (1.0 - fx);
                        gm[(i1 * w + j1) * c + ch] += gv * fy * fx;
                    }
                }
                self.accumulate(grads, *map, Tensor::new(t.shape(), gm).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let t = &self.nodes[x.0].value;
                let d = t.shape()[1];
                let mut gx = vec![0.0; t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..d {
                        gx[i * d + k] += g.data()[r * d + k];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap());
            }
            Op::SparseMix { x, idx, w, arity } => {
                let t = &self.nodes[x.0].value;
                let d = t.shape()[1];
                let rows = idx.len() / arity;
                let mut gx = vec![0.0; t.len()];
                for r in 0..rows {
                    for j in 0..*arity {
                        let (src, wt) = (idx[r * arity + j], w[r * arity + j]);
                        for k in 0..d {
                            gx[src * d + k] += wt * g.data()[r * d + k];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap());
            }
            Op::PerPointAffine { x, mats } => {
                let t = &self.nodes[x.0].value;
                let n = t.shape()[0];
                let mut gx = vec![0.0; n * 3];
                for i in 0..n {
                    let m = &mats[i * 9..i * 9 + 9];
                    let gv = &g.data()[i * 3..i * 3 + 3];
                    for cdim in 0..3 {
                        gx[i * 3 + cdim] =
                            m[cdim] * gv[0] + m[3 + cdim] * gv[1] + m[6 + cdim] * gv[2];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, 3], gx).unwrap());
            }
            Op::ChwToHwc(x) => {
                let t = &self.nodes[x.0].value;
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut gx = vec![0.0; t.len()];
                for ch in 0..c {
                    for y in 0..h {
                        for xp in 0..w {
                            gx[(ch * h + y) * w + xp] = g.data()[(y * w + xp) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap());
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
                let gs = op.vjp(g, &vals, &node.value);
                assert_eq!(gs.len(), inputs.len(), "custom op {} vjp arity", op.name());
                for (inp, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *inp, gi);
                    }
                }
            }
        }
    }

    /// grad (out shape) times the broadcast value of `other`, at out shape.
    fn broadcast_mul_grad(&self, g: &Tensor, other: ValueId) -> Tensor {
        let t = &self.nodes[other.0].value;
        self.broadcast_binary(g, t, |gv, tv| gv * tv)
    }

    fn broadcast_binary(&self, g: &Tensor, t: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if g.shape() == t.shape() {
            return Tensor::from_fn(g.shape(), |i| f(g.data()[i], t.data()[i]));
        }
        let strides = broadcast_strides(t.shape(), g.shape());
        let gshape = g.shape().to_vec();
        let mut idx = vec![0usize; gshape.len()];
        let mut off = 0usize;
        let mut out = Vec::with_capacity(g.len());
        for &gv in g.data() {
            out.push(f(gv, t.data()[off]));
            for ax in (0..gshape.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < gshape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= strides[ax] * gshape[ax];
            }
        }
        Tensor::new(g.shape(), out).unwrap()
    }

    fn broadcast_trinary(
        &self,
        g: &Tensor,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Tensor {
        let sa = broadcast_strides(a.shape(), g.shape());
        let sb = broadcast_strides(b.shape(), g.shape());
        let gshape = g.shape().to_vec();
        let mut idx = vec![0usize; gshape.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        let mut out = Vec::with_capacity(g.len());
        for &gv in g.data() {
            out.push(f(gv, a.data()[oa], b.data()[ob]));
            for ax in (0..gshape.len()).rev() {
                idx[ax] += 1;
                oa += sa[ax];
                ob += sb[ax];
                if idx[ax] < gshape[ax] {
                    break;
                }
                idx[ax] = 0;
                oa -= sa[ax] * gshape[ax];
                ob -= sb[ax] * gshape[ax];
            }
        }
        Tensor::new(g.shape(), out).unwrap()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let or = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Corner indices and fractions for edge-clamped bilinear lookup of a
/// `(H,W,·)` grid at `(u,v)` in `[0,1]^2`, texel-center convention.
pub fn bilinear_corners(
    u: f64,
    v: f64,
    h: usize,
    w: usize,
) -> (usize, usize, usize, usize, f64, f64) {
    let gx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let j0 = gx.floor() as usize;
    let i0 = gy.floor() as usize;
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    (i0, i1, j0, j1, gy - i0 as f64, gx - j0 as f64)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64], w: &[f64], b: &[f64], out: &mut [f64],
    c: usize, h: usize, wd: usize, oc: usize, k: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
) {
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = ic * h * wd + (iy - pad) * wd;
                        let wrow = ((o * c + ic) * k + ky) * k;
                        for kx in 0..k {
                            let ix = ix0 + kx;
                            if ix < pad || ix - pad >= wd {
                                continue;
                            }
                            acc += x[xrow + ix - pad] * w[wrow + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64], w: &[f64], g: &[f64],
    gx: &mut [f64], gw: &mut [f64], gb: &mut [f64],
    c: usize, h: usize, wd: usize, oc: usize, k: usize,
    stride: usize, pad: usize, oh: usize, ow: usize,
) {
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(o * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                gb[o] += gv;
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = ic * h * wd + (iy - pad) * wd;
                        let wrow = ((o * c + ic) * k + ky) * k;
                        for kx in 0..k {
                            let ix = ix0 + kx;
                            if ix < pad || ix - pad >= wd {
                                continue;
                            }
                            gw[wrow + kx] += gv * x[xrow + ix - pad];
                            gx[xrow + ix - pad] += gv * w[wrow + kx];
                        }
                    }
                }
            }
        }
    }
}
