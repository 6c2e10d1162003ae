use super::shape::{broadcast_map, broadcast_shape, matmul_dims, split_axis};
use super::{Result, Tensor, TensorError, DEGENERATE_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Every op result is rounded through `f32`.
    #[default]
    Single,
    /// Full double precision, used for gradient checking.
    Double,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize, scale: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    L2Norm(Var),
    Normalize { x: Var, norms: Vec<f64> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BroadcastTo(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    madds: u64,
}

/// Gradients of a scalar loss with respect to the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf; `None` for anything that is not a parameter
    /// or that the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            madds: 0,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by every forward matmul recorded so far.
    pub fn matmul_madds(&self) -> u64 {
        self.madds
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.precision == Precision::Single {
            value.round_to_single();
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, Op::Constant, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, Op::Param, true)
    }

    fn push_leaf(&mut self, mut t: Tensor, op: Op, rg: bool) -> Var {
        if self.precision == Precision::Single {
            t.round_to_single();
        }
        self.nodes.push(Node {
            value: t,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(sa.to_vec(), data)?
        } else {
            let out_shape = broadcast_shape(name, sa, sb)?;
            let ma = broadcast_map(sa, &out_shape);
            let mb = broadcast_map(sb, &out_shape);
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(out_shape, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- unary ops ----

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        self.push(name, value, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("mul_scalar", x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, keepdim, 1.0)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(x).get(axis).unwrap_or(&1);
        self.reduce_axis("mean_axis", x, axis, keepdim, 1.0 / len.max(1) as f64)
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        x: Var,
        axis: usize,
        keepdim: bool,
        scale: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(name, &shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(x);
        self.push(name, Tensor::new(out_shape, out)?, Op::SumAxis { x, axis, scale }, rg)
    }

    // ---- normalizations ----

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let mut out = self.value(x).data().to_vec();
        for_each_lane(outer, len, inner, |idx| {
            let m = idx.clone().map(|k| out[k]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in idx.clone() {
                out[k] = (out[k] - m).exp();
                z += out[k];
            }
            for k in idx {
                out[k] /= z;
            }
        });
        let rg = self.rg(x);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("log_softmax", &shape, axis)?;
        let mut out = self.value(x).data().to_vec();
        for_each_lane(outer, len, inner, |idx| {
            let m = idx.clone().map(|k| out[k]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.clone().map(|k| (out[k] - m).exp()).sum::<f64>().ln();
            for k in idx {
                out[k] -= lse;
            }
        });
        let rg = self.rg(x);
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, rg)
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let src = self.value(x).data();
        let rows = src.len() / cols.max(1);
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(x);
        self.push("layer_norm", Tensor::new(shape, out)?, Op::LayerNorm { x, rstd }, rg)
    }

    /// Euclidean norm over the last axis; the axis is removed.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(cols.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out_shape = shape;
        out_shape.pop();
        let rg = self.rg(x);
        self.push("l2_norm", Tensor::new(out_shape, out)?, Op::L2Norm(x), rg)
    }

    /// Scale each vector along the last axis to unit length.
    ///
    /// Errors if any vector has norm below [`DEGENERATE_EPS`].
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(src.len() / cols.max(1));
        for (r, row) in src.chunks(cols.max(1)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n >= DEGENERATE_EPS) {
                return Err(TensorError::Degenerate {
                    op: "normalize",
                    norm: n,
                });
            }
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push("normalize", Tensor::new(shape, out)?, Op::Normalize { x, norms }, rg)
    }

    /// Cosine similarity of two vectors of equal length.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let na = self.normalize(a)?;
        let nb = self.normalize(b)?;
        let p = self.mul(na, nb)?;
        self.sum(p)
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, giving `[n]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_cosine",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let na = self.normalize(a)?;
        let nb = self.normalize(b)?;
        let p = self.mul(na, nb)?;
        self.sum_axis(p, 1, false)
    }

    // ---- linear algebra and layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.madds += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        let rg = self.rg(x);
        self.push("transpose", t, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let out_shape = broadcast_shape("broadcast_to", &src_shape, shape)?;
        if out_shape != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src_shape,
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_map(&src_shape, shape);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        self.push("broadcast_to", Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("slice", &shape, axis)?;
        if start > end || end > len {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for length {len}"),
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let rg = self.rg(x);
        self.push("slice", Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg)
    }

    // ---- reverse pass ----

    /// Propagate gradients from a scalar `loss` back to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or(TensorError::Invalid {
                op: "backward",
                msg: "loss is not on this tape".into(),
            })?
            .value
            .clone();
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let single = self.precision == Precision::Single;

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if single {
                g.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
            self.propagate(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match (g, &node.op) {
                    (Some(mut g), Op::Param) => {
                        if single {
                            g.iter_mut().for_each(|v| *v = *v as f32 as f64);
                        }
                        Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        })
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = node.value.shape();
                if self.rg(*a) {
                    let ga = reduce_to(g, self.shape(*a), out_shape, 1.0);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = reduce_to(g, self.shape(*b), out_shape, sign);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = broadcast_map(va.shape(), out_shape);
                let mb = broadcast_map(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for i in 0..g.len() {
                        let y = db[mb[i]];
                        ga[ma[i]] += if is_div { g[i] / y } else { g[i] * y };
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for i in 0..g.len() {
                        let x = da[ma[i]];
                        gb[mb[i]] += if is_div {
                            let y = db[mb[i]];
                            -g[i] * x / (y * y)
                        } else {
                            g[i] * x
                        };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::MulScalar(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Relu(x) => {
                let src = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(src)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out).map(|(gi, y)| gi * y).collect();
                accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let src = self.value(*x).data();
                let gx = g.iter().zip(src).map(|(gi, xi)| gi / xi).collect();
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis, scale } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis("sum_axis", shape, *axis).expect("validated");
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) =
                    split_axis("softmax", node.value.shape(), *axis).expect("validated");
                let mut gx = vec![0.0; g.len()];
                for_each_lane(outer, len, inner, |idx| {
                    let dot: f64 = idx.clone().map(|k| g[k] * out[k]).sum();
                    for k in idx {
                        gx[k] = out[k] * (g[k] - dot);
                    }
                });
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) =
                    split_axis("log_softmax", node.value.shape(), *axis).expect("validated");
                let mut gx = vec![0.0; g.len()];
                for_each_lane(outer, len, inner, |idx| {
                    let total: f64 = idx.clone().map(|k| g[k]).sum();
                    for k in idx {
                        gx[k] = g[k] - out[k].exp() * total;
                    }
                });
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let cols = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![0.0; g.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, yr) = (&g[span.clone()], &out[span.clone()]);
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *o = rs * (gi - mg - yi * mgy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Norm(x) => {
                let src = self.value(*x).data();
                let cols = src.len() / g.len().max(1);
                let mut gx = vec![0.0; src.len()];
                for (r, (gi, n)) in g.iter().zip(out).enumerate() {
                    if *n > 0.0 {
                        for c in 0..cols {
                            gx[r * cols + c] = gi * src[r * cols + c] / n;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Normalize { x, norms } => {
                let cols = g.len() / norms.len().max(1);
                let mut gx = vec![0.0; g.len()];
                for (r, n) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, yr) = (&g[span.clone()], &out[span.clone()]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * dot) / n;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(va.shape(), vb.shape()).expect("validated");
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt(g, vb.data(), &mut ga, m, n, k);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn(va.data(), g, &mut gb, m, k, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut gx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::BroadcastTo(x) => {
                let gx = reduce_to(g, self.shape(*x), node.value.shape(), 1.0);
                accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) =
                    split_axis("concat", node.value.shape(), *axis).expect("validated");
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + len * inner]);
                        }
                        accumulate(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis("slice", shape, *axis).expect("validated");
                let w = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sum a broadcast gradient back down to `in_shape`.
fn reduce_to(g: &[f64], in_shape: &[usize], out_shape: &[usize], sign: f64) -> Vec<f64> {
    if in_shape == out_shape {
        return if sign == 1.0 {
            g.to_vec()
        } else {
            g.iter().map(|v| v * sign).collect()
        };
    }
    let map = broadcast_map(in_shape, out_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (gi, &j) in g.iter().zip(&map) {
        out[j] += gi * sign;
    }
    out
}

/// Call `f` with the flat indices of every lane along the split axis.
fn for_each_lane(
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

pub(crate) mod kernels {
    //! Row-major GEMM wrappers. Each call is single-threaded, so results do not depend
    //! on the thread pool.

    /// `out[m×n] = a[m×k] · b[k×n]`
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(a, (k, 1), b, (n, 1), out, m, k, n);
    }

    /// `out[m×k] = g[m×n] · b[k×n]ᵀ`
    pub fn matmul_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        gemm(g, (n, 1), b, (1, n), out, m, n, k);
    }

    /// `out[k×n] = a[m×k]ᵀ · g[m×n]`
    pub fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(a, (1, k), g, (n, 1), out, k, m, n);
    }

    /// `out[m×n] += x[m×k] · y[k×n]` with explicit (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(x: &[f64], xs: (usize, usize), y: &[f64], ys: (usize, usize), out: &mut [f64], m: usize, k: usize, n: usize) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        assert!(x.len() >= m * k && y.len() >= k * n && out.len() >= m * n, "gemm operand sizes");
        // SAFETY: the asserts above keep every strided access inside the slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                x.as_ptr(),
                xs.0 as isize,
                xs.1 as isize,
                y.as_ptr(),
                ys.0 as isize,
                ys.1 as isize,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
