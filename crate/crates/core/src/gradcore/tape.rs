use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf value, or an untracked intermediate whose inputs were dropped.
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, s: f64 },
    AddBias { x: Var, b: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    ClampMin { a: Var, floor: f64 },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    SquaredNorm { a: Var },
    RowNorms { a: Var },
    L2Normalize { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    TakeCols { a: Var, idx: Vec<usize>, k: usize },
    TransposeLast2 { a: Var },
    Softmax { a: Var, axis: usize },
    LogSumExp { a: Var, axis: usize },
    Dropout { a: Var, mask: Vec<f64> },
    GradReverse { a: Var, lambda: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf: bool,
}

/// Per-step record of executed operations.
///
/// Values are kept for every handle; the operation itself (and therefore the
/// references to its inputs) is kept only when some input is tracked.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `(outer, len, inner)` strides for a reduction over `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Matmul geometry `(batch, m, k, n)` for 2-D or batched 3-D operands.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Some((*ba, *m, *k, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value and operation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: tracked,
            leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    /// `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) =
            matmul_dims(sa, sb).ok_or_else(|| Error::dim("matmul", sa, sb))?;
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm_acc(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).numel() / (r * c);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for t in 0..batch {
            out.extend(transpose(&src[t * r * c..(t + 1) * r * c], r, c));
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let value = Tensor::new(shape, out)?;
        self.push("transpose", value, Op::TransposeLast2 { a }, &[a])
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.ndim() == 0 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.ndim() == 0 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        };
        let shape = if ta.ndim() == 0 { tb.shape() } else { ta.shape() };
        Tensor::new(shape.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b }, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div { a, b }, &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x + s)?;
        self.push("add_scalar", v, Op::AddScalar { a }, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x * s)?;
        self.push("mul_scalar", v, Op::MulScalar { a, s }, &[a])
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(Error::Domain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let k = sb.iter().product::<usize>();
        if sb.len() != 1 || sx.last() != Some(&k) {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bias = self.value(b).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % k])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, b }, &[x, b])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0))?;
        self.push("relu", v, Op::Relu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh)?;
        self.push("tanh", v, Op::Tanh { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })?;
        self.push("sigmoid", v, Op::Sigmoid { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp)?;
        self.push("exp", v, Op::Exp { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive argument {bad}"),
            });
        }
        let v = self.map(a, f64::ln)?;
        self.push("log", v, Op::Log { a }, &[a])
    }

    /// `max(x, floor)`; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.map(a, |x| x.max(floor))?;
        self.push("clamp_min", v, Op::ClampMin { a, floor }, &[a])
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { a, axis }, &[a])
    }

    /// Squared L2 norm of all elements.
    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push("squared_norm", Tensor::scalar(s), Op::SquaredNorm { a }, &[a])
    }

    /// Euclidean norm along the last axis. The subgradient at zero is zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().ok_or_else(|| Error::dim("row_norms", &shape, &[]))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out_shape = if shape.len() == 1 {
            Vec::new()
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let value = Tensor::new(out_shape, out)?;
        self.push("row_norms", value, Op::RowNorms { a }, &[a])
    }

    /// Scales every last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().ok_or_else(|| Error::dim("l2_normalize", &shape, &[]))?;
        let mut out = self.value(a).data().to_vec();
        for r in out.chunks_mut(k) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain {
                    op: "l2_normalize",
                    detail: "zero-norm row".into(),
                });
            }
            r.iter_mut().for_each(|x| *x /= n);
        }
        let value = Tensor::new(shape, out)?;
        self.push("l2_normalize", value, Op::L2Normalize { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| out[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (out[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { a, axis }, &[a])
    }

    /// `ln Σ exp(x)` along `axis`, evaluated with max-subtraction.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("logsumexp", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (src[at(l)] - m).exp()).sum();
                out[o * inner + i] = m + z.ln();
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push("logsumexp", value, Op::LogSumExp { a, axis }, &[a])
    }

    // ----- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Selects slices along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        if t.ndim() == 0 || idx.is_empty() {
            return Err(Error::dim("gather_rows", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let w = t.row_len();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// For a matrix `(n, c)` and `n·k` column indices, returns
    /// `out[i, j] = a[i, idx[i·k + j]]` with shape `(n, k)`.
    pub fn take_cols(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let t = self.value(a);
        let [n, c] = *t.shape() else {
            return Err(Error::dim("take_cols", t.shape(), &[k]));
        };
        if k == 0 || idx.len() != n * k {
            return Err(Error::dim("take_cols", t.shape(), &[idx.len(), k]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "take_cols index {bad} out of range for {c} columns"
            )));
        }
        let src = t.data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(p, &j)| src[(p / k) * c + j])
            .collect();
        let value = Tensor::matrix(n, k, out)?;
        self.push(
            "take_cols",
            value,
            Op::TakeCols {
                a,
                idx: idx.to_vec(),
                k,
            },
            &[a],
        )
    }

    // ----- training-specific ----------------------------------------------

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)` when `training`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Identity on the forward pass; multiplies the upstream gradient by
    /// `-lambda` on the backward pass.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        let value = self.value(a).clone();
        self.push("grad_reverse", value, Op::GradReverse { a, lambda }, &[a])
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every tracked leaf receives a
    /// gradient (zero when it does not influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar loss of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !n.requires_grad {
                    return None;
                }
                match grads[i].take() {
                    Some(g) => Some(Tensor::new(n.value.shape().to_vec(), g).ok()?),
                    None if n.leaf => Some(Tensor::zeros(n.value.shape().to_vec()).ok()?),
                    None => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    /// Adds `g` to `v`'s gradient, reducing over all elements when `v` is a
    /// broadcast scalar operand.
    fn accumulate_elementwise(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        let scalar = self.nodes[v.0].value.ndim() == 0 && g.len() != 1;
        self.accumulate(grads, v, |s| {
            if scalar {
                s[0] += g.iter().sum::<f64>();
            } else {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        });
    }

    /// Elementwise value of a binary operand, honouring scalar broadcast.
    fn operand(&self, v: Var, i: usize) -> f64 {
        let t = &self.nodes[v.0].value;
        if t.ndim() == 0 {
            t.data()[0]
        } else {
            t.data()[i]
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims(sa, sb).expect("validated on forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for t in 0..batch {
                        let bt = transpose(&bv[t * k * n..(t + 1) * k * n], k, n);
                        gemm_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bt,
                            &mut s[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for t in 0..batch {
                        let at = transpose(&av[t * m * k..(t + 1) * m * k], m, k);
                        gemm_acc(
                            &at,
                            &g[t * m * n..(t + 1) * m * n],
                            &mut s[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate_elementwise(grads, *a, g);
                self.accumulate_elementwise(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate_elementwise(grads, *a, g);
                let ng: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate_elementwise(grads, *b, &ng);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, g)| g * self.operand(*b, i)).collect();
                let gb: Vec<f64> = g.iter().enumerate().map(|(i, g)| g * self.operand(*a, i)).collect();
                self.accumulate_elementwise(grads, *a, &ga);
                self.accumulate_elementwise(grads, *b, &gb);
            }
            Op::Div { a, b } => {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, g)| g / self.operand(*b, i)).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let y = self.operand(*b, i);
                        -g * self.operand(*a, i) / (y * y)
                    })
                    .collect();
                self.accumulate_elementwise(grads, *a, &ga);
                self.accumulate_elementwise(grads, *b, &gb);
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MulScalar { a, s: k } => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
            }
            Op::GradReverse { a, lambda } => {
                let k = -lambda;
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g));
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.accumulate(grads, *b, |s| {
                    let k = s.len();
                    for (i, gv) in g.iter().enumerate() {
                        s[i % k] += gv;
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh { a } => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid { a } => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Exp { a } => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i];
                }
            }),
            Op::Log { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::ClampMin { a, floor } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if x[i] > *floor {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum { a } => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                self.accumulate(grads, *a, |s| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                s[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SquaredNorm { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * x[i] * g[0];
                    }
                });
            }
            Op::RowNorms { a } => {
                let x = self.value(*a).data();
                let k = *self.shape(*a).last().expect("validated on forward");
                self.accumulate(grads, *a, |s| {
                    for (r, &norm) in out.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        for j in r * k..(r + 1) * k {
                            s[j] += g[r] * x[j] / norm;
                        }
                    }
                });
            }
            Op::L2Normalize { a } => {
                let x = self.value(*a).data();
                let k = *self.shape(*a).last().expect("validated on forward");
                self.accumulate(grads, *a, |s| {
                    for r in 0..x.len() / k {
                        let span = r * k..(r + 1) * k;
                        let norm = x[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = span.clone().map(|j| out[j] * g[j]).sum();
                        for j in span {
                            s[j] += (g[j] - out[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                self.accumulate(grads, *a, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                s[at(l)] += out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { a, axis } => {
                let x = self.value(*a).data();
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                self.accumulate(grads, *a, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let lse = out[o * inner + i];
                            let gi = g[o * inner + i];
                            for l in 0..len {
                                let at = (o * len + l) * inner + i;
                                s[at] += gi * (x[at] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let chunk = len * inner;
                    self.accumulate(grads, v, |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for c in 0..chunk {
                                s[o * chunk + c] += g[src + c];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::GatherRows { a, idx } => {
                let w = self.value(*a).row_len();
                self.accumulate(grads, *a, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..w {
                            s[i * w + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::TakeCols { a, idx, k } => {
                let c = self.shape(*a)[1];
                self.accumulate(grads, *a, |s| {
                    for (p, &j) in idx.iter().enumerate() {
                        s[(p / k) * c + j] += g[p];
                    }
                });
            }
            Op::TransposeLast2 { a } => {
                let sa = self.shape(*a);
                let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                self.accumulate(grads, *a, |s| {
                    for t in 0..s.len() / (r * c) {
                        let back = transpose(&g[t * r * c..(t + 1) * r * c], c, r);
                        for (dst, v) in s[t * r * c..(t + 1) * r * c].iter_mut().zip(back) {
                            *dst += v;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => self.accumulate(grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
        }
    }
}
