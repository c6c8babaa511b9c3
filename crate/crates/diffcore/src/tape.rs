//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs
//! needed by its backward rule. Nodes are only ever appended, so the node
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep.

use crate::error::{invalid, DiffError, Result};
use crate::linalg::{gemm, View};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise single-input operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Abs,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Scale(f64),
    AddScalar(f64),
    Clip { lo: f64, hi: f64 },
}

/// Pointwise two-input operations (equal shapes, or one side a single value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    TimeStep {
        x: Var,
        t: usize,
    },
    SliceTime {
        x: Var,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of primitive operations in evaluation order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Adds an input value. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- pointwise

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let src = self.value(x);
        if let Unary::Ln = kind {
            if src.data().iter().any(|&v| v <= 0.0) {
                return Err(invalid("ln", "argument must be positive"));
            }
        }
        if let Unary::Clip { lo, hi } = kind {
            if lo > hi {
                return Err(invalid("clip", format!("lower bound {lo} exceeds upper bound {hi}")));
            }
        }
        let data: Vec<f64> = src.data().iter().map(|&v| apply_unary(kind, v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        if !out.is_finite() {
            return Err(DiffError::NonFinite {
                op: unary_name(kind),
            });
        }
        Ok(self.push(out, Op::Unary(kind, x), &[x]))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = if av.shape() == bv.shape() {
            Broadcast::None
        } else if bv.len() == 1 {
            Broadcast::RightScalar
        } else if av.len() == 1 {
            Broadcast::LeftScalar
        } else {
            return Err(DiffError::ShapeMismatch {
                op: binary_name(kind),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        };
        if kind == Binary::Div && bv.data().iter().any(|&d| d == 0.0) {
            return Err(DiffError::DivisionByZero { op: "div" });
        }
        let shape = match bcast {
            Broadcast::LeftScalar => bv.shape().to_vec(),
            _ => av.shape().to_vec(),
        };
        let n = av.len().max(bv.len());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = operands(bcast, av.data(), bv.data(), i);
                apply_binary(kind, x, y)
            })
            .collect();
        let out = Tensor::new(shape, data)?;
        if !out.is_finite() {
            return Err(DiffError::NonFinite {
                op: binary_name(kind),
            });
        }
        Ok(self.push(out, Op::Binary { kind, a, b, bcast }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Ln, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    /// Pointwise `min(max(x, lo), hi)`.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clip { lo, hi }, x)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            View::row_major(k),
            bv.data(),
            View::row_major(n),
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.last_dim();
        if xv.rank() == 0 || rv.len() != n {
            return Err(DiffError::ShapeMismatch {
                op,
                left: xv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        Ok(n)
    }

    /// Adds a row vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("add_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(rv.data()).for_each(|(v, r)| *v += r);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row (last axis) of `x` by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("mul_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(rv.data()).for_each(|(v, r)| *v *= r);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRow(x, row), &[x, row]))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(invalid("sum_last", "scalar input has no axis"));
        }
        let n = v.last_dim();
        let data: Vec<f64> = v.data().chunks(n).map(|c| c.iter().sum()).collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumLast(x), &[x]))
    }

    // ---------------------------------------------------------------- sequence ops

    /// Valid (unpadded) 1-D convolution over time.
    ///
    /// `x` is `[time, in_ch]` or `[batch, time, in_ch]`; `kernel` is
    /// `[k, in_ch, out_ch]`. Output time length is `(time - k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if stride == 0 {
            return Err(invalid("conv1d", "stride must be at least 1"));
        }
        let (batch, time, ch) = seq_dims(xv).ok_or_else(|| DiffError::ShapeMismatch {
            op: "conv1d",
            left: xv.shape().to_vec(),
            right: kv.shape().to_vec(),
        })?;
        if kv.rank() != 3 || kv.shape()[1] != ch {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d",
                left: xv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let (k, out_ch) = (kv.shape()[0], kv.shape()[2]);
        if k == 0 || k > time {
            return Err(invalid(
                "conv1d",
                format!("kernel length {k} does not fit input length {time}"),
            ));
        }
        let t_out = (time - k) / stride + 1;
        let mut out = vec![0.0; batch * t_out * out_ch];
        for b in 0..batch {
            let xb = &xv.data()[b * time * ch..(b + 1) * time * ch];
            gemm(
                t_out,
                k * ch,
                out_ch,
                xb,
                View {
                    rs: stride * ch,
                    cs: 1,
                },
                kv.data(),
                View::row_major(out_ch),
                0.0,
                &mut out[b * t_out * out_ch..(b + 1) * t_out * out_ch],
            );
        }
        let shape = if xv.rank() == 2 {
            vec![t_out, out_ch]
        } else {
            vec![batch, t_out, out_ch]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv1d { x, kernel, stride }, &[x, kernel]))
    }

    /// Non-overlapping max over the time axis; a trailing remainder shorter
    /// than `window` is dropped.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        if window == 0 {
            return Err(invalid("max_pool1d", "window must be at least 1"));
        }
        let (batch, time, ch) = seq_dims(xv)
            .ok_or_else(|| invalid("max_pool1d", format!("expected rank 2 or 3, got {:?}", xv.shape())))?;
        let t_out = time / window;
        if t_out == 0 {
            return Err(invalid(
                "max_pool1d",
                format!("window {window} longer than input length {time}"),
            ));
        }
        let mut out = Vec::with_capacity(batch * t_out * ch);
        let mut argmax = Vec::with_capacity(batch * t_out * ch);
        let data = xv.data();
        for b in 0..batch {
            for j in 0..t_out {
                for c in 0..ch {
                    let mut best = b * time * ch + j * window * ch + c;
                    for t in 1..window {
                        let idx = b * time * ch + (j * window + t) * ch + c;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = if xv.rank() == 2 {
            vec![t_out, ch]
        } else {
            vec![batch, t_out, ch]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MaxPool1d { x, argmax }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let n = self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (i, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(gv.data()[i] * h + bv.data()[i]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ---------------------------------------------------------------- shape ops

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if xv.rank() == 0 || start + len > n {
            return Err(invalid(
                "slice_last",
                format!("range {start}..{} outside last axis of {:?}", start + len, xv.shape()),
            ));
        }
        let data: Vec<f64> = xv
            .data()
            .chunks(n)
            .flat_map(|c| c[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast { x, start }, &[x]))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_last", "nothing to concatenate"))?;
        let lead = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(invalid("concat_last", "scalar inputs"));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_last",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let n = v.last_dim();
                data.extend_from_slice(&v.data()[r * n..(r + 1) * n]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Time slice `t` of a `[time, ch]` or `[batch, time, ch]` sequence.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let (batch, time, ch) = seq_dims(xv)
            .ok_or_else(|| invalid("time_step", format!("expected rank 2 or 3, got {:?}", xv.shape())))?;
        if t >= time {
            return Err(invalid("time_step", format!("step {t} outside length {time}")));
        }
        let mut data = Vec::with_capacity(batch * ch);
        for b in 0..batch {
            let off = b * time * ch + t * ch;
            data.extend_from_slice(&xv.data()[off..off + ch]);
        }
        let shape = if xv.rank() == 2 { vec![ch] } else { vec![batch, ch] };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::TimeStep { x, t }, &[x]))
    }

    /// Time steps `start..start + len` of a `[time, ch]` or
    /// `[batch, time, ch]` sequence.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (batch, time, ch) = seq_dims(xv)
            .ok_or_else(|| invalid("slice_time", format!("expected rank 2 or 3, got {:?}", xv.shape())))?;
        if len == 0 || start + len > time {
            return Err(invalid(
                "slice_time",
                format!("range {start}..{} outside length {time}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(batch * len * ch);
        for b in 0..batch {
            let off = (b * time + start) * ch;
            data.extend_from_slice(&xv.data()[off..off + len * ch]);
        }
        let mut shape = xv.shape().to_vec();
        let axis = shape.len() - 2;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceTime { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if !self.wants(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let d = slot(adj, *x, xv.len());
                for j in 0..g.len() {
                    d[j] += g[j] * unary_derivative(*kind, xv[j], y[j]);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for j in 0..g.len() {
                    let (x, z) = operands(*bcast, av, bv, j);
                    let (dx, dz) = binary_partials(*kind, x, z);
                    let ia = if *bcast == Broadcast::LeftScalar { 0 } else { j };
                    let ib = if *bcast == Broadcast::RightScalar { 0 } else { j };
                    ga[ia] += g[j] * dx;
                    gb[ib] += g[j] * dz;
                }
                if self.wants(*a) {
                    add_into(slot(adj, *a, av.len()), &ga);
                }
                if self.wants(*b) {
                    add_into(slot(adj, *b, bv.len()), &gb);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let d = slot(adj, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        View::row_major(n),
                        bv.data(),
                        View::transposed_of_row_major(n),
                        1.0,
                        d,
                    );
                }
                if self.wants(*b) {
                    let d = slot(adj, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        View::transposed_of_row_major(k),
                        g,
                        View::row_major(n),
                        1.0,
                        d,
                    );
                }
            }
            Op::AddRow(x, row) => {
                let n = self.value(*row).len();
                if self.wants(*x) {
                    add_into(slot(adj, *x, g.len()), g);
                }
                if self.wants(*row) {
                    let d = slot(adj, *row, n);
                    for c in g.chunks(n) {
                        add_into(d, c);
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                let n = rv.len();
                if self.wants(*x) {
                    let d = slot(adj, *x, xv.len());
                    for (j, gj) in g.iter().enumerate() {
                        d[j] += gj * rv[j % n];
                    }
                }
                if self.wants(*row) {
                    let d = slot(adj, *row, n);
                    for (j, gj) in g.iter().enumerate() {
                        d[j % n] += gj * xv[j];
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    slot(adj, *x, len).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let s = g[0] / len as f64;
                    slot(adj, *x, len).iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumLast(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let n = xv.last_dim();
                    let d = slot(adj, *x, xv.len());
                    for (r, c) in d.chunks_mut(n).enumerate() {
                        c.iter_mut().for_each(|v| *v += g[r]);
                    }
                }
            }
            Op::Conv1d { x, kernel, stride } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (batch, time, ch) = seq_dims(xv).expect("validated in forward");
                let (k, out_ch) = (kv.shape()[0], kv.shape()[2]);
                let t_out = (time - k) / stride + 1;
                let kc = k * ch;
                if self.wants(*kernel) {
                    let d = slot(adj, *kernel, kv.len());
                    for b in 0..batch {
                        let xb = &xv.data()[b * time * ch..(b + 1) * time * ch];
                        let gb = &g[b * t_out * out_ch..(b + 1) * t_out * out_ch];
                        gemm(
                            kc,
                            t_out,
                            out_ch,
                            xb,
                            View {
                                rs: 1,
                                cs: stride * ch,
                            },
                            gb,
                            View::row_major(out_ch),
                            1.0,
                            d,
                        );
                    }
                }
                if self.wants(*x) {
                    let d = slot(adj, *x, xv.len());
                    let mut cols = vec![0.0; t_out * kc];
                    for b in 0..batch {
                        let gb = &g[b * t_out * out_ch..(b + 1) * t_out * out_ch];
                        gemm(
                            t_out,
                            out_ch,
                            kc,
                            gb,
                            View::row_major(out_ch),
                            kv.data(),
                            View::transposed_of_row_major(out_ch),
                            0.0,
                            &mut cols,
                        );
                        let db = &mut d[b * time * ch..(b + 1) * time * ch];
                        for t in 0..t_out {
                            let off = t * stride * ch;
                            add_into(&mut db[off..off + kc], &cols[t * kc..(t + 1) * kc]);
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if self.wants(*x) {
                    let d = slot(adj, *x, self.value(*x).len());
                    for (gj, &src) in g.iter().zip(argmax) {
                        d[src] += gj;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                if self.wants(*gain) {
                    let d = slot(adj, *gain, n);
                    for (j, gj) in g.iter().enumerate() {
                        d[j % n] += gj * xhat[j];
                    }
                }
                if self.wants(*bias) {
                    let d = slot(adj, *bias, n);
                    for c in g.chunks(n) {
                        add_into(d, c);
                    }
                }
                if self.wants(*x) {
                    let d = slot(adj, *x, g.len());
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] += is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let n = xv.last_dim();
                    let len = node.value.last_dim();
                    let d = slot(adj, *x, xv.len());
                    for (r, c) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * n + start..r * n + start + len], c);
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.last_dim();
                    if self.wants(*p) {
                        let d = slot(adj, *p, pv.len());
                        for (r, c) in d.chunks_mut(n).enumerate() {
                            add_into(c, &g[r * total + off..r * total + off + n]);
                        }
                    }
                    off += n;
                }
            }
            Op::TimeStep { x, t } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let (batch, time, ch) = seq_dims(xv).expect("validated in forward");
                    let d = slot(adj, *x, xv.len());
                    for b in 0..batch {
                        let off = b * time * ch + t * ch;
                        add_into(&mut d[off..off + ch], &g[b * ch..(b + 1) * ch]);
                    }
                }
            }
            Op::SliceTime { x, start } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let (batch, time, ch) = seq_dims(xv).expect("validated in forward");
                    let len = g.len() / (batch * ch);
                    let d = slot(adj, *x, xv.len());
                    for b in 0..batch {
                        let off = (b * time + start) * ch;
                        add_into(&mut d[off..off + len * ch], &g[b * len * ch..(b + 1) * len * ch]);
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(slot(adj, *x, g.len()), g);
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn seq_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match t.shape() {
        [time, ch] => Some((1, *time, *ch)),
        [batch, time, ch] => Some((*batch, *time, *ch)),
        _ => None,
    }
}

fn operands(bcast: Broadcast, a: &[f64], b: &[f64], i: usize) -> (f64, f64) {
    match bcast {
        Broadcast::None => (a[i], b[i]),
        Broadcast::LeftScalar => (a[0], b[i]),
        Broadcast::RightScalar => (a[i], b[0]),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::Square => x * x,
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Clip { lo, hi } => x.max(lo).min(hi),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Clip { lo, hi } => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn apply_binary(kind: Binary, a: f64, b: f64) -> f64 {
    match kind {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
        Binary::Min => a.min(b),
        Binary::Max => a.max(b),
    }
}

/// Partial derivatives; ties in min/max route to the left operand.
fn binary_partials(kind: Binary, a: f64, b: f64) -> (f64, f64) {
    match kind {
        Binary::Add => (1.0, 1.0),
        Binary::Sub => (1.0, -1.0),
        Binary::Mul => (b, a),
        Binary::Div => (1.0 / b, -a / (b * b)),
        Binary::Min => {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        Binary::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

fn unary_name(kind: Unary) -> &'static str {
    match kind {
        Unary::Neg => "neg",
        Unary::Abs => "abs",
        Unary::Exp => "exp",
        Unary::Ln => "ln",
        Unary::Tanh => "tanh",
        Unary::Sigmoid => "sigmoid",
        Unary::Relu => "relu",
        Unary::Square => "square",
        Unary::Scale(_) => "scale",
        Unary::AddScalar(_) => "add_scalar",
        Unary::Clip { .. } => "clip",
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
        Binary::Min => "min",
        Binary::Max => "max",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()), true)
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let z = vec_leaf(&mut tape, &[0.0]);
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(t).data(), &[0.0]);

        let x = vec_leaf(&mut tape, &[1.5]);
        let c = tape.clip(x, 0.8, 1.2).unwrap();
        assert_eq!(tape.value(c).data(), &[1.2]);

        let m = vec_leaf(&mut tape, &[-1.0]);
        let e = tape.exp(m).unwrap();
        assert!((tape.value(e).data()[0] - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        let b = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        let b = vec_leaf(&mut tape, &[1.0, 0.0]);
        assert_eq!(
            tape.div(a, b).unwrap_err(),
            DiffError::DivisionByZero { op: "div" }
        );
    }

    #[test]
    fn scalar_broadcast_gradients_are_summed() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let y = tape.mul(s, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 2]);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));

        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap());
        let k = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap());
        let y = tape.conv1d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 2.0]);

        let x = tape.constant(Tensor::new(vec![3, 1], vec![1.0, -2.0, 5.0]).unwrap());
        let ident = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d(x, ident, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 5.0]);

        let zero = tape.constant(Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap());
        let y = tape.conv1d(x, zero, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let long = tape.constant(Tensor::new(vec![4, 1, 1], vec![1.0; 4]).unwrap());
        assert!(tape.conv1d(x, long, 1).is_err());
    }

    #[test]
    fn conv1d_stride_output_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![7, 1], (0..7).map(f64::from).collect()).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let y = tape.conv1d(x, k, 2).unwrap();
        // floor((7 - 3) / 2) + 1 = 3 outputs starting at 0, 2, 4
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap(), true);
        let y = tape.max_pool1d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let id = tape.max_pool1d(x, 1).unwrap();
        assert_eq!(tape.value(id).data(), tape.value(x).data());

        let c = tape.leaf(Tensor::new(vec![5, 1], vec![2.0; 5]).unwrap(), true);
        let y = tape.max_pool1d(c, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
        // ties route the gradient to the first position of each window
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 0.0]);

        assert!(tape.max_pool1d(x, 5).is_err());
    }

    #[test]
    fn slice_time_keeps_requested_steps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let y = tape.slice_time(x, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 1]);
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 5.0, 6.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!(tape.slice_time(x, 2, 2).is_err());
        assert!(tape.slice_time(x, 0, 0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::ones(&[2]));
        let bias = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-9);
        }

        let g3 = tape.constant(Tensor::ones(&[3]));
        let b3 = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let c = tape.constant(Tensor::vector(vec![4.0; 3]));
        let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));

        let z = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 5.0, -2.0, 0.3, 0.1, 9.0]).unwrap());
        let y = tape.layer_norm(z, g3, b3, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let m = row.iter().sum::<f64>() / 3.0;
            assert!((m - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let l = tape.square(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
        // a second pass accumulates
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn clip_is_median_of_three() {
        let mut tape = Tape::new();
        let xs = [-3.0, 0.79, 0.8, 1.0, 1.2, 1.21, 7.0];
        let x = vec_leaf(&mut tape, &xs);
        let y = tape.clip(x, 0.8, 1.2).unwrap();
        for (&x, &y) in xs.iter().zip(tape.value(y).data()) {
            let mut m = [0.8, x, 1.2];
            m.sort_by(f64::total_cmp);
            assert_eq!(y, m[1]);
        }
    }
}
