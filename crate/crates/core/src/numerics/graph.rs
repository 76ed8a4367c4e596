//! Define-by-run reverse-mode differentiation.
//!
//! Each builder method evaluates its result eagerly and records the op on a
//! tape; [`Graph::backward`] walks the tape in reverse creation order (a
//! topological order by construction) and accumulates gradients into every
//! node that transitively depends on a parameter. Values are checked finite
//! after every op.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNormCols { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize },
    EmbedRow { table: NodeId, row: usize },
    Concat0(Vec<NodeId>),
    BroadcastCol { v: NodeId, cols: usize },
    AddCol { x: NodeId, b: NodeId },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<String>) -> Result<NodeId> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node { value, op, requires_grad, param });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Non-trainable input.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Trainable leaf; gradients are reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, Some(name.to_string()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_same_shape("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), rg, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_same_shape("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub(a, b), rg, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_same_shape("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), rg, None)
    }

    /// Elementwise max; ties take the first argument's gradient.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_same_shape("maximum", self.value(a), self.value(b), f64::max)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Maximum(a, b), rg, None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.requires(a);
        self.push(out, Op::Scale(a, c), rg, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Matmul(a, b), rg, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transposed2()?;
        let rg = self.requires(a);
        self.push(out, Op::Transpose(a), rg, None)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.requires(a);
        self.push(out, Op::Relu(a), rg, None)
    }

    /// Max-stabilized softmax along `axis` of a rank-1 or rank-2 tensor.
    /// Slices along the chosen axis sum to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let x = self.value(a);
        let out = softmax_forward(x, axis)?;
        let rg = self.requires(a);
        self.push(out, Op::Softmax { x: a, axis }, rg, None)
    }

    /// Layer normalization over the row axis of `x [m×n]`, independently per
    /// column: each column is standardized (population variance, `eps` inside
    /// the square root), then scaled by `gain [m]` and shifted by `bias [m]`.
    pub fn layer_norm_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        if xv.rank() != 2 || g.shape() != [xv.rows()] || b.shape() != [xv.rows()] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_cols",
                detail: format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), g.shape(), b.shape()),
            });
        }
        if xv.rows() < 2 {
            return Err(Error::InvalidInput("layer_norm_cols requires at least 2 rows".into()));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for j in 0..n {
            let mut mean = 0.0;
            for i in 0..m {
                mean += xv.at2(i, j);
            }
            mean /= m as f64;
            let mut var = 0.0;
            for i in 0..m {
                let d = xv.at2(i, j) - mean;
                var += d * d;
            }
            var /= m as f64;
            let s = (var + eps).sqrt();
            for i in 0..m {
                let xn = (xv.at2(i, j) - mean) / s;
                out.set2(i, j, g.data()[i] * xn + b.data()[i]);
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(out, Op::LayerNormCols { x, gain, bias, eps }, rg, None)
    }

    /// 2-D cross-correlation of `x [C_in×H×W]` with `w [C_out×C_in×k×k]`
    /// plus per-channel bias `b [C_out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out, Op::Conv2d { x, w, b, stride, padding }, rg, None)
    }

    /// Extract row `row` of a rank-2 table as a rank-1 vector.
    pub fn embed_row(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed_row",
                detail: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        if row >= t.rows() {
            return Err(Error::OutOfBounds(format!(
                "embedding row {} out of range for table with {} rows",
                row,
                t.rows()
            )));
        }
        let n = t.cols();
        let data = t.data()[row * n..(row + 1) * n].to_vec();
        let rg = self.requires(table);
        self.push(Tensor::new(vec![n], data)?, Op::EmbedRow { table, row }, rg, None)
    }

    /// Concatenate along axis 0. All parts must share trailing dimensions.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat0 of zero parts".into()));
        }
        if self.value(parts[0]).rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "concat0",
                detail: "rank-0 scalars cannot be concatenated; reshape to [1] first".into(),
            });
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    detail: format!("part shape {:?} incompatible with {:?}", s, tail),
                });
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Tensor::new(shape, data)?, Op::Concat0(parts.to_vec()), rg, None)
    }

    /// Tile vector `v [m]` as the columns of an `[m×cols]` matrix.
    pub fn broadcast_col(&mut self, v: NodeId, cols: usize) -> Result<NodeId> {
        let vt = self.value(v);
        if vt.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_col",
                detail: format!("expected rank-1 vector, got {:?}", vt.shape()),
            });
        }
        let m = vt.shape()[0];
        let out = Tensor::from_fn2(m, cols, |i, _| vt.data()[i]);
        let rg = self.requires(v);
        self.push(out, Op::BroadcastCol { v, cols }, rg, None)
    }

    /// Add bias vector `b [m]` to every column of `x [m×n]`.
    pub fn add_col(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 2 || bv.shape() != [xv.rows()] {
            return Err(Error::ShapeMismatch {
                op: "add_col",
                detail: format!("x {:?}, b {:?}", xv.shape(), bv.shape()),
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let out = Tensor::from_fn2(m, n, |i, j| xv.at2(i, j) + bv.data()[i]);
        let rg = self.requires(x) || self.requires(b);
        self.push(out, Op::AddCol { x, b }, rg, None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.requires(x);
        self.push(out, Op::Reshape(x), rg, None)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, None)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::InvalidInput("mean of empty tensor".into()));
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, None)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.accumulate(id, &op, &g, &mut grads)?;
            if self.nodes[id].param.is_some() {
                grads[id] = Some(g); // keep for collection
            }
        }

        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, id: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let send = |id: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.requires(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                send(*b, neg, grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, zip_same_shape("mul.bwd", g, bv, |x, y| x * y)?, grads);
                send(*b, zip_same_shape("mul.bwd", g, av, |x, y| x * y)?, grads);
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..g.len() {
                    if av.data()[i] >= bv.data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                send(*a, ga, grads);
                send(*b, gb, grads);
            }
            Op::Scale(a, c) => {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v *= c;
                }
                send(*a, d, grads);
            }
            Op::Matmul(a, b) => {
                // y = a·b: da = g·bᵀ, db = aᵀ·g
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    send(*a, matmul(g, &bv.transposed2()?)?, grads);
                }
                if self.requires(*b) {
                    send(*b, matmul(&av.transposed2()?, g)?, grads);
                }
            }
            Op::Transpose(a) => {
                send(*a, g.transposed2()?, grads);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                for i in 0..g.len() {
                    if av.data()[i] > 0.0 {
                        d.data_mut()[i] = g.data()[i];
                    }
                }
                send(*a, d, grads);
            }
            Op::Softmax { x, axis } => {
                // dx_i = s_i (g_i - Σ_j g_j s_j) per slice, where s is this
                // node's own output
                let s = self.value(NodeId(id));
                let d = softmax_backward(s, g, *axis)?;
                send(*x, d, grads);
            }
            Op::LayerNormCols { x, gain, bias, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let (m, n) = (xv.rows(), xv.cols());
                let mf = m as f64;
                let mut dx = Tensor::zeros(&[m, n]);
                let mut dgain = Tensor::zeros(&[m]);
                let mut dbias = Tensor::zeros(&[m]);
                for j in 0..n {
                    let mut mean = 0.0;
                    for i in 0..m {
                        mean += xv.at2(i, j);
                    }
                    mean /= mf;
                    let mut var = 0.0;
                    for i in 0..m {
                        let d = xv.at2(i, j) - mean;
                        var += d * d;
                    }
                    var /= mf;
                    let s = (var + eps).sqrt();
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xn = 0.0;
                    for i in 0..m {
                        let xn = (xv.at2(i, j) - mean) / s;
                        let dy = g.at2(i, j) * gv.data()[i];
                        sum_dy += dy;
                        sum_dy_xn += dy * xn;
                        dgain.data_mut()[i] += g.at2(i, j) * xn;
                        dbias.data_mut()[i] += g.at2(i, j);
                    }
                    for i in 0..m {
                        let xn = (xv.at2(i, j) - mean) / s;
                        let dy = g.at2(i, j) * gv.data()[i];
                        dx.set2(i, j, (dy - sum_dy / mf - xn * sum_dy_xn / mf) / s);
                    }
                }
                send(*x, dx, grads);
                send(*gain, dgain, grads);
                send(*bias, dbias, grads);
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (dx, dw, db) = conv2d_backward(xv, wv, g, *stride, *padding)?;
                send(*x, dx, grads);
                send(*w, dw, grads);
                send(*b, db, grads);
            }
            Op::EmbedRow { table, row } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.shape());
                let n = t.cols();
                dt.data_mut()[row * n..(row + 1) * n].copy_from_slice(g.data());
                send(*table, dt, grads);
            }
            Op::Concat0(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let len = ps.iter().product::<usize>();
                    let d = Tensor::new(ps, g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    send(p, d, grads);
                }
            }
            Op::BroadcastCol { v, cols } => {
                let m = self.value(*v).shape()[0];
                let mut dv = Tensor::zeros(&[m]);
                for i in 0..m {
                    let mut s = 0.0;
                    for j in 0..*cols {
                        s += g.at2(i, j);
                    }
                    dv.data_mut()[i] = s;
                }
                send(*v, dv, grads);
            }
            Op::AddCol { x, b } => {
                send(*x, g.clone(), grads);
                let m = g.rows();
                let mut db = Tensor::zeros(&[m]);
                for i in 0..m {
                    let mut s = 0.0;
                    for j in 0..g.cols() {
                        s += g.at2(i, j);
                    }
                    db.data_mut()[i] = s;
                }
                send(*b, db, grads);
            }
            Op::Reshape(x) => {
                let d = Tensor::new(self.value(*x).shape().to_vec(), g.data().to_vec())?;
                send(*x, d, grads);
            }
            Op::Sum(x) => {
                send(*x, Tensor::filled(self.value(*x).shape(), g.data()[0]), grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, Tensor::filled(self.value(*x).shape(), g.data()[0] / n), grads);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Maximum(..) => "maximum",
        Op::Scale(..) => "scale",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Relu(..) => "relu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNormCols { .. } => "layer_norm",
        Op::Conv2d { .. } => "conv2d",
        Op::EmbedRow { .. } => "embed_row",
        Op::Concat0(..) => "concat0",
        Op::BroadcastCol { .. } => "broadcast_col",
        Op::AddCol { .. } => "add_col",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}

fn zip_same_shape(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = x.clone();
    match (x.rank(), axis) {
        (1, 0) => softmax_slice_inplace(out.data_mut()),
        (2, 1) => {
            let n = x.cols();
            for row in out.data_mut().chunks_mut(n) {
                softmax_slice_inplace(row);
            }
        }
        (2, 0) => {
            let (m, n) = (x.rows(), x.cols());
            for j in 0..n {
                let mut col: Vec<f64> = (0..m).map(|i| x.at2(i, j)).collect();
                softmax_slice_inplace(&mut col);
                for i in 0..m {
                    out.set2(i, j, col[i]);
                }
            }
        }
        _ => {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("unsupported shape {:?} with axis {}", x.shape(), axis),
            })
        }
    }
    Ok(out)
}

fn softmax_slice_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn softmax_backward(s: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(s.shape());
    let apply = |sv: &[f64], gv: &[f64], ov: &mut [f64]| {
        let dot: f64 = sv.iter().zip(gv).map(|(a, b)| a * b).sum();
        for i in 0..sv.len() {
            ov[i] = sv[i] * (gv[i] - dot);
        }
    };
    match (s.rank(), axis) {
        (1, 0) => {
            let mut buf = vec![0.0; s.len()];
            apply(s.data(), g.data(), &mut buf);
            out.data_mut().copy_from_slice(&buf);
        }
        (2, 1) => {
            let n = s.cols();
            for (i, orow) in out.data_mut().chunks_mut(n).enumerate() {
                apply(&s.data()[i * n..(i + 1) * n], &g.data()[i * n..(i + 1) * n], orow);
            }
        }
        (2, 0) => {
            let (m, n) = (s.rows(), s.cols());
            for j in 0..n {
                let sc: Vec<f64> = (0..m).map(|i| s.at2(i, j)).collect();
                let gc: Vec<f64> = (0..m).map(|i| g.at2(i, j)).collect();
                let mut oc = vec![0.0; m];
                apply(&sc, &gc, &mut oc);
                for i in 0..m {
                    out.set2(i, j, oc[i]);
                }
            }
        }
        _ => unreachable!("forward validated the shape"),
    }
    Ok(out)
}

fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::InvalidInput("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {} too large for padded input {}x{}", k, h + 2 * padding, w + 2 * padding),
        });
    }
    Ok(((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("x {:?}, w {:?}", x.shape(), w.shape()),
        });
    }
    let (c_in, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, wc_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc_in != c_in || kh != kw || b.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        });
    }
    let k = kh;
    let (oh, ow) = conv2d_out_dims(h, wid, k, stride, padding)?;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    for co in 0..c_out {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..c_in {
                    for ki in 0..k {
                        let xi = (oi * stride + ki) as isize - padding as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xj = (oj * stride + kj) as isize - padding as isize;
                            if xj < 0 || xj >= wid as isize {
                                continue;
                            }
                            acc += x.at3(ci, xi as usize, xj as usize) * w.data()[((co * c_in + ci) * k + ki) * k + kj];
                        }
                    }
                }
                out.set3(co, oi, oj, acc);
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        for oi in 0..oh {
            for oj in 0..ow {
                let gv = g.at3(co, oi, oj);
                if gv == 0.0 {
                    continue;
                }
                db.data_mut()[co] += gv;
                for ci in 0..c_in {
                    for ki in 0..k {
                        let xi = (oi * stride + ki) as isize - padding as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xj = (oj * stride + kj) as isize - padding as isize;
                            if xj < 0 || xj >= wid as isize {
                                continue;
                            }
                            let widx = ((co * c_in + ci) * k + ki) * k + kj;
                            dx.data_mut()[(ci * h + xi as usize) * wid + xj as usize] += gv * w.data()[widx];
                            dw.data_mut()[widx] += gv * x.at3(ci, xi as usize, xj as usize);
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Weight the output with varied fixed coefficients and reduce to a
    // scalar, so every output element influences the loss differently.
    fn to_scalar(g: &mut Graph, out: NodeId) -> NodeId {
        let shape = g.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| (1.7 * i as f64 + 0.3).sin() + 2.0).collect();
        let wt = g.input(Tensor::new(shape, w).unwrap()).unwrap();
        let prod = g.mul(out, wt).unwrap();
        g.mean(prod).unwrap()
    }

    fn varied(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (0.9 * i as f64 + phase).sin() * 1.5 + 0.1).collect()
    }

    // Central finite differences on one named parameter against the tape's
    // gradient for it.
    fn fd_check<F>(shape: &[usize], data: Vec<f64>, build: F)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n);
        let eval = |d: &[f64]| -> f64 {
            let mut g = Graph::new();
            let p = g.param("p", Tensor::new(shape.to_vec(), d.to_vec()).unwrap()).unwrap();
            let out = build(&mut g, p);
            let loss = to_scalar(&mut g, out);
            g.value(loss).scalar_value().unwrap()
        };

        let mut g = Graph::new();
        let p = g.param("p", Tensor::new(shape.to_vec(), data.clone()).unwrap()).unwrap();
        let out = build(&mut g, p);
        let loss = to_scalar(&mut g, out);
        let grads = g.backward(loss).unwrap();
        let analytic = &grads["p"];

        let h = 1e-6;
        for i in 0..n {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / f64::max(a.abs() + fd.abs(), 1e-3);
            assert!(
                rel < 1e-6,
                "element {i}: analytic {a}, finite-diff {fd}, rel {rel}"
            );
        }
    }

    #[test]
    fn grad_add_sub_mul() {
        fd_check(&[2, 3], varied(6, 0.2), |g, p| {
            let c = g.input(Tensor::new(vec![2, 3], varied(6, 1.1)).unwrap()).unwrap();
            let a = g.add(p, c).unwrap();
            let s = g.sub(a, p).unwrap();
            let m = g.mul(s, p).unwrap();
            g.mul(m, p).unwrap()
        });
    }

    #[test]
    fn grad_maximum_both_sides() {
        // p against a constant that is larger for some elements and smaller
        // for others; values are far from ties so FD is clean.
        fd_check(&[5], vec![-2.0, -0.5, 0.4, 1.3, 2.2], |g, p| {
            let c = g.input(Tensor::new(vec![5], vec![0.0; 5]).unwrap()).unwrap();
            g.maximum(p, c).unwrap()
        });
    }

    #[test]
    fn grad_scale_and_relu() {
        fd_check(&[4], vec![-1.5, -0.3, 0.6, 2.0], |g, p| {
            let s = g.scale(p, -2.5).unwrap();
            g.relu(s).unwrap()
        });
    }

    #[test]
    fn grad_matmul_left_and_right() {
        // p appears as the left operand, and via its transpose as the right
        // operand, so both matmul gradient paths are exercised.
        fd_check(&[2, 3], varied(6, 0.0), |g, p| {
            let c = g.input(Tensor::new(vec![3, 2], varied(6, 0.7)).unwrap()).unwrap();
            let left = g.matmul(p, c).unwrap(); // [2x2]
            let pt = g.transpose(p).unwrap(); // [3x2]
            g.matmul(pt, left).unwrap() // [3x2]
        });
    }

    #[test]
    fn grad_softmax_rank1() {
        fd_check(&[4], vec![0.1, 1.2, -0.7, 0.4], |g, p| g.softmax(p, 0).unwrap());
    }

    #[test]
    fn grad_softmax_rows_and_cols() {
        fd_check(&[2, 3], varied(6, 0.5), |g, p| g.softmax(p, 1).unwrap());
        fd_check(&[2, 3], varied(6, 0.5), |g, p| g.softmax(p, 0).unwrap());
    }

    #[test]
    fn grad_layer_norm_x_gain_bias() {
        // x path
        fd_check(&[3, 2], varied(6, 0.9), |g, p| {
            let gain = g.input(Tensor::new(vec![3], vec![1.1, 0.9, 1.3]).unwrap()).unwrap();
            let bias = g.input(Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap()).unwrap();
            g.layer_norm_cols(p, gain, bias, 1e-5).unwrap()
        });
        // gain and bias paths
        fd_check(&[3], vec![1.2, 0.8, 1.0], |g, p| {
            let x = g.input(Tensor::new(vec![3, 2], varied(6, 0.4)).unwrap()).unwrap();
            let bias = g.input(Tensor::new(vec![3], vec![0.05, 0.0, -0.1]).unwrap()).unwrap();
            g.layer_norm_cols(x, p, bias, 1e-5).unwrap()
        });
        fd_check(&[3], vec![0.0, 0.1, -0.2], |g, p| {
            let x = g.input(Tensor::new(vec![3, 2], varied(6, 1.4)).unwrap()).unwrap();
            let gain = g.input(Tensor::new(vec![3], vec![1.0, 1.2, 0.8]).unwrap()).unwrap();
            g.layer_norm_cols(x, gain, p, 1e-5).unwrap()
        });
    }

    #[test]
    fn grad_conv2d_x_w_b() {
        let x_data = varied(2 * 4 * 4, 0.3);
        let w_data = varied(3 * 2 * 3 * 3, 0.6);
        // input path
        fd_check(&[2, 4, 4], x_data.clone(), |g, p| {
            let w = g.input(Tensor::new(vec![3, 2, 3, 3], w_data.clone()).unwrap()).unwrap();
            let b = g.input(Tensor::new(vec![3], vec![0.1, -0.1, 0.0]).unwrap()).unwrap();
            g.conv2d(p, w, b, 1, 1).unwrap()
        });
        // kernel path, with stride 2
        fd_check(&[3, 2, 3, 3], w_data.clone(), |g, p| {
            let x = g.input(Tensor::new(vec![2, 4, 4], x_data.clone()).unwrap()).unwrap();
            let b = g.input(Tensor::new(vec![3], vec![0.0, 0.2, -0.2]).unwrap()).unwrap();
            g.conv2d(x, p, b, 2, 1).unwrap()
        });
        // bias path
        fd_check(&[3], vec![0.4, -0.3, 0.2], |g, p| {
            let x = g.input(Tensor::new(vec![2, 4, 4], x_data.clone()).unwrap()).unwrap();
            let w = g.input(Tensor::new(vec![3, 2, 3, 3], w_data.clone()).unwrap()).unwrap();
            g.conv2d(x, w, p, 1, 0).unwrap()
        });
    }

    #[test]
    fn grad_embed_row_concat_broadcast() {
        fd_check(&[5, 3], varied(15, 0.8), |g, p| {
            let r1 = g.embed_row(p, 1).unwrap();
            let r3 = g.embed_row(p, 3).unwrap();
            let cat = g.concat0(&[r1, r3]).unwrap(); // [6]
            g.broadcast_col(cat, 2).unwrap() // [6x2]
        });
    }

    #[test]
    fn grad_add_col_reshape_sum_mean() {
        fd_check(&[3], vec![0.3, -0.6, 0.9], |g, p| {
            let x = g.input(Tensor::new(vec![3, 4], varied(12, 0.25)).unwrap()).unwrap();
            let y = g.add_col(x, p).unwrap();
            g.reshape(y, vec![2, 6]).unwrap()
        });
        // sum and mean as inner reductions feeding the weighted head
        fd_check(&[2, 2], varied(4, 1.9), |g, p| {
            let s = g.sum(p).unwrap();
            let s = g.reshape(s, vec![1]).unwrap();
            let m = g.mean(p).unwrap();
            let m = g.reshape(m, vec![1]).unwrap();
            g.concat0(&[s, m]).unwrap()
        });
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::new();
        let big = g.input(Tensor::filled(&[2], 1e308)).unwrap();
        let r = g.add(big, big);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param("used", Tensor::scalar(2.0)).unwrap();
        let _unused = g.param("unused", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let loss = g.mul(used, used).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads["used"].data()[0] - 4.0).abs() < 1e-12);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // loss = p*p + 3p -> d/dp = 2p + 3
        let mut g = Graph::new();
        let p = g.param("p", Tensor::scalar(1.5)).unwrap();
        let sq = g.mul(p, p).unwrap();
        let tri = g.scale(p, 3.0).unwrap();
        let loss = g.add(sq, tri).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads["p"].data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 4], varied(12, 2.2)).unwrap()).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for i in 0..3 {
            let row: f64 = (0..4).map(|j| v.at2(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let expect = [
            0.09003057317038046,
            0.24472847105479767,
            0.6652409557748219,
        ];
        for (a, e) in g.value(s).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_known_3x3_kernel() {
        // 1x1x3x3 sum kernel over a 1x3x3 input without padding gives the
        // total of all cells.
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap()).unwrap();
        let w = g.input(Tensor::filled(&[1, 1, 3, 3], 1.0)).unwrap();
        let b = g.input(Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert!((g.value(y).data()[0] - 45.5).abs() < 1e-12);
    }

    #[test]
    fn conv2d_padding_keeps_size() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 5, 7], 1.0)).unwrap();
        let w = g.input(Tensor::filled(&[4, 2, 3, 3], 0.1)).unwrap();
        let b = g.input(Tensor::zeros(&[4])).unwrap();
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 5, 7]);
    }

    #[test]
    fn maximum_tie_gradient_goes_to_first() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(1.0)).unwrap();
        let b = g.param("b", Tensor::scalar(1.0)).unwrap();
        let m = g.maximum(a, b).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads["a"].data(), &[1.0]);
        assert_eq!(grads["b"].data(), &[0.0]);
    }
}
