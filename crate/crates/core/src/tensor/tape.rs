//! The recording tape and the backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnKind {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Softplus,
    Square,
    Neg,
    Scale(f64),
    AddConst(f64),
}

impl UnKind {
    fn name(&self) -> &'static str {
        match self {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Tanh => "tanh",
            UnKind::LeakyRelu(_) => "leaky_relu",
            UnKind::Softplus => "softplus",
            UnKind::Square => "square",
            UnKind::Neg => "neg",
            UnKind::Scale(_) => "scale",
            UnKind::AddConst(_) => "add_const",
        }
    }
}

/// A recorded primitive. Input tensors are stored directly (cheap Arc
/// clones); that is the "saved forward values" the backward rules read.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Binary { kind: BinKind, a: Tensor, b: Tensor },
    Unary { kind: UnKind, x: Tensor },
    SumAll { x: Tensor },
    MeanAll { x: Tensor },
    SumAxis { x: Tensor, axis: usize },
    MeanAxis { x: Tensor, axis: usize },
    ExpandRows { x: Tensor, rows: usize },
    ConcatCols { a: Tensor, b: Tensor },
    RowGather { x: Tensor, idx: Arc<Vec<usize>> },
    LogSoftmax { x: Tensor },
    GradGate { x: Tensor, mask: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// Output value of the op, shared with the tensor handed to the caller.
    value: Arc<Vec<f64>>,
}

/// Tape of recorded primitive ops, in topological order by construction.
///
/// One tape per forward pass; it is rebuilt each minibatch. Ops whose inputs
/// are all constants are computed without recording, so running a model whose
/// parameters were never registered with [`Tape::leaf`] does plain inference.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Divergent sigma values are the usual failure mode of this model
    /// class, so finiteness checking is on unless explicitly disabled.
    pub fn with_finite_check(check: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: check,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a tracked leaf (a parameter or any tensor whose
    /// gradient will be read). Returns a tracked copy sharing the buffer.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.data_arc());
        Tensor::with_node(t.shape().to_vec(), t.data_arc(), id)
    }

    fn push(&mut self, op: Op, value: Arc<Vec<f64>>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    fn finish(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<Tensor> {
        if self.check_finite && !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let tracked = match &op {
            Op::Leaf => true,
            Op::Matmul { a, b }
            | Op::Binary { a, b, .. }
            | Op::ConcatCols { a, b } => a.node.is_some() || b.node.is_some(),
            Op::Unary { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::ExpandRows { x, .. }
            | Op::RowGather { x, .. }
            | Op::LogSoftmax { x }
            | Op::GradGate { x, .. } => x.node.is_some(),
        };
        let data = Arc::new(data);
        if tracked {
            let id = self.push(op, data.clone());
            Ok(Tensor::with_node(shape, data, id))
        } else {
            Ok(Tensor {
                shape,
                data,
                node: None,
            })
        }
    }

    // ---- primitive ops ---------------------------------------------------

    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        self.finish(
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            vec![m, n],
            out,
            "matmul",
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Div, a, b)
    }

    /// Broadcasting is restricted to scalar-vs-tensor and exact-shape pairs;
    /// anything else is a shape error rather than a silent rule.
    fn binary(&mut self, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        if !a.same_shape(b) && !a.is_scalar() && !b.is_scalar() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (shape, n) = if a.is_scalar() && !b.is_scalar() {
            (b.shape().to_vec(), b.numel())
        } else {
            (a.shape().to_vec(), a.numel())
        };
        let av = a.data();
        let bv = b.data();
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (pick(av, i), pick(bv, i));
            out.push(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            });
        }
        self.finish(
            Op::Binary {
                kind,
                a: a.clone(),
                b: b.clone(),
            },
            shape,
            out,
            name,
        )
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Result<Tensor> {
        self.unary(UnKind::LeakyRelu(slope), x)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Softplus, x)
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Square, x)
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(UnKind::Neg, x)
    }

    /// Multiply by a plain constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(UnKind::Scale(c), x)
    }

    /// Add a plain constant.
    pub fn add_const(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(UnKind::AddConst(c), x)
    }

    fn unary(&mut self, kind: UnKind, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| match kind {
                UnKind::Exp => v.exp(),
                UnKind::Log => v.ln(),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Tanh => v.tanh(),
                UnKind::LeakyRelu(s) => {
                    if v >= 0.0 {
                        v
                    } else {
                        s * v
                    }
                }
                UnKind::Softplus => softplus(v),
                UnKind::Square => v * v,
                UnKind::Neg => -v,
                UnKind::Scale(c) => c * v,
                UnKind::AddConst(c) => v + c,
            })
            .collect();
        self.finish(
            Op::Unary { kind, x: x.clone() },
            x.shape().to_vec(),
            out,
            kind.name(),
        )
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        self.finish(Op::SumAll { x: x.clone() }, vec![], vec![s], "sum")
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.finish(Op::MeanAll { x: x.clone() }, vec![], vec![s], "mean")
    }

    /// Reduce one axis of a rank-2 tensor.
    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (shape, out) = reduce_axis(x, axis, false)?;
        self.finish(Op::SumAxis { x: x.clone(), axis }, shape, out, "sum_axis")
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (shape, out) = reduce_axis(x, axis, true)?;
        self.finish(Op::MeanAxis { x: x.clone(), axis }, shape, out, "mean_axis")
    }

    /// Tile a vector into `rows` identical rows. The explicit expansion that
    /// stands in for row broadcasting.
    pub fn expand_rows(&mut self, x: &Tensor, rows: usize) -> Result<Tensor> {
        if x.rank() != 1 {
            return Err(Error::shape("expand_rows", format!("expected vector, got {:?}", x.shape())));
        }
        let n = x.numel();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        self.finish(
            Op::ExpandRows { x: x.clone(), rows },
            vec![rows, n],
            out,
            "expand_rows",
        )
    }

    /// Concatenate two rank-2 tensors along the feature (column) axis.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
        }
        self.finish(
            Op::ConcatCols {
                a: a.clone(),
                b: b.clone(),
            },
            vec![m, p + q],
            out,
            "concat_cols",
        )
    }

    /// Pick one column per row: `out[i] = x[i, idx[i]]`.
    pub fn row_gather(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if x.rank() != 2 || idx.len() != x.shape()[0] {
            return Err(Error::shape(
                "row_gather",
                format!("{:?} with {} indices", x.shape(), idx.len()),
            ));
        }
        let cols = x.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::shape("row_gather", format!("index {} >= {} columns", bad, cols)));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x.at2(i, j)).collect();
        self.finish(
            Op::RowGather {
                x: x.clone(),
                idx: Arc::new(idx.to_vec()),
            },
            vec![idx.len()],
            out,
            "row_gather",
        )
    }

    /// Row-wise log-softmax of a rank-2 tensor, stabilized by the row max.
    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::shape("log_softmax", format!("{:?}", x.shape())));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        self.finish(Op::LogSoftmax { x: x.clone() }, vec![m, n], out, "log_softmax")
    }

    /// Identity in the forward direction; multiplies the gradient by a
    /// constant 0/1 mask on the way back. The mask is either the same shape
    /// as `x`, a scalar, or one value per row of a rank-2 `x`.
    pub fn grad_gate(&mut self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if !mask_broadcastable(x, mask) {
            return Err(Error::shape(
                "grad_gate",
                format!("mask {:?} not broadcastable to {:?}", mask.shape(), x.shape()),
            ));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("grad_gate mask entries must be 0 or 1".into()));
        }
        if mask.node().is_some() {
            return Err(Error::Domain("grad_gate mask must be a constant".into()));
        }
        self.finish(
            Op::GradGate {
                x: x.clone(),
                mask: mask.clone(),
            },
            x.shape().to_vec(),
            x.data().to_vec(),
            "grad_gate",
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Does not consume or mutate the tape,
    /// so repeated sweeps from the same loss give bit-identical gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_node = loss.node().ok_or(Error::NotOnTape)?;
        if !loss.is_scalar() {
            return Err(Error::LossNotScalar);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for id in (0..=loss_node).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        if self.check_finite {
            for g in grads.iter().flatten() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if let Some(slot) = grad_slot(a, grads) {
                    // dA = dC . B^T
                    for i in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += g[i * n + c] * b.data()[j * n + c];
                            }
                            slot[i * k + j] += acc;
                        }
                    }
                }
                if let Some(slot) = grad_slot(b, grads) {
                    // dB = A^T . dC
                    for i in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += a.data()[r * k + i] * g[r * n + j];
                            }
                            slot[i * n + j] += acc;
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let av = a.data();
                let bv = b.data();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if let Some(slot) = grad_slot(a, grads) {
                    for i in 0..g.len() {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => g[i],
                            BinKind::Mul => g[i] * pick(bv, i),
                            BinKind::Div => g[i] / pick(bv, i),
                        };
                        accumulate(slot, i, d);
                    }
                }
                if let Some(slot) = grad_slot(b, grads) {
                    for i in 0..g.len() {
                        let d = match kind {
                            BinKind::Add => g[i],
                            BinKind::Sub => -g[i],
                            BinKind::Mul => g[i] * pick(av, i),
                            BinKind::Div => {
                                let bi = pick(bv, i);
                                -g[i] * pick(av, i) / (bi * bi)
                            }
                        };
                        accumulate(slot, i, d);
                    }
                }
            }
            Op::Unary { kind, x } => {
                if let Some(slot) = grad_slot(x, grads) {
                    let y = &node.value;
                    for i in 0..g.len() {
                        let d = match kind {
                            UnKind::Exp => g[i] * y[i],
                            UnKind::Log => g[i] / x.data()[i],
                            UnKind::Sigmoid => g[i] * y[i] * (1.0 - y[i]),
                            UnKind::Tanh => g[i] * (1.0 - y[i] * y[i]),
                            UnKind::LeakyRelu(s) => {
                                if x.data()[i] >= 0.0 {
                                    g[i]
                                } else {
                                    g[i] * s
                                }
                            }
                            UnKind::Softplus => g[i] * sigmoid(x.data()[i]),
                            UnKind::Square => g[i] * 2.0 * x.data()[i],
                            UnKind::Neg => -g[i],
                            UnKind::Scale(c) => g[i] * c,
                            UnKind::AddConst(_) => g[i],
                        };
                        slot[i] += d;
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(slot) = grad_slot(x, grads) {
                    for v in slot.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if let Some(slot) = grad_slot(x, grads) {
                    let d = g[0] / x.numel() as f64;
                    for v in slot.iter_mut() {
                        *v += d;
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let denom = if matches!(node.op, Op::MeanAxis { .. }) {
                    if *axis == 0 {
                        m as f64
                    } else {
                        n as f64
                    }
                } else {
                    1.0
                };
                if let Some(slot) = grad_slot(x, grads) {
                    for r in 0..m {
                        for c in 0..n {
                            let gi = if *axis == 0 { g[c] } else { g[r] };
                            slot[r * n + c] += gi / denom;
                        }
                    }
                }
            }
            Op::ExpandRows { x, rows } => {
                if let Some(slot) = grad_slot(x, grads) {
                    let n = x.numel();
                    for r in 0..*rows {
                        for c in 0..n {
                            slot[c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if let Some(slot) = grad_slot(a, grads) {
                    for r in 0..m {
                        for c in 0..p {
                            slot[r * p + c] += g[r * (p + q) + c];
                        }
                    }
                }
                if let Some(slot) = grad_slot(b, grads) {
                    for r in 0..m {
                        for c in 0..q {
                            slot[r * q + c] += g[r * (p + q) + p + c];
                        }
                    }
                }
            }
            Op::RowGather { x, idx } => {
                if let Some(slot) = grad_slot(x, grads) {
                    let cols = x.shape()[1];
                    for (i, &j) in idx.iter().enumerate() {
                        slot[i * cols + j] += g[i];
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if let Some(slot) = grad_slot(x, grads) {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    let y = &node.value;
                    for r in 0..m {
                        let gsum: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            slot[i] += g[i] - y[i].exp() * gsum;
                        }
                    }
                }
            }
            Op::GradGate { x, mask } => {
                if let Some(slot) = grad_slot(x, grads) {
                    let mv = mask.data();
                    if mv.len() == 1 {
                        for i in 0..g.len() {
                            slot[i] += g[i] * mv[0];
                        }
                    } else if mv.len() == x.numel() {
                        for i in 0..g.len() {
                            slot[i] += g[i] * mv[i];
                        }
                    } else {
                        // one mask entry per row
                        let n = x.numel() / mv.len();
                        for i in 0..g.len() {
                            slot[i] += g[i] * mv[i / n];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients for every reachable node of a tape, queried per tensor.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tracked tensor. `None` when the tensor is
    /// untracked or no gradient flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        t.node().and_then(|id| self.grads.get(id)?.as_deref())
    }

    /// Gradient for a tracked tensor, zeros when nothing flowed to it.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

fn grad_slot<'a>(t: &Tensor, grads: &'a mut [Option<Vec<f64>>]) -> Option<&'a mut Vec<f64>> {
    let id = t.node()?;
    Some(grads[id].get_or_insert_with(|| vec![0.0; t.numel()]))
}

/// Accumulate into a possibly-scalar slot: scalar operands collect the sum of
/// all elementwise partials.
fn accumulate(slot: &mut [f64], i: usize, d: f64) {
    if slot.len() == 1 {
        slot[0] += d;
    } else {
        slot[i] += d;
    }
}

fn reduce_axis(x: &Tensor, axis: usize, mean: bool) -> Result<(Vec<usize>, Vec<f64>)> {
    if x.rank() != 2 {
        return Err(Error::shape("reduce_axis", format!("expected rank 2, got {:?}", x.shape())));
    }
    if axis > 1 {
        return Err(Error::Axis { axis, rank: 2 });
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let (out_len, denom) = if axis == 0 {
        (n, m as f64)
    } else {
        (m, n as f64)
    };
    let mut out = vec![0.0; out_len];
    for r in 0..m {
        for c in 0..n {
            let o = if axis == 0 { c } else { r };
            out[o] += x.at2(r, c);
        }
    }
    if mean {
        for v in out.iter_mut() {
            *v /= denom;
        }
    }
    Ok((vec![out_len], out))
}

fn mask_broadcastable(x: &Tensor, mask: &Tensor) -> bool {
    if mask.is_scalar() || mask.same_shape(x) {
        return true;
    }
    // per-row mask for a rank-2 tensor: [m] or [m, 1]
    x.rank() == 2
        && x.shape()[0] == mask.numel()
        && (mask.rank() == 1 || (mask.rank() == 2 && mask.shape()[1] == 1))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..k {
            let av = a[i * k + j];
            if av == 0.0 {
                continue;
            }
            for c in 0..n {
                out[i * n + c] += av * b[j * n + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::grad_rel_err;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type BuildFn = dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>;

    fn run(build: &BuildFn, inputs: &[(Vec<usize>, Vec<f64>)]) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| tape.leaf(&Tensor::from_vec(data.clone(), shape).unwrap()))
            .collect();
        let loss = build(&mut tape, &leaves).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = leaves.iter().map(|l| grads.wrt_or_zeros(l)).collect();
        (loss.item(), g)
    }

    fn value_only(build: &BuildFn, inputs: &[(Vec<usize>, Vec<f64>)]) -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| tape.leaf(&Tensor::from_vec(data.clone(), shape).unwrap()))
            .collect();
        build(&mut tape, &leaves).unwrap().item()
    }

    /// Central-difference check of every input gradient.
    fn fd_check(build: &BuildFn, inputs: &[(Vec<usize>, Vec<f64>)]) {
        let eps = 1e-5;
        let (_, analytic) = run(build, inputs);
        for k in 0..inputs.len() {
            for i in 0..inputs[k].1.len() {
                let mut plus = inputs.to_vec();
                plus[k].1[i] += eps;
                let mut minus = inputs.to_vec();
                minus[k].1[i] -= eps;
                let num = (value_only(build, &plus) - value_only(build, &minus)) / (2.0 * eps);
                let err = grad_rel_err(analytic[k][i], num);
                assert!(
                    err < 1e-4,
                    "input {} element {}: analytic {} vs numerical {} (rel err {})",
                    k,
                    i,
                    analytic[k][i],
                    num,
                    err
                );
            }
        }
    }

    fn rand_data(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::matrix(&[[1.0], [1.0]]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert!(c.node().is_none(), "constant inputs must not record");
        assert!(tape.is_empty());
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(&[[1.0, 2.0]]);
        let b = Tensor::matrix(&[[1.0, 2.0]]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn unary_hand_values() {
        let mut tape = Tape::new();
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]);
        let lr = tape.leaky_relu(&x, 0.01).unwrap();
        assert_eq!(lr.data(), &[-0.01, 0.0, 2.0]);
        let sp = tape.softplus(&Tensor::scalar(0.0)).unwrap();
        assert!((sp.item() - 2.0f64.ln()).abs() < 1e-15);
        let sg = tape.sigmoid(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(sg.item(), 0.5);
    }

    #[test]
    fn softplus_extremes_stay_finite() {
        let mut tape = Tape::new();
        let y = tape.softplus(&Tensor::vector(&[-800.0, 800.0])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 800.0);
    }

    #[test]
    fn sum_axis_hand_values() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
        let rows = tape.sum_axis(&x, 0).unwrap();
        assert_eq!(rows.data(), &[4.0, 6.0]);
        let cols = tape.sum_axis(&x, 1).unwrap();
        assert_eq!(cols.data(), &[3.0, 7.0]);
        let m0 = tape.mean_axis(&x, 0).unwrap();
        assert_eq!(m0.data(), &[2.0, 3.0]);
        assert!(tape.sum_axis(&x, 2).is_err());
    }

    #[test]
    fn sum_equals_mean_times_numel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = rand_data(&mut rng, 12, -2.0, 2.0);
        let mut tape = Tape::new();
        let x = Tensor::from_vec(data, &[3, 4]).unwrap();
        let s = tape.sum_all(&x).unwrap().item();
        let m = tape.mean_all(&x).unwrap().item();
        assert!((s - m * 12.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_square_gradient() {
        let build: &BuildFn = &|tape, xs| {
            let y = tape.mul(&xs[0], &xs[0])?;
            tape.sum_all(&y)
        };
        let (val, grads) = run(build, &[(vec![3], vec![1.0, 2.0, 3.0])]);
        assert_eq!(val, 14.0);
        assert_eq!(grads[0], vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_gate_identity_forward_masked_backward() {
        let build: &BuildFn = &|tape, xs| {
            let mask = Tensor::vector(&[1.0, 0.0]);
            let gated = tape.grad_gate(&xs[0], &mask)?;
            tape.sum_all(&gated)
        };
        let (val, grads) = run(build, &[(vec![2], vec![3.0, 5.0])]);
        assert_eq!(val, 8.0);
        assert_eq!(grads[0], vec![1.0, 0.0]);
    }

    #[test]
    fn grad_gate_per_row_mask() {
        let build: &BuildFn = &|tape, xs| {
            let mask = Tensor::matrix(&[[1.0], [0.0]]);
            let gated = tape.grad_gate(&xs[0], &mask)?;
            tape.sum_all(&gated)
        };
        let (val, grads) = run(build, &[(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])]);
        assert_eq!(val, 10.0);
        assert_eq!(grads[0], vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_gate_rejects_bad_masks() {
        let mut tape = Tape::new();
        let x = Tensor::vector(&[1.0, 2.0]);
        assert!(tape.grad_gate(&x, &Tensor::vector(&[0.5, 1.0])).is_err());
        let tracked_mask = tape.leaf(&Tensor::vector(&[1.0, 0.0]));
        assert!(tape.grad_gate(&x, &tracked_mask).is_err());
        assert!(tape.grad_gate(&x, &Tensor::vector(&[1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn scalar_broadcast_accumulates() {
        let build: &BuildFn = &|tape, xs| {
            let y = tape.mul(&xs[0], &xs[1])?;
            tape.sum_all(&y)
        };
        let (val, grads) = run(
            build,
            &[(vec![], vec![2.0]), (vec![3], vec![1.0, 2.0, 3.0])],
        );
        assert_eq!(val, 12.0);
        assert_eq!(grads[0], vec![6.0]);
        assert_eq!(grads[1], vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut tape = Tape::new();
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn concat_and_gather_round_trip() {
        let build: &BuildFn = &|tape, xs| {
            let cat = tape.concat_cols(&xs[0], &xs[1])?;
            let picked = tape.row_gather(&cat, &[0, 2])?;
            tape.sum_all(&picked)
        };
        let a = (vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = (vec![2, 1], vec![5.0, 6.0]);
        let (val, grads) = run(build, &[a, b]);
        assert_eq!(val, 1.0 + 6.0);
        assert_eq!(grads[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(grads[1], vec![0.0, 1.0]);
    }

    #[test]
    fn row_gather_bounds_checked() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[1.0, 2.0]]);
        assert!(tape.row_gather(&x, &[2]).is_err());
        assert!(tape.row_gather(&x, &[0, 0]).is_err());
    }

    #[test]
    fn expand_rows_backward_sums() {
        let build: &BuildFn = &|tape, xs| {
            let tiled = tape.expand_rows(&xs[0], 3)?;
            tape.sum_all(&tiled)
        };
        let (val, grads) = run(build, &[(vec![2], vec![1.0, 2.0])]);
        assert_eq!(val, 9.0);
        assert_eq!(grads[0], vec![3.0, 3.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]);
        let y = tape.log_softmax(&x).unwrap();
        for r in 0..2 {
            let total: f64 = (0..3).map(|c| y.at2(r, c).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "row {} sums to {}", r, total);
        }
        assert!((y.at2(1, 0) - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_tracked_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[1.0, 2.0]));
        let y = tape.add(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::LossNotScalar)));
        let constant = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&constant), Err(Error::NotOnTape)));
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(rand_data(&mut rng, 6, -2.0, 2.0), &[2, 3]).unwrap());
        let w = tape.leaf(&Tensor::from_vec(rand_data(&mut rng, 3, -1.0, 1.0), &[3, 1]).unwrap());
        let h = tape.matmul(&x, &w).unwrap();
        let t = tape.tanh(&h).unwrap();
        let loss = tape.mean_all(&t).unwrap();
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        assert_eq!(g1.wrt(&x).unwrap(), g2.wrt(&x).unwrap());
        assert_eq!(g1.wrt(&w).unwrap(), g2.wrt(&w).unwrap());
    }

    #[test]
    fn nonfinite_forward_detected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[-1.0]));
        assert!(matches!(tape.log(&x), Err(Error::NonFinite(_))));
        let mut loose = Tape::with_finite_check(false);
        let x = loose.leaf(&Tensor::vector(&[-1.0]));
        assert!(loose.log(&x).is_ok());
    }

    #[test]
    fn untracked_graph_records_nothing() {
        let mut tape = Tape::new();
        let x = Tensor::vector(&[1.0, 2.0]);
        let y = tape.tanh(&x).unwrap();
        let z = tape.mul(&y, &y).unwrap();
        let _ = tape.sum_all(&z).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let build: &BuildFn = &|tape, xs| {
            let h = tape.matmul(&xs[0], &xs[1])?;
            let t = tape.tanh(&h)?;
            tape.sum_all(&t)
        };
        fd_check(
            build,
            &[
                (vec![2, 3], rand_data(&mut rng, 6, -2.0, 2.0)),
                (vec![3, 2], rand_data(&mut rng, 6, -2.0, 2.0)),
            ],
        );
    }

    #[test]
    fn fd_binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let build: &BuildFn = &|tape, xs| {
            let s = tape.add(&xs[0], &xs[1])?;
            let d = tape.sub(&xs[0], &xs[1])?;
            let p = tape.mul(&s, &d)?;
            let q = tape.div(&p, &xs[2])?;
            tape.sum_all(&q)
        };
        fd_check(
            build,
            &[
                (vec![4], rand_data(&mut rng, 4, -2.0, 2.0)),
                (vec![4], rand_data(&mut rng, 4, -2.0, 2.0)),
                (vec![4], rand_data(&mut rng, 4, 0.5, 2.0)),
            ],
        );
    }

    #[test]
    fn fd_scalar_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let build: &BuildFn = &|tape, xs| {
            let scaled = tape.mul(&xs[0], &xs[1])?;
            let shifted = tape.add(&scaled, &xs[2])?;
            let ratio = tape.div(&xs[1], &xs[3])?;
            let joined = tape.mul(&shifted, &ratio)?;
            tape.sum_all(&joined)
        };
        fd_check(
            build,
            &[
                (vec![], rand_data(&mut rng, 1, 0.5, 1.5)),
                (vec![2, 2], rand_data(&mut rng, 4, -2.0, 2.0)),
                (vec![], rand_data(&mut rng, 1, -1.0, 1.0)),
                (vec![], rand_data(&mut rng, 1, 1.0, 2.0)),
            ],
        );
    }

    #[test]
    fn fd_unary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let build: &BuildFn = &|tape, xs| {
            let a = tape.exp(&xs[0])?;
            let b = tape.log(&xs[1])?;
            let c = tape.sigmoid(&xs[0])?;
            let d = tape.tanh(&xs[1])?;
            let e = tape.softplus(&xs[0])?;
            let f = tape.square(&xs[1])?;
            let g = tape.neg(&xs[0])?;
            let h = tape.scale(&xs[1], 1.7)?;
            let i = tape.add_const(&xs[0], 0.3)?;
            let mut acc = tape.add(&a, &b)?;
            for t in [&c, &d, &e, &f, &g, &h, &i] {
                acc = tape.add(&acc, t)?;
            }
            tape.sum_all(&acc)
        };
        fd_check(
            build,
            &[
                (vec![5], rand_data(&mut rng, 5, -1.5, 1.5)),
                (vec![5], rand_data(&mut rng, 5, 0.2, 2.0)),
            ],
        );
    }

    #[test]
    fn fd_leaky_relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let build: &BuildFn = &|tape, xs| {
            let y = tape.leaky_relu(&xs[0], 0.01)?;
            let z = tape.square(&y)?;
            tape.sum_all(&z)
        };
        let data: Vec<f64> = rand_data(&mut rng, 6, 0.2, 2.0)
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v } else { -v })
            .collect();
        fd_check(build, &[(vec![6], data)]);
    }

    #[test]
    fn fd_reductions_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let build: &BuildFn = &|tape, xs| {
            let rows = tape.sum_axis(&xs[0], 0)?;
            let tiled = tape.expand_rows(&rows, 2)?;
            let mixed = tape.mul(&tiled, &xs[0])?;
            let cols = tape.mean_axis(&mixed, 1)?;
            let tiled2 = tape.expand_rows(&cols, 2)?;
            tape.mean_all(&tiled2)
        };
        fd_check(build, &[(vec![2, 3], rand_data(&mut rng, 6, -2.0, 2.0))]);
    }

    #[test]
    fn fd_log_softmax_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let build: &BuildFn = &|tape, xs| {
            let lp = tape.log_softmax(&xs[0])?;
            let picked = tape.row_gather(&lp, &[2, 0, 1])?;
            tape.sum_all(&picked)
        };
        fd_check(build, &[(vec![3, 4], rand_data(&mut rng, 12, -2.0, 2.0))]);
    }

    #[test]
    fn fd_concat_cols() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let build: &BuildFn = &|tape, xs| {
            let cat = tape.concat_cols(&xs[0], &xs[1])?;
            let sq = tape.square(&cat)?;
            tape.sum_all(&sq)
        };
        fd_check(
            build,
            &[
                (vec![2, 2], rand_data(&mut rng, 4, -2.0, 2.0)),
                (vec![2, 3], rand_data(&mut rng, 6, -2.0, 2.0)),
            ],
        );
    }

    #[test]
    fn fd_grad_gate_blocks_only_masked_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // the gated copy contributes value but no gradient on masked rows
        let build: &BuildFn = &|tape, xs| {
            let mask = Tensor::matrix(&[[1.0], [0.0], [1.0]]);
            let gated = tape.grad_gate(&xs[0], &mask)?;
            let sq = tape.square(&gated)?;
            tape.sum_all(&sq)
        };
        let data = rand_data(&mut rng, 6, 0.5, 2.0);
        let (_, grads) = run(build, &[(vec![3, 2], data.clone())]);
        assert_eq!(grads[0][2], 0.0);
        assert_eq!(grads[0][3], 0.0);
        assert!((grads[0][0] - 2.0 * data[0]).abs() < 1e-12);
    }
}
