//! Wengert tape: records primitive operations and replays them in reverse.
//!
//! Backward passes are themselves built out of tape primitives, so in
//! [`Mode::HigherOrder`] the gradient nodes returned by [`Tape::grad_nodes`]
//! are ordinary differentiable values and can be differentiated again. In
//! [`Mode::FirstOrder`] the same machinery runs but `grad_nodes` is refused,
//! which keeps the contract explicit.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Whether the tape supports differentiating its own backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FirstOrder,
    HigherOrder,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    BroadcastScalar(NodeId),
    Reshape(NodeId),
    Unfold {
        input: NodeId,
        kh: usize,
        kw: usize,
    },
    Fold {
        input: NodeId,
        kh: usize,
        kw: usize,
    },
    /// Flat [d0, d1, rest] -> [d1, d0, rest].
    Swap01 {
        input: NodeId,
        d0: usize,
        d1: usize,
        rest: usize,
    },
    MaxPool2 {
        input: NodeId,
        /// Flat index into the input for each output cell.
        indices: Vec<usize>,
    },
    ScatterPool {
        input: NodeId,
        indices: Vec<usize>,
    },
    GatherPool {
        input: NodeId,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation recorder with reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape {
    mode: Mode,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            mode,
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn first_order() -> Self {
        Tape::new(Mode::FirstOrder)
    }

    pub fn higher_order() -> Self {
        Tape::new(Mode::HigherOrder)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient attached by [`Tape::backward`], if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Clear attached gradients so `backward` may run again.
    pub fn reset_backward(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), value, rg))
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), value, rg))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Relu(a), value, rg))
    }

    /// Natural log. Non-positive inputs are a domain error; callers that
    /// want `0·log 0 = 0` semantics clamp first (see the loss builders).
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                what: format!("non-positive input {v}"),
            });
        }
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Log(a), value, rg))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                what: format!("negative input {v}"),
            });
        }
        let data = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sqrt(a), value, rg))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::InvalidParameter {
                name: "clamp",
                why: format!("lo {lo} > hi {hi}"),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.min(hi).max(lo))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Clamp(a, lo, hi), value, rg))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    // ── softmax / reductions ────────────────────────────────────────────

    /// Row-wise stable softmax over a 2-D tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (n, k) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &av[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * k..(i + 1) * k];
            let mut z = 0.0;
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a), value, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(total), rg))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Fill `shape` with the single element of a scalar tensor.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).item()?;
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastScalar(a), Tensor::filled(shape, v), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Flattened dot product of two same-shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Sum of squared elements.
    pub fn sum_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let p = self.mul(a, a)?;
        self.sum(p)
    }

    // ── convolution support ─────────────────────────────────────────────

    /// im2col: `[N,C,H,W]` -> `[C*kh*kw, N*OH*OW]` for a valid, stride-1 window.
    pub fn unfold(&mut self, x: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "unfold",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::ShapeMismatch {
                op: "unfold (kernel larger than input)",
                lhs: s.to_vec(),
                rhs: vec![kh, kw],
            });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let cols = n * oh * ow;
        let rows = c * kh * kw;
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = ci * kh * kw + ki * kw + kj;
                    for ni in 0..n {
                        for oi in 0..oh {
                            let src = ((ni * c + ci) * h + oi + ki) * w + kj;
                            let dst = r * cols + (ni * oh + oi) * ow;
                            out[dst..dst + ow].copy_from_slice(&xv[src..src + ow]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Unfold { input: x, kh, kw }, value, rg))
    }

    /// Adjoint of [`Tape::unfold`]: scatter-add columns back into `[N,C,H,W]`.
    fn fold(&mut self, v: NodeId, kh: usize, kw: usize, out_shape: [usize; 4]) -> Result<NodeId> {
        let [n, c, h, w] = out_shape;
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let cols = n * oh * ow;
        let vv = self.value(v).data();
        let mut out = vec![0.0; n * c * h * w];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = ci * kh * kw + ki * kw + kj;
                    for ni in 0..n {
                        for oi in 0..oh {
                            let dst = ((ni * c + ci) * h + oi + ki) * w + kj;
                            let src = r * cols + (ni * oh + oi) * ow;
                            for j in 0..ow {
                                out[dst + j] += vv[src + j];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(out_shape.to_vec(), out)?;
        let rg = self.rg(v);
        Ok(self.push(Op::Fold { input: v, kh, kw }, value, rg))
    }

    /// Treat the input as flat `[d0,d1,rest]` and swap the first two axes.
    fn swap01(&mut self, a: NodeId, d0: usize, d1: usize, rest: usize) -> Result<NodeId> {
        if self.value(a).numel() != d0 * d1 * rest {
            return Err(Error::ShapeMismatch {
                op: "swap01",
                lhs: self.shape(a).to_vec(),
                rhs: vec![d0, d1, rest],
            });
        }
        let av = self.value(a).data();
        let mut out = vec![0.0; d0 * d1 * rest];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * rest;
                let dst = (j * d0 + i) * rest;
                out[dst..dst + rest].copy_from_slice(&av[src..src + rest]);
            }
        }
        let value = Tensor::new(vec![d1, d0, rest], out)?;
        let rg = self.rg(a);
        Ok(self.push(
            Op::Swap01 {
                input: a,
                d0,
                d1,
                rest,
            },
            value,
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[N,C,H,W]`; odd trailing rows and
    /// columns are dropped. Ties break toward the first cell in scan order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut indices = vec![0usize; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + (2 * oi + di) * w + 2 * oj + dj;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * oh + oi) * ow + oj;
                        out[o] = best;
                        indices[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool2 { input: x, indices }, value, rg))
    }

    fn scatter_pool(&mut self, v: NodeId, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<NodeId> {
        let vv = self.value(v).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        for (o, &idx) in vv.iter().zip(&indices) {
            out[idx] += o;
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(v);
        Ok(self.push(Op::ScatterPool { input: v, indices }, value, rg))
    }

    fn gather_pool(&mut self, v: NodeId, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<NodeId> {
        let vv = self.value(v).data();
        let out: Vec<f64> = indices.iter().map(|&i| vv[i]).collect();
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(v);
        Ok(self.push(Op::GatherPool { input: v, indices }, value, rg))
    }

    /// Valid-padding, stride-1 2-D convolution plus per-channel bias.
    ///
    /// `x: [N,C,H,W]`, `kernel: [OC,C,KH,KW]`, `bias: [OC]` -> `[N,OC,OH,OW]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let ks = self.shape(kernel).to_vec();
        let xs = self.shape(x).to_vec();
        if ks.len() != 4 || xs.len() != 4 || ks[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (oc, c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let cols = n * oh * ow;

        let u = self.unfold(x, kh, kw)?; // [C*kh*kw, cols]
        let km = self.reshape(kernel, &[oc, c * kh * kw])?;
        let z = self.matmul(km, u)?; // [OC, cols]
        let bcol = self.reshape(bias, &[oc, 1])?;
        let ones_row = self.constant(Tensor::ones(&[1, cols]));
        let bmat = self.matmul(bcol, ones_row)?;
        let zb = self.add(z, bmat)?;
        let sw = self.swap01(zb, oc, n, oh * ow)?; // [N, OC, OH*OW]
        self.reshape(sw, &[n, oc, oh, ow])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Run a backward pass from a scalar loss, attaching gradients to every
    /// `requires_grad` node. May be called once per tape (see
    /// [`Tape::reset_backward`]).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidParameter {
                name: "tape",
                why: "backward on an empty tape".into(),
            });
        }
        let frontier = self.nodes.len();
        let adjoints = self.build_adjoints(loss)?;
        for id in 0..frontier {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let grad = match adjoints.get(id).copied().flatten() {
                Some(a) => self.nodes[a.0].value.clone(),
                None => Tensor::zeros(self.nodes[id].value.shape()),
            };
            self.nodes[id].grad = Some(grad);
        }
        self.backward_done = true;
        Ok(())
    }

    /// Differentiate a scalar with respect to `wrt`, returning gradients as
    /// new tape nodes that can themselves be differentiated. Higher-order
    /// mode only.
    pub fn grad_nodes(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.mode != Mode::HigherOrder {
            return Err(Error::HigherOrderRequired);
        }
        let adjoints = self.build_adjoints(loss)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match adjoints.get(w.0).copied().flatten() {
                Some(a) => a,
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    self.constant(z)
                }
            };
            out.push(id);
        }
        Ok(out)
    }

    /// Reverse sweep from `loss`, building adjoint values as tape nodes.
    /// Returns, for each node id below `loss`, the node holding its adjoint.
    fn build_adjoints(&mut self, loss: NodeId) -> Result<Vec<Option<NodeId>>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let frontier = loss.0 + 1;
        let mut adjoints: Vec<Option<NodeId>> = vec![None; frontier];
        let seed = self.constant(Tensor::scalar(1.0));
        adjoints[loss.0] = Some(seed);

        for id in (0..frontier).rev() {
            let g = match adjoints[id] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out = NodeId(id);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoints, a, g)?;
                    self.accumulate(&mut adjoints, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoints, a, g)?;
                    if self.rg(b) {
                        let nb = self.scale(g, -1.0)?;
                        self.accumulate(&mut adjoints, b, nb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let da = self.mul(g, b)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.rg(b) {
                        let db = self.mul(g, a)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::Div(a, b) => {
                    if self.rg(a) {
                        let da = self.div(g, b)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.rg(b) {
                        let q = self.div(out, b)?; // a / b^2
                        let gq = self.mul(g, q)?;
                        let db = self.scale(gq, -1.0)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(a) {
                        let da = self.scale(g, c)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Matmul(a, b) => {
                    if self.rg(a) {
                        let bt = self.transpose(b)?;
                        let da = self.matmul(g, bt)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                    if self.rg(b) {
                        let at = self.transpose(a)?;
                        let db = self.matmul(at, g)?;
                        self.accumulate(&mut adjoints, b, db)?;
                    }
                }
                Op::Transpose(a) => {
                    if self.rg(a) {
                        let da = self.transpose(g)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Relu(a) => {
                    if self.rg(a) {
                        let mask: Vec<f64> = self.nodes[a.0]
                            .value
                            .data()
                            .iter()
                            .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                            .collect();
                        let m = Tensor::new(self.shape(a).to_vec(), mask)?;
                        let mid = self.constant(m);
                        let da = self.mul(g, mid)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Log(a) => {
                    if self.rg(a) {
                        let da = self.div(g, a)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Sqrt(a) => {
                    if self.rg(a) {
                        let q = self.div(g, out)?;
                        let da = self.scale(q, 0.5)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.rg(a) {
                        let mask: Vec<f64> = self.nodes[a.0]
                            .value
                            .data()
                            .iter()
                            .map(|v| if *v > lo && *v < hi { 1.0 } else { 0.0 })
                            .collect();
                        let m = Tensor::new(self.shape(a).to_vec(), mask)?;
                        let mid = self.constant(m);
                        let da = self.mul(g, mid)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.rg(a) {
                        // dx = s * (g - rowsum(g*s))
                        let k = self.shape(out)[1];
                        let gs = self.mul(g, out)?;
                        let col = self.constant(Tensor::ones(&[k, 1]));
                        let rs = self.matmul(gs, col)?; // [n,1]
                        let row = self.constant(Tensor::ones(&[1, k]));
                        let bc = self.matmul(rs, row)?; // [n,k]
                        let diff = self.sub(g, bc)?;
                        let da = self.mul(diff, out)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Sum(a) => {
                    if self.rg(a) {
                        let shape = self.shape(a).to_vec();
                        let da = self.broadcast_scalar(g, &shape)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::BroadcastScalar(a) => {
                    if self.rg(a) {
                        let da = self.sum(g)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Reshape(a) => {
                    if self.rg(a) {
                        let shape = self.shape(a).to_vec();
                        let da = self.reshape(g, &shape)?;
                        self.accumulate(&mut adjoints, a, da)?;
                    }
                }
                Op::Unfold { input, kh, kw } => {
                    if self.rg(input) {
                        let s = self.shape(input);
                        let out_shape = [s[0], s[1], s[2], s[3]];
                        let da = self.fold(g, kh, kw, out_shape)?;
                        self.accumulate(&mut adjoints, input, da)?;
                    }
                }
                Op::Fold { input, kh, kw, .. } => {
                    if self.rg(input) {
                        let da = self.unfold(g, kh, kw)?;
                        self.accumulate(&mut adjoints, input, da)?;
                    }
                }
                Op::Swap01 { input, d0, d1, rest } => {
                    if self.rg(input) {
                        let sw = self.swap01(g, d1, d0, rest)?;
                        let shape = self.shape(input).to_vec();
                        let da = self.reshape(sw, &shape)?;
                        self.accumulate(&mut adjoints, input, da)?;
                    }
                }
                Op::MaxPool2 { input, indices } => {
                    if self.rg(input) {
                        let shape = self.shape(input).to_vec();
                        let da = self.scatter_pool(g, indices, shape)?;
                        self.accumulate(&mut adjoints, input, da)?;
                    }
                }
                Op::ScatterPool { input, indices, .. } => {
                    if self.rg(input) {
                        let shape = self.shape(input).to_vec();
                        let da = self.gather_pool(g, indices, shape)?;
                        self.accumulate(&mut adjoints, input, da)?;
                    }
                }
                Op::GatherPool { input, indices } => {
                    if self.rg(input) {
                        let shape = self.shape(input).to_vec();
                        let da = self.scatter_pool(g, indices, shape)?;
                        self.accumulate(&mut adjoints, input, da)?;
                    }
                }
            }
        }
        Ok(adjoints)
    }

    fn accumulate(
        &mut self,
        adjoints: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        if !self.rg(target) {
            return Ok(());
        }
        adjoints[target.0] = Some(match adjoints[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }
}
