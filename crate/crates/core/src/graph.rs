//! Define-by-run reverse-mode autodiff tape.
//!
//! Every forward pass builds a fresh [`Graph`]. Nodes are appended in
//! evaluation order, so the node list is always a valid topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of an elementwise op: another node or a scalar.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Node(NodeId),
    Scalar(f64),
}

impl From<NodeId> for Operand {
    fn from(id: NodeId) -> Self {
        Operand::Node(id)
    }
}

impl From<f64> for Operand {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Binary(BinaryOp, NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    ReduceMean(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: kernels::ConvGeom,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized input, kept for the backward pass.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics flow into the gradient (train mode) or are
        /// constants (eval mode).
        batch_stats: bool,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    scope: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    /// Gradient of any node that lies on a path from a leaf to the loss.
    /// Leaves the loss does not depend on return zeros.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients for all named parameters, in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.get(*id).map(|g| (name.as_str(), g)))
    }

    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.named().map(|(n, g)| (n.to_string(), g.clone())).collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A named differentiable leaf; its gradient is reported by
    /// [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        let name = match &self.scope {
            Some(scope) => format!("{scope}.{}", name.into()),
            None => name.into(),
        };
        self.params.push((name, id));
        id
    }

    /// Prefixes the names of parameters registered from now on with
    /// `scope.`; `None` clears it.
    pub fn set_scope(&mut self, scope: Option<&str>) {
        self.scope = scope.map(str::to_string);
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: NodeId, b: impl Into<Operand>) -> Result<NodeId> {
        match b.into() {
            Operand::Node(b) => {
                let f = match op {
                    BinaryOp::Add => |x: f64, y: f64| x + y,
                    BinaryOp::Sub => |x: f64, y: f64| x - y,
                    BinaryOp::Mul => |x: f64, y: f64| x * y,
                };
                let v = self.value(a).zip_map(self.value(b), f)?;
                let ng = self.needs(a) || self.needs(b);
                Ok(self.push(v, Op::Binary(op, a, b), ng))
            }
            Operand::Scalar(s) => match op {
                BinaryOp::Add => self.add_scalar(a, s),
                BinaryOp::Sub => self.add_scalar(a, -s),
                BinaryOp::Mul => self.mul_scalar(a, s),
            },
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        Ok(self.push(v, Op::AddScalar(a), ng))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        Ok(self.push(v, Op::MulScalar(a, s), ng))
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// `|x|`; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let v = Tensor::from_vec(&[m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(new_shape)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Flattens `[B, ...]` to `[B, prod(...)]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(Error::shape(format!("concat of {base:?} and {s:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &id in inputs {
                let block = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.value(id).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let v = Tensor::from_vec(&shape, out)?;
        let ng = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(v, Op::ReduceMean(a), ng)
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(format!(
                "linear with input {sx:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            1.0,
        );
        let v = Tensor::from_vec(&[batch, fout], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Linear { x, w, b }, ng))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geom = kernels::ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shape(format!(
                    "conv bias {:?} for {} output channels",
                    self.shape(b),
                    geom.out_ch
                )));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::from_vec(&geom.out_shape(), out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (out, shape, argmax) = kernels::maxpool_forward(self.value(x), window, stride)?;
        let v = Tensor::from_vec(&shape, out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::MaxPool { x, argmax }, ng))
    }

    /// Mean over the spatial dims: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("global pool expects rank 4, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self.value(x).data();
        let out = (0..b * c)
            .map(|i| data[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::from_vec(&[b, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::GlobalAvgPool(x), ng))
    }

    /// Per-channel normalization of `x: [B, C, H, W]`.
    ///
    /// With `stats = None` the batch statistics are computed (and
    /// differentiated through); the biased mean and variance are returned so
    /// the caller can update running estimates. With `Some((mean, var))` the
    /// given statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch norm expects rank 4, got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch norm affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => kernels::channel_stats(self.value(x)),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = kernels::batchnorm_forward(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = Tensor::from_vec(&s, out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((id, mean, var))
    }

    /// Multiplies by a fixed mask (already holding the inverted-dropout scale).
    pub fn dropout_mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout mask length"));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let v = Tensor::from_vec(self.shape(x), data)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Dropout { x, mask }, ng))
    }

    /// Which linear piece every ReLU, abs and max-pool on the tape is in.
    /// Two evaluations with equal patterns lie on one smooth piece.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&x| usize::from(x > 0.0))),
                Op::Abs(a) => out.extend(self.value(*a).data().iter().map(|&x| usize::from(x >= 0.0))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss` node. Does not modify the graph, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(root.shape(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        // Leaves the loss does not reach still get a (zero) gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |id: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.needs(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.accumulate(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let u = up.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    send(*a, up.clone(), grads);
                    send(*b, up.clone(), grads);
                }
                BinaryOp::Sub => {
                    send(*a, up.clone(), grads);
                    send(*b, up.map(|x| -x), grads);
                }
                BinaryOp::Mul => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        send(*a, up.zip_map(vb, |g, y| g * y).expect("shape"), grads);
                    }
                    if self.needs(*b) {
                        send(*b, up.zip_map(va, |g, x| g * x).expect("shape"), grads);
                    }
                }
            },
            Op::AddScalar(a) => send(*a, up.clone(), grads),
            Op::MulScalar(a, s) => send(*a, up.map(|g| g * s), grads),
            Op::Relu(a) => {
                let g = up
                    .zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("shape");
                send(*a, g, grads);
            }
            Op::Abs(a) => {
                let g = up
                    .zip_map(self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                send(*a, g, grads);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, u, false, vb.data(), true, &mut da, 0.0);
                    send(*a, Tensor::from_vec(&[m, k], da).expect("shape"), grads);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, u, false, &mut db, 0.0);
                    send(*b, Tensor::from_vec(&[k, n], db).expect("shape"), grads);
                }
            }
            Op::Reshape(a) => {
                send(*a, up.reshaped(self.shape(*a)).expect("shape"), grads);
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis + 1..].iter().product();
                let total: usize = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let block = self.shape(id)[*axis] * inner;
                    if self.needs(id) {
                        let mut g = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total + offset;
                            g.extend_from_slice(&u[start..start + block]);
                        }
                        send(id, Tensor::from_vec(self.shape(id), g).expect("shape"), grads);
                    }
                    offset += block;
                }
            }
            Op::ReduceMean(a) => {
                let n = self.value(*a).len();
                let g = u[0] / n as f64;
                send(*a, Tensor::from_vec(self.shape(*a), vec![g; n]).expect("shape"), grads);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    kernels::gemm(batch, fout, fin, u, false, vw.data(), false, &mut dx, 0.0);
                    send(*x, Tensor::from_vec(&[batch, fin], dx).expect("shape"), grads);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, batch, fin, u, true, vx.data(), false, &mut dw, 0.0);
                    send(*w, Tensor::from_vec(&[fout, fin], dw).expect("shape"), grads);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; fout];
                    for row in u.chunks(fout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    send(*b, Tensor::from_vec(&[fout], db).expect("shape"), grads);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let want_x = self.needs(*x);
                let want_w = self.needs(*w);
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    u,
                    want_x,
                    want_w,
                );
                if let Some(dx) = dx {
                    send(*x, Tensor::from_vec(self.shape(*x), dx).expect("shape"), grads);
                }
                if let Some(dw) = dw {
                    send(*w, Tensor::from_vec(self.shape(*w), dw).expect("shape"), grads);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let hw = geom.out_h * geom.out_w;
                        let mut db = vec![0.0; geom.out_ch];
                        for (i, plane) in u.chunks(hw).enumerate() {
                            db[i % geom.out_ch] += plane.iter().sum::<f64>();
                        }
                        send(*b, Tensor::from_vec(&[geom.out_ch], db).expect("shape"), grads);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (g, &src) in u.iter().zip(argmax) {
                    dx[src] += g;
                }
                send(*x, Tensor::from_vec(self.shape(*x), dx).expect("shape"), grads);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let dx = u
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g / hw as f64, hw))
                    .collect();
                send(*x, Tensor::from_vec(s, dx).expect("shape"), grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*x);
                let grads_bn = kernels::batchnorm_backward(
                    shape,
                    u,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                );
                if self.needs(*x) {
                    send(*x, Tensor::from_vec(shape, grads_bn.dx).expect("shape"), grads);
                }
                let c = shape[1];
                if self.needs(*gamma) {
                    send(*gamma, Tensor::from_vec(&[c], grads_bn.dgamma).expect("shape"), grads);
                }
                if self.needs(*beta) {
                    send(*beta, Tensor::from_vec(&[c], grads_bn.dbeta).expect("shape"), grads);
                }
            }
            Op::Dropout { x, mask } => {
                let g = u.iter().zip(mask).map(|(g, m)| g * m).collect();
                send(*x, Tensor::from_vec(self.shape(*x), g).expect("shape"), grads);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_relu_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4., 6.]);
        let r = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[3], &[1., 2., 3.]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn scalar_operand() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1., 2.]));
        let b = g.elementwise(BinaryOp::Sub, a, 0.5).unwrap();
        let c = g.elementwise(BinaryOp::Mul, b, 2.0).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3.]);
    }

    #[test]
    fn mul_backward_is_product_rule() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[2.]));
        let b = g.leaf(t(&[1], &[3.]));
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.]);
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.]);
        assert!(g.matmul(a, a).is_err());
        let v = g.constant(t(&[2], &[1., 2.]));
        assert!(g.matmul(v, b).is_err());
    }

    #[test]
    fn concat_axis1_and_backward_split() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1], &[1., 2.]));
        let b = g.leaf(t(&[2, 1], &[3., 4.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &[1., 3., 2., 4.]);
        let w = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.mul(c, w).unwrap();
        let l = g.reduce_mean(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.25, 0.75]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn concat_rejects_mismatched_dims() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1], &[1., 2.]));
        let b = g.leaf(t(&[3, 1], &[3., 4., 5.]));
        assert!(matches!(g.concat(&[a, b], 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reduce_mean_backward_distributes() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[2., 4., 6.]));
        let m = g.reduce_mean(a);
        assert_eq!(g.value(m).item(), 4.0);
        let grads = g.backward(m).unwrap();
        for &v in grads.get(a).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_of_leaf_gives_uniform_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::create(&[5], crate::tensor::Init::Constant(1.0)).unwrap());
        let l = g.reduce_mean(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.2; 5]);
        assert_eq!(grads.by_name()["w"].data(), &[0.2; 5]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1., -2.]));
        let v = g.leaf(t(&[2], &[5., 5.]));
        let r = g.relu(w);
        let p = g.mul(r, w).unwrap();
        let l = g.reduce_mean(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[0., 0.]);
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_is_repeatable_bitwise() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::create(&[3, 4], crate::tensor::Init::FanInGaussian(3)).unwrap());
        let x = g.constant(Tensor::create(&[4, 2], crate::tensor::Init::FanInGaussian(4)).unwrap());
        let y = g.matmul(w, x).unwrap();
        let y = g.relu(y);
        let l = g.reduce_mean(y);
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.get(w).unwrap()), bits(b.get(w).unwrap()));
    }

    #[test]
    fn abs_subgradient_is_zero_at_zero() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[-2., 0., 3.]));
        let b = g.abs(a);
        let l = g.reduce_mean(b);
        let grads = g.backward(l).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(grads.get(a).unwrap().data(), &[-third, 0.0, third]);
    }
}
