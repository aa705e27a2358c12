//! The autodiff tape: forward ops append nodes, `backward` walks them in
//! reverse. Every backward rule is hand-written and covered by a
//! finite-difference check in the test suite.

use super::{Tensor, TensorError};
use crate::basis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Exp,
    Silu,
    Relu,
    Square,
    Gelu,
    Softplus,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand maps onto the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinKind,
        bc: Broadcast,
    },
    Unary {
        a: NodeId,
        kind: UnaryKind,
    },
    ScaleConst {
        a: NodeId,
        c: f64,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SoftmaxRows {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    MeanRows {
        a: NodeId,
    },
    MeanAll {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    ColScale {
        x: NodeId,
        s: NodeId,
    },
    SplineBasis {
        x: NodeId,
        knots: Vec<f64>,
        order: usize,
    },
    RbfBasis {
        x: NodeId,
        centers: NodeId,
        width: NodeId,
    },
    SwitchBasis {
        x: NodeId,
        centers: NodeId,
        width: NodeId,
    },
    ChebBasis {
        z: NodeId,
        degree: usize,
    },
    WaveletEdges {
        x: NodeId,
        weight: NodeId,
        translation: NodeId,
        raw_scale: NodeId,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Square => x * x,
        UnaryKind::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Neg => -x,
    }
}

fn unary_bwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
        UnaryKind::Exp => x.exp(),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Neg => -1.0,
    }
}

fn softmax_rows_data(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Register a leaf tensor.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(TensorError::Dimension(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for l in 0..k {
                let av = va.at(i, l);
                if av == 0.0 {
                    continue;
                }
                let brow = &vb.data()[l * n..(l + 1) * n];
                let orow = &mut out.data_mut()[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 2 {
            return Err(TensorError::Dimension("transpose needs rank 2".into()));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = va.at(i, j);
            }
        }
        let rg = self.req(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn broadcast_of(a: &Tensor, b: &Tensor) -> Result<Broadcast, TensorError> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::None);
        }
        if b.numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if b.rows() == 1 && b.cols() == a.cols() {
            return Ok(Broadcast::Row);
        }
        Err(TensorError::ShapeMismatch(format!(
            "cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        )))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: BinKind) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Self::broadcast_of(va, vb)?;
        if kind == BinKind::Div && vb.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::DivisionByZero);
        }
        let cols = va.cols();
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let bv = match bc {
                Broadcast::None => vb.data()[i],
                Broadcast::Scalar => vb.data()[0],
                Broadcast::Row => vb.data()[i % cols],
            };
            *v = match kind {
                BinKind::Add => *v + bv,
                BinKind::Sub => *v - bv,
                BinKind::Mul => *v * bv,
                BinKind::Div => *v / bv,
            };
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Binary { a, b, kind, bc }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, BinKind::Div)
    }

    pub fn unary(&mut self, a: NodeId, kind: UnaryKind) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        for v in out.data_mut() {
            *v = unary_fwd(kind, *v);
        }
        let rg = self.req(a);
        self.push(out, Op::Unary { a, kind }, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.req(a);
        self.push(out, Op::ScaleConst { a, c }, rg)
    }

    /// Per-row normalization followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let d = vx.cols();
        if self.nodes[gamma.0].value.numel() != d || self.nodes[beta.0].value.numel() != d {
            return Err(TensorError::ShapeMismatch(
                "layer_norm affine params must have length d".into(),
            ));
        }
        let n = vx.rows();
        let vg = self.nodes[gamma.0].value.clone();
        let vb = self.nodes[beta.0].value.clone();
        let mut out = vx.clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let out = softmax_rows_data(&self.nodes[x.0].value);
        let rg = self.req(x);
        self.push(out, Op::SoftmaxRows { x }, rg)
    }

    /// Mean negative log-softmax of the true class. Scalar output.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let vl = &self.nodes[logits.0].value;
        let (n, c) = (vl.rows(), vl.cols());
        if labels.len() != n {
            return Err(TensorError::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let sm = softmax_rows_data(vl);
        let mut loss = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            loss -= sm.at(r, lab).max(1e-300).ln();
        }
        loss /= n as f64;
        let rg = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows: [n, d] -> [1, d].
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(&[1, d]);
        for r in 0..n {
            for j in 0..d {
                out.data_mut()[j] += va.at(r, j);
            }
        }
        for v in out.data_mut() {
            *v /= n as f64;
        }
        let rg = self.req(a);
        self.push(out, Op::MeanRows { a }, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let m = va.data().iter().sum::<f64>() / va.numel() as f64;
        let rg = self.req(a);
        self.push(Tensor::scalar(m), Op::MeanAll { a }, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().sum::<f64>();
        let rg = self.req(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.rows(), vx.cols());
        if idx.iter().any(|&i| i >= n) {
            return Err(TensorError::Dimension("gather index out of range".into()));
        }
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&vx.data()[i * d..(i + 1) * d]);
        }
        let rg = self.req(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.rows(), vx.cols());
        if start >= end || end > d {
            return Err(TensorError::Dimension(format!(
                "slice_cols {start}..{end} of {d}"
            )));
        }
        let w = end - start;
        let mut out = Tensor::zeros(&[n, w]);
        for r in 0..n {
            out.data_mut()[r * w..(r + 1) * w]
                .copy_from_slice(&vx.data()[r * d + start..r * d + end]);
        }
        let rg = self.req(x);
        Ok(self.push(out, Op::SliceCols { x, start, end }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat of zero parts".into()));
        }
        let n = self.nodes[parts[0].0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != n) {
            return Err(TensorError::ShapeMismatch("concat row mismatch".into()));
        }
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            let w = vp.cols();
            for r in 0..n {
                out.data_mut()[r * total + off..r * total + off + w]
                    .copy_from_slice(&vp.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Scale each row of `x` [n, d] by `s` [n, 1].
    pub fn col_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let (n, d) = (vx.rows(), vx.cols());
        if vs.numel() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "col_scale: {} scales for {} rows",
                vs.numel(),
                n
            )));
        }
        let mut out = vx.clone();
        for r in 0..n {
            let sv = vs.data()[r];
            for v in &mut out.data_mut()[r * d..(r + 1) * d] {
                *v *= sv;
            }
        }
        let rg = self.req(x) || self.req(s);
        Ok(self.push(out, Op::ColScale { x, s }, rg))
    }

    /// B-spline basis expansion: [n, in] -> [n, in * B].
    pub fn spline_basis(&mut self, x: NodeId, knots: Vec<f64>, order: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, din) = (vx.rows(), vx.cols());
        let nb = knots.len() - order - 1;
        let mut out = Tensor::zeros(&[n, din * nb]);
        for r in 0..n {
            for i in 0..din {
                let b = basis::bspline_basis(vx.at(r, i), &knots, order);
                out.data_mut()[r * din * nb + i * nb..r * din * nb + (i + 1) * nb]
                    .copy_from_slice(&b);
            }
        }
        let rg = self.req(x);
        self.push(out, Op::SplineBasis { x, knots, order }, rg)
    }

    /// Gaussian RBF expansion over trainable centers [G] and width [1].
    pub fn rbf_basis(
        &mut self,
        x: NodeId,
        centers: NodeId,
        width: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.radial_like(x, centers, width, false)
    }

    /// Reflectional switch expansion (1 - tanh^2).
    pub fn switch_basis(
        &mut self,
        x: NodeId,
        centers: NodeId,
        width: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.radial_like(x, centers, width, true)
    }

    fn radial_like(
        &mut self,
        x: NodeId,
        centers: NodeId,
        width: NodeId,
        is_switch: bool,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let vc = &self.nodes[centers.0].value;
        let vw = &self.nodes[width.0].value;
        if vw.numel() != 1 {
            return Err(TensorError::ShapeMismatch("width must be scalar".into()));
        }
        let (n, din, g) = (vx.rows(), vx.cols(), vc.numel());
        let h = vw.data()[0];
        let mut out = Tensor::zeros(&[n, din * g]);
        for r in 0..n {
            for i in 0..din {
                let xv = vx.at(r, i);
                for (gi, &c) in vc.data().iter().enumerate() {
                    let v = if is_switch {
                        basis::switch(xv, c, h)
                    } else {
                        basis::rbf(xv, c, h)
                    };
                    out.data_mut()[r * din * g + i * g + gi] = v;
                }
            }
        }
        let rg = self.req(x) || self.req(centers) || self.req(width);
        let op = if is_switch {
            Op::SwitchBasis { x, centers, width }
        } else {
            Op::RbfBasis { x, centers, width }
        };
        Ok(self.push(out, op, rg))
    }

    /// Chebyshev expansion T_0..T_d of an already-normalized input in (-1, 1).
    pub fn cheb_basis(&mut self, z: NodeId, degree: usize) -> NodeId {
        let vz = &self.nodes[z.0].value;
        let (n, din) = (vz.rows(), vz.cols());
        let nb = degree + 1;
        let mut out = Tensor::zeros(&[n, din * nb]);
        for r in 0..n {
            for i in 0..din {
                let t = basis::chebyshev(vz.at(r, i), degree);
                out.data_mut()[r * din * nb + i * nb..r * din * nb + (i + 1) * nb]
                    .copy_from_slice(&t);
            }
        }
        let rg = self.req(z);
        self.push(out, Op::ChebBasis { z, degree }, rg)
    }

    /// Per-edge Mexican-hat wavelets: y[n,o] = sum_i w[o,i] psi((x[n,i]-t[o,i])/softplus(rs[o,i])).
    pub fn wavelet_edges(
        &mut self,
        x: NodeId,
        weight: NodeId,
        translation: NodeId,
        raw_scale: NodeId,
    ) -> Result<NodeId, TensorError> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[weight.0].value;
        let vt = &self.nodes[translation.0].value;
        let vs = &self.nodes[raw_scale.0].value;
        let (n, din) = (vx.rows(), vx.cols());
        let dout = vw.rows();
        if vw.cols() != din || vt.shape() != vw.shape() || vs.shape() != vw.shape() {
            return Err(TensorError::ShapeMismatch(
                "wavelet edge params must all be [out, in]".into(),
            ));
        }
        let mut out = Tensor::zeros(&[n, dout]);
        for r in 0..n {
            for o in 0..dout {
                let mut acc = 0.0;
                for i in 0..din {
                    let s = softplus(vs.at(o, i));
                    let z = (vx.at(r, i) - vt.at(o, i)) / s;
                    acc += vw.at(o, i) * basis::mexican_hat(z);
                }
                out.data_mut()[r * dout + o] = acc;
            }
        }
        let rg = self.req(x) || self.req(weight) || self.req(translation) || self.req(raw_scale);
        Ok(self.push(
            out,
            Op::WaveletEdges {
                x,
                weight,
                translation,
                raw_scale,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// requires-grad node reachable from the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.accumulate(loss, Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match &self.nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(id, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: &Tensor) {
        // Ops borrow values immutably; clone small payloads out of the node
        // first so we can mutate grads afterwards.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.req(a) {
                    // ga = g . b^T
                    let mut ga = Tensor::zeros(&[m, k]);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.at(i, j) * vb.at(l, j);
                            }
                            ga.data_mut()[i * k + l] = acc;
                        }
                    }
                    self.accumulate(a, ga);
                }
                if self.req(b) {
                    // gb = a^T . g
                    let mut gb = Tensor::zeros(&[k, n]);
                    for l in 0..k {
                        for i in 0..m {
                            let av = va.at(i, l);
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb.data_mut()[l * n + j] += av * g.at(i, j);
                            }
                        }
                    }
                    self.accumulate(b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut ga = Tensor::zeros(&[n, m]);
                for i in 0..m {
                    for j in 0..n {
                        ga.data_mut()[j * m + i] = g.at(i, j);
                    }
                }
                self.accumulate(a, ga);
            }
            &Op::Binary { a, b, kind, bc } => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let cols = va.cols();
                let bval = |i: usize| match bc {
                    Broadcast::None => vb.data()[i],
                    Broadcast::Scalar => vb.data()[0],
                    Broadcast::Row => vb.data()[i % cols],
                };
                if self.req(a) {
                    let mut ga = Tensor::zeros(va.shape());
                    for i in 0..va.numel() {
                        ga.data_mut()[i] = match kind {
                            BinKind::Add | BinKind::Sub => g.data()[i],
                            BinKind::Mul => g.data()[i] * bval(i),
                            BinKind::Div => g.data()[i] / bval(i),
                        };
                    }
                    self.accumulate(a, ga);
                }
                if self.req(b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    for i in 0..va.numel() {
                        let contrib = match kind {
                            BinKind::Add => g.data()[i],
                            BinKind::Sub => -g.data()[i],
                            BinKind::Mul => g.data()[i] * va.data()[i],
                            BinKind::Div => {
                                let bv = bval(i);
                                -g.data()[i] * va.data()[i] / (bv * bv)
                            }
                        };
                        let slot = match bc {
                            Broadcast::None => i,
                            Broadcast::Scalar => 0,
                            Broadcast::Row => i % cols,
                        };
                        gb.data_mut()[slot] += contrib;
                    }
                    self.accumulate(b, gb);
                }
            }
            &Op::Unary { a, kind } => {
                let va = self.nodes[a.0].value.clone();
                let mut ga = Tensor::zeros(va.shape());
                for i in 0..va.numel() {
                    ga.data_mut()[i] = g.data()[i] * unary_bwd(kind, va.data()[i]);
                }
                self.accumulate(a, ga);
            }
            &Op::ScaleConst { a, c } => {
                let mut ga = g.clone();
                for v in ga.data_mut() {
                    *v *= c;
                }
                self.accumulate(a, ga);
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.nodes[x.0].value.clone();
                let vg = self.nodes[gamma.0].value.clone();
                let (n, d) = (vx.rows(), vx.cols());
                let mut gx = Tensor::zeros(vx.shape());
                let mut gg = Tensor::zeros(vg.shape());
                let mut gb = Tensor::zeros(vg.shape());
                for r in 0..n {
                    let row = &vx.data()[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let grow = &g.data()[r * d..(r + 1) * d];
                    // d/dxhat, plus affine param grads
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dxhat[j] = grow[j] * vg.data()[j];
                        gg.data_mut()[j] += grow[j] * xhat[j];
                        gb.data_mut()[j] += grow[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx.data_mut()[r * d + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gamma, gg);
                self.accumulate(beta, gb);
            }
            &Op::SoftmaxRows { x } => {
                let s = self.nodes[id].value.clone();
                let (n, d) = (s.rows(), s.cols());
                let mut gx = Tensor::zeros(s.shape());
                for r in 0..n {
                    let dot: f64 = (0..d).map(|j| g.at(r, j) * s.at(r, j)).sum();
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = s.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let (logits, labels) = (*logits, labels.clone());
                let vl = self.nodes[logits.0].value.clone();
                let sm = softmax_rows_data(&vl);
                let (n, c) = (sm.rows(), sm.cols());
                let gscale = g.item() / n as f64;
                let mut gl = Tensor::zeros(vl.shape());
                for r in 0..n {
                    for j in 0..c {
                        let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                        gl.data_mut()[r * c + j] = gscale * (sm.at(r, j) - onehot);
                    }
                }
                self.accumulate(logits, gl);
            }
            &Op::MeanRows { a } => {
                let va = self.nodes[a.0].value.clone();
                let (n, d) = (va.rows(), va.cols());
                let mut ga = Tensor::zeros(va.shape());
                for r in 0..n {
                    for j in 0..d {
                        ga.data_mut()[r * d + j] = g.data()[j] / n as f64;
                    }
                }
                self.accumulate(a, ga);
            }
            &Op::MeanAll { a } => {
                let va = self.nodes[a.0].value.clone();
                let c = g.item() / va.numel() as f64;
                self.accumulate(a, Tensor::filled(va.shape(), c));
            }
            &Op::SumAll { a } => {
                let va = self.nodes[a.0].value.clone();
                self.accumulate(a, Tensor::filled(va.shape(), g.item()));
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let vx = self.nodes[x.0].value.clone();
                let d = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx.data_mut()[i * d + j] += g.at(r, j);
                    }
                }
                self.accumulate(x, gx);
            }
            &Op::SliceCols { x, start, end } => {
                let vx = self.nodes[x.0].value.clone();
                let (n, d) = (vx.rows(), vx.cols());
                let w = end - start;
                let mut gx = Tensor::zeros(vx.shape());
                for r in 0..n {
                    for j in 0..w {
                        gx.data_mut()[r * d + start + j] = g.at(r, j);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = g.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let total = g.cols();
                    let mut gp = Tensor::zeros(&[n, w]);
                    for r in 0..n {
                        for j in 0..w {
                            gp.data_mut()[r * w + j] = g.data()[r * total + off + j];
                        }
                    }
                    self.accumulate(p, gp);
                    off += w;
                }
            }
            &Op::ColScale { x, s } => {
                let vx = self.nodes[x.0].value.clone();
                let vs = self.nodes[s.0].value.clone();
                let (n, d) = (vx.rows(), vx.cols());
                if self.req(x) {
                    let mut gx = Tensor::zeros(vx.shape());
                    for r in 0..n {
                        for j in 0..d {
                            gx.data_mut()[r * d + j] = g.at(r, j) * vs.data()[r];
                        }
                    }
                    self.accumulate(x, gx);
                }
                if self.req(s) {
                    let mut gs = Tensor::zeros(vs.shape());
                    for r in 0..n {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += g.at(r, j) * vx.at(r, j);
                        }
                        gs.data_mut()[r] = acc;
                    }
                    self.accumulate(s, gs);
                }
            }
            Op::SplineBasis { x, knots, order } => {
                let (x, knots, order) = (*x, knots.clone(), *order);
                let vx = self.nodes[x.0].value.clone();
                let (n, din) = (vx.rows(), vx.cols());
                let nb = knots.len() - order - 1;
                let mut gx = Tensor::zeros(vx.shape());
                for r in 0..n {
                    for i in 0..din {
                        let d = basis::bspline_basis_deriv(vx.at(r, i), &knots, order);
                        let mut acc = 0.0;
                        for (b, db) in d.iter().enumerate() {
                            acc += g.data()[r * din * nb + i * nb + b] * db;
                        }
                        gx.data_mut()[r * din + i] = acc;
                    }
                }
                self.accumulate(x, gx);
            }
            &Op::RbfBasis { x, centers, width } | &Op::SwitchBasis { x, centers, width } => {
                let is_switch = matches!(self.nodes[id].op, Op::SwitchBasis { .. });
                let vx = self.nodes[x.0].value.clone();
                let vc = self.nodes[centers.0].value.clone();
                let h = self.nodes[width.0].value.data()[0];
                let (n, din, gn) = (vx.rows(), vx.cols(), vc.numel());
                let mut gx = Tensor::zeros(vx.shape());
                let mut gc = Tensor::zeros(vc.shape());
                let mut gh = 0.0;
                for r in 0..n {
                    for i in 0..din {
                        let xv = vx.at(r, i);
                        let mut accx = 0.0;
                        for (gi, &c) in vc.data().iter().enumerate() {
                            let gout = g.data()[r * din * gn + i * gn + gi];
                            if gout == 0.0 {
                                continue;
                            }
                            let (dx, dc, dh) = if is_switch {
                                basis::switch_grad(xv, c, h)
                            } else {
                                basis::rbf_grad(xv, c, h)
                            };
                            accx += gout * dx;
                            gc.data_mut()[gi] += gout * dc;
                            gh += gout * dh;
                        }
                        gx.data_mut()[r * din + i] += accx;
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(centers, gc);
                self.accumulate(width, Tensor::scalar(gh));
            }
            &Op::ChebBasis { z, degree } => {
                let vz = self.nodes[z.0].value.clone();
                let (n, din) = (vz.rows(), vz.cols());
                let nb = degree + 1;
                let mut gz = Tensor::zeros(vz.shape());
                for r in 0..n {
                    for i in 0..din {
                        let d = basis::chebyshev_deriv(vz.at(r, i), degree);
                        let mut acc = 0.0;
                        for (k, dk) in d.iter().enumerate() {
                            acc += g.data()[r * din * nb + i * nb + k] * dk;
                        }
                        gz.data_mut()[r * din + i] = acc;
                    }
                }
                self.accumulate(z, gz);
            }
            &Op::WaveletEdges {
                x,
                weight,
                translation,
                raw_scale,
            } => {
                let vx = self.nodes[x.0].value.clone();
                let vw = self.nodes[weight.0].value.clone();
                let vt = self.nodes[translation.0].value.clone();
                let vs = self.nodes[raw_scale.0].value.clone();
                let (n, din) = (vx.rows(), vx.cols());
                let dout = vw.rows();
                let mut gx = Tensor::zeros(vx.shape());
                let mut gw = Tensor::zeros(vw.shape());
                let mut gt = Tensor::zeros(vt.shape());
                let mut gs = Tensor::zeros(vs.shape());
                for r in 0..n {
                    for o in 0..dout {
                        let gout = g.at(r, o);
                        if gout == 0.0 {
                            continue;
                        }
                        for i in 0..din {
                            let rs = vs.at(o, i);
                            let s = softplus(rs);
                            let z = (vx.at(r, i) - vt.at(o, i)) / s;
                            let psi = basis::mexican_hat(z);
                            let dpsi = basis::mexican_hat_deriv(z);
                            let w = vw.at(o, i);
                            gw.data_mut()[o * din + i] += gout * psi;
                            gx.data_mut()[r * din + i] += gout * w * dpsi / s;
                            gt.data_mut()[o * din + i] -= gout * w * dpsi / s;
                            gs.data_mut()[o * din + i] +=
                                gout * w * dpsi * (-z / s) * sigmoid(rs);
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(weight, gw);
                self.accumulate(translation, gt);
                self.accumulate(raw_scale, gs);
            }
        }
    }
}
