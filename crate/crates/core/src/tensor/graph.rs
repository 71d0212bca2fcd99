use std::collections::HashMap;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, s: f64 },
    TransposeLastTwo(NodeId),
    Reshape(NodeId),
    Permute { a: NodeId, axes: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { a: NodeId, axis: usize, start: usize },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Mean { a: NodeId, axis: usize },
    SumAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        reduction: Reduction,
        probs: Vec<f64>,
    },
    ExpandLeading(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::TransposeLastTwo(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ExpandLeading(_) => "expand",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in execution order, so the node
/// list is always a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: gradients for every gradient-requesting
/// leaf plus any retained intermediate node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value in forward output"))
    }
}

/// `b` may omit leading axes of `a`.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[offset..offset + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[offset + j * inner_stride]));
        }
        // odometer over all but the innermost output axis
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn transpose_last_two(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (m * n);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(r - 2, r - 1);
    (out, s)
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        check_finite(op.name(), &value)?;
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Matrix product over the last two axes. `b` is either a matrix shared
    /// across all leading axes of `a`, or carries the same leading axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::dim("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let (ra, rb) = (ash.len(), bsh.len());
        let (m, k) = (ash[ra - 2], ash[ra - 1]);
        let (k2, n) = (bsh[rb - 2], bsh[rb - 1]);
        if k != k2 || !(rb == 2 || bsh[..rb - 2] == ash[..ra - 2]) {
            return Err(Error::dim("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let mut shape = ash[..ra - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; shape.iter().product()];
        if rb == 2 {
            let rows = av.len() / k;
            gemm(rows, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        } else {
            let batch = av.len() / (m * k);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let value = Tensor { shape, data: out };
        self.push_checked(value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let bl = bv.len();
        let data = av
            .data()
            .chunks(bl)
            .flat_map(|c| c.iter().zip(bv.data()).map(|(x, y)| x + y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push_checked(value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::dim(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let bl = bv.len();
        let data = av
            .data()
            .chunks(bl)
            .flat_map(|c| c.iter().zip(bv.data()).map(|(x, y)| x * y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push_checked(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let value = self.value(a).map(|x| x * s);
        self.push_checked(value, Op::Scale { a, s }, &[a])
    }

    pub fn transpose_last_two(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(Error::dim("transpose", format!("{:?}", av.shape())));
        }
        let (data, shape) = transpose_last_two(av.data(), av.shape());
        self.push_checked(Tensor { shape, data }, Op::TransposeLastTwo(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push_checked(value, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let mut seen = vec![false; av.rank()];
        let valid = axes.len() == av.rank()
            && axes
                .iter()
                .all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(Error::dim(
                "permute",
                format!("axes {axes:?} for {:?}", av.shape()),
            ));
        }
        let (data, shape) = permute_data(av.data(), av.shape(), axes);
        let op = Op::Permute {
            a,
            axes: axes.to_vec(),
        };
        self.push_checked(Tensor { shape, data }, op, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = match parts.first() {
            Some(&p) => self.value(p).shape().to_vec(),
            None => return Err(Error::dim("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(Error::dim("concat", format!("{first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push_checked(Tensor { shape, data }, op, parts)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() || len == 0 || start + len > av.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, av.shape()),
            ));
        }
        let (outer, alen, inner) = axis_split(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let op = Op::Narrow { a, axis, start };
        self.push_checked(Tensor { shape, data }, op, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(Error::dim("softmax", "scalar input"));
        }
        let d = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push_checked(value, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if xv.rank() == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let nh = (row[j] - mean) * inv;
                normalized[r * d + j] = nh;
                out[r * d + j] = nh * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push_checked(value, op, &[x, gain, bias])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(gelu);
        self.push_checked(value, Op::Gelu(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::dim("mean", format!("axis {axis} of {:?}", av.shape())));
        }
        let (outer, alen, inner) = axis_split(av.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let src = &av.data()[(o * alen + k) * inner..(o * alen + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in data.iter_mut() {
            *v /= alen as f64;
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        self.push_checked(Tensor { shape, data }, Op::Mean { a, axis }, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_checked(value, Op::SumAll(a), &[a])
    }

    /// Cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let c = lv.shape()[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::dim(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &lv.data()[b * c..(b + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
            for j in 0..c {
                probs[b * c + j] = (row[j] - lse).exp();
            }
        }
        if reduction == Reduction::Mean {
            total /= labels.len() as f64;
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            reduction,
            probs,
        };
        self.push_checked(Tensor::scalar(total), op, &[logits])
    }

    /// Repeat `a` along new leading axes `lead`.
    pub fn expand_leading(&mut self, a: NodeId, lead: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let reps: usize = lead.iter().product();
        if reps == 0 {
            return Err(Error::dim("expand", format!("lead {lead:?}")));
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(av.shape());
        let mut data = Vec::with_capacity(reps * av.len());
        for _ in 0..reps {
            data.extend_from_slice(av.data());
        }
        self.push_checked(Tensor { shape, data }, Op::ExpandLeading(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every leaf created with `requires_grad` (zero
    /// when unreached) and for every node listed in `retain`.
    pub fn backward(&self, loss: NodeId, retain: &[NodeId]) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::numeric(self.op_name(loss), "loss is not finite"));
        }
        let keep: std::collections::HashSet<NodeId> = retain.iter().copied().collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::numeric(
                    node.op.name(),
                    format!("non-finite gradient at node {i}"),
                ));
            }
            self.backward_node(node, &g, &mut grads);
            if keep.contains(&NodeId(i)) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let wanted = (matches!(node.op, Op::Leaf) && node.requires_grad) || keep.contains(&id);
            if !wanted {
                continue;
            }
            let data = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::numeric(
                    node.op.name(),
                    format!("non-finite gradient at node {i}"),
                ));
            }
            let shape = node.value.shape().to_vec();
            out.grads.insert(id, Tensor { shape, data });
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        let len_of = |id: NodeId| nodes[id.0].value.len();
        // Accumulation buffer for an input, allocated on first touch.
        macro_rules! buf {
            ($id:expr) => {{
                let n = len_of($id);
                grads[$id.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ash, bsh) = (av.shape(), bv.shape());
                let (ra, rb) = (ash.len(), bsh.len());
                let (m, k) = (ash[ra - 2], ash[ra - 1]);
                let n = bsh[rb - 1];
                if rb == 2 {
                    let rows = av.len() / k;
                    if wants(*a) {
                        gemm(rows, n, k, g, false, bv.data(), true, buf!(*a), 1.0);
                    }
                    if wants(*b) {
                        gemm(k, rows, n, av.data(), true, g, false, buf!(*b), 1.0);
                    }
                } else {
                    let batch = av.len() / (m * k);
                    if wants(*a) {
                        let da = buf!(*a);
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                    if wants(*b) {
                        let db = buf!(*b);
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    for (d, x) in buf!(*a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if wants(*b) {
                    let db = buf!(*b);
                    let bl = db.len();
                    for chunk in g.chunks(bl) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let bl = bv.len();
                if wants(*a) {
                    let da = buf!(*a);
                    for (dchunk, gchunk) in da.chunks_mut(bl).zip(g.chunks(bl)) {
                        for ((d, x), y) in dchunk.iter_mut().zip(gchunk).zip(bv.data()) {
                            *d += x * y;
                        }
                    }
                }
                if wants(*b) {
                    let db = buf!(*b);
                    for (gchunk, achunk) in g.chunks(bl).zip(av.data().chunks(bl)) {
                        for ((d, x), y) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    for (d, x) in buf!(*a).iter_mut().zip(g) {
                        *d += x * s;
                    }
                }
            }
            Op::TransposeLastTwo(a) => {
                if wants(*a) {
                    let (t, _) = transpose_last_two(g, node.value.shape());
                    for (d, x) in buf!(*a).iter_mut().zip(&t) {
                        *d += x;
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    for (d, x) in buf!(*a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::Permute { a, axes } => {
                if wants(*a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (t, _) = permute_data(g, node.value.shape(), &inverse);
                    for (d, x) in buf!(*a).iter_mut().zip(&t) {
                        *d += x;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let block = nodes[p.0].value.shape()[*axis] * inner;
                        if wants(p) {
                            let dp = buf!(p);
                            for (d, x) in dp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[offset..offset + block])
                            {
                                *d += x;
                            }
                        }
                        offset += block;
                    }
                }
            }
            Op::Narrow { a, axis, start } => {
                if wants(*a) {
                    let (outer, alen, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let da = buf!(*a);
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, x) in da[base..base + len * inner].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let da = buf!(*a);
                    for ((drow, grow), yrow) in da.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                if wants(*gain) {
                    let dg = buf!(*gain);
                    for (grow, nrow) in g.chunks(d).zip(normalized.chunks(d)) {
                        for ((dv, gv), nv) in dg.iter_mut().zip(grow).zip(nrow) {
                            *dv += gv * nv;
                        }
                    }
                }
                if wants(*bias) {
                    let db = buf!(*bias);
                    for grow in g.chunks(d) {
                        for (dv, gv) in db.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
                if wants(*x) {
                    let gain_v = nodes[gain.0].value.data();
                    let dx = buf!(*x);
                    let mut dxhat = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let nrow = &normalized[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gain_v[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * nrow[j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv / df * (df * dxhat[j] - s1 - nrow[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let xv = nodes[a.0].value.data();
                    for ((d, gv), x) in buf!(*a).iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(*x);
                    }
                }
            }
            Op::Mean { a, axis } => {
                if wants(*a) {
                    let (outer, alen, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                    let da = buf!(*a);
                    let scale = 1.0 / alen as f64;
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..alen {
                            let base = (o * alen + k) * inner;
                            for (d, x) in da[base..base + inner].iter_mut().zip(src) {
                                *d += x * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let s = g[0];
                    for d in buf!(*a).iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                reduction,
                probs,
            } => {
                if wants(*logits) {
                    let c = nodes[logits.0].value.shape()[1];
                    let scale = match reduction {
                        Reduction::Mean => g[0] / labels.len() as f64,
                        Reduction::Sum => g[0],
                    };
                    let dl = buf!(*logits);
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[b * c + j] += scale * (probs[b * c + j] - onehot);
                        }
                    }
                }
            }
            Op::ExpandLeading(a) => {
                if wants(*a) {
                    let da = buf!(*a);
                    let n = da.len();
                    for chunk in g.chunks(n) {
                        for (d, x) in da.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
        }
    }
}
