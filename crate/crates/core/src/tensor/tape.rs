//! Operation tape for reverse-mode differentiation.
//!
//! Nodes are appended in forward order, so the arena order is already a
//! topological order; the backward pass walks it once in reverse. A tape is
//! single-threaded; independent tapes may run concurrently.

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, conv_output_hw, Padding};
use super::{offset, strides, Result, Tensor, TensorError};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Min,
    Max,
}

/// A fixed linear map hooked into the graph (kernel projection, kernel
/// dilation, scale-space lift). `adjoint` must be the exact transpose of
/// `apply` — gradcheck in the test suite holds implementations to that.
pub trait LinearOp: std::fmt::Debug + Send + Sync {
    fn label(&self) -> &'static str;
    fn out_shape(&self, input: &[usize]) -> Vec<usize>;
    fn apply(&self, x: &Tensor) -> Tensor;
    fn adjoint(&self, g: &Tensor, in_shape: &[usize]) -> Tensor;
}

#[derive(Debug)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Square(NodeId),
    ScaleBy(NodeId, f64),
    Reduce {
        input: NodeId,
        op: ReduceOp,
        axes: Vec<usize>,
        /// flat input index chosen per output element (min/max only)
        args: Vec<usize>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
        dilation: usize,
    },
    /// MinMax scaler (max - min, with fallbacks) per sliding block.
    BlockRange {
        input: NodeId,
        ksize: usize,
        padding: Padding,
        stats: Vec<BlockStat>,
    },
    /// [B,G,H,W] -> [B,C,H,W], output channel c reads group c % G.
    BroadcastChannels { input: NodeId, c_out: usize },
    Reshape(NodeId),
    ConcatChannels(Vec<NodeId>),
    SliceChannels { input: NodeId, start: usize },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Linear { input: NodeId, map: Arc<dyn LinearOp> },
    /// k tensors [B,C,H,W] -> [B,k,C,H,W]
    StackAxis1(Vec<NodeId>),
    /// [B,S,...] -> [B,...]
    SelectAxis1 { input: NodeId, index: usize },
    /// [..., T] -> [...]
    IndexLastAxis { input: NodeId, index: usize },
}

/// How one sliding block's scaler was produced, for gradient routing.
#[derive(Debug, Clone, Copy)]
pub enum BlockStat {
    /// max - min with the flat per-sample indices of both extremes
    Range { imax: usize, imin: usize },
    /// max |v| fallback; sign of the selected element
    Abs { iabs: usize, sign: f64 },
    /// all-zero block, scaler pinned to 1
    Const,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if computed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad();
        self.push_unchecked(t, Op::Leaf, needs)
    }

    /// A leaf that never receives a gradient (fixed weights, data).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(t, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, label: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(label));
        }
        let needs = self.op_needs_grad(&op);
        Ok(self.push_unchecked(value, op, needs))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let n = |id: &NodeId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => n(a) || n(b),
            Op::Neg(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::ScaleBy(a, _)
            | Op::Reshape(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a) => n(a),
            Op::Reduce { input, .. }
            | Op::BlockRange { input, .. }
            | Op::BroadcastChannels { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::Linear { input, .. }
            | Op::SelectAxis1 { input, .. }
            | Op::IndexLastAxis { input, .. } => n(input),
            Op::Conv2d { input, kernel, .. } => n(input) || n(kernel),
            Op::ConcatChannels(ids) | Op::StackAxis1(ids) => ids.iter().any(n),
        }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x / y)?;
        self.push(v, Op::Div(a, b), "div")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), "neg")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    pub fn scale_by(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::ScaleBy(a, c), "scale_by")
    }

    // ---- reductions ------------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, input: NodeId, axes: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let rank = x.rank();
        let mut axes: Vec<usize> = if axes.is_empty() { (0..rank).collect() } else { axes.to_vec() };
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis { axis: ax, rank });
            }
        }
        let out_shape: Vec<usize> = (0..rank).filter(|ax| !axes.contains(ax)).map(|ax| x.shape()[ax]).collect();
        let out_n: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&ax| x.shape()[ax]).product();
        if count == 0 {
            return Err(TensorError::Invalid("reduction over empty axes".into()));
        }

        let st = strides(x.shape());
        // stride of each output axis in the input
        let keep_axes: Vec<usize> = (0..rank).filter(|ax| !axes.contains(ax)).collect();
        let out_st = strides(&out_shape);
        let mut out = match op {
            ReduceOp::Sum | ReduceOp::Mean => vec![0.0; out_n],
            ReduceOp::Min => vec![f64::INFINITY; out_n],
            ReduceOp::Max => vec![f64::NEG_INFINITY; out_n],
        };
        let mut args = vec![0usize; if matches!(op, ReduceOp::Min | ReduceOp::Max) { out_n } else { 0 }];

        let mut idx = vec![0usize; rank];
        for (flat, &v) in x.data().iter().enumerate() {
            let mut o = 0;
            for (k, &ax) in keep_axes.iter().enumerate() {
                o += idx[ax] * out_st[k];
            }
            match op {
                ReduceOp::Sum | ReduceOp::Mean => out[o] += v,
                ReduceOp::Max => {
                    if v > out[o] {
                        out[o] = v;
                        args[o] = flat;
                    }
                }
                ReduceOp::Min => {
                    if v < out[o] {
                        out[o] = v;
                        args[o] = flat;
                    }
                }
            }
            // advance the index vector
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < x.shape()[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let _ = st;
        if matches!(op, ReduceOp::Mean) {
            let c = count as f64;
            for v in &mut out {
                *v /= c;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Reduce { input, op, axes, args }, "reduce")
    }

    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(ReduceOp::Mean, input, &[])
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(ReduceOp::Sum, input, &[])
    }

    // ---- convolution and sliding-block statistics ------------------------

    /// Cross-correlation of [B,C,H,W] with [Co,C,s,s].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
        dilation: usize,
    ) -> Result<NodeId> {
        let v = conv2d_forward(self.value(input), self.value(kernel), padding, dilation)?;
        self.push(v, Op::Conv2d { input, kernel, padding, dilation }, "conv2d")
    }

    /// MinMax scaler per sliding block over all channels and the kernel
    /// window: max - min, falling back to max |v|, then to 1 for all-zero
    /// blocks. Output shape [B,1,H',W'].
    pub fn block_range(&mut self, input: NodeId, ksize: usize, padding: Padding) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "block_range wants [B,C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = conv_output_hw(h, w, ksize, padding, 1)?;
        let pad = match padding {
            Padding::None => 0,
            _ => ((ksize - 1) / 2) as i64,
        };
        let mut out = Tensor::zeros(&[b, 1, oh, ow]);
        let mut stats = Vec::with_capacity(b * oh * ow);
        for bi in 0..b {
            let sample = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut max = f64::NEG_INFINITY;
                    let mut min = f64::INFINITY;
                    let (mut imax, mut imin) = (0usize, 0usize);
                    let mut pad_zero_seen = false;
                    for ci in 0..c {
                        for ky in 0..ksize {
                            for kx in 0..ksize {
                                let iy = oy as i64 + ky as i64 - pad;
                                let ix = ox as i64 + kx as i64 - pad;
                                let v = match padding {
                                    Padding::Periodic => {
                                        let y = iy.rem_euclid(h as i64) as usize;
                                        let xx = ix.rem_euclid(w as i64) as usize;
                                        Some(sample[ci * h * w + y * w + xx])
                                    }
                                    Padding::Zero | Padding::None => {
                                        if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                            pad_zero_seen = matches!(padding, Padding::Zero);
                                            None
                                        } else {
                                            Some(sample[ci * h * w + iy as usize * w + ix as usize])
                                        }
                                    }
                                };
                                if let Some(v) = v {
                                    let flat = ci * h * w
                                        + (iy.rem_euclid(h as i64) as usize) * w
                                        + ix.rem_euclid(w as i64) as usize;
                                    if v > max {
                                        max = v;
                                        imax = flat;
                                    }
                                    if v < min {
                                        min = v;
                                        imin = flat;
                                    }
                                }
                            }
                        }
                    }
                    // zero padding contributes literal zeros to the block
                    if pad_zero_seen {
                        if 0.0 > max {
                            max = 0.0;
                            imax = usize::MAX;
                        }
                        if 0.0 < min {
                            min = 0.0;
                            imin = usize::MAX;
                        }
                    }
                    let range = max - min;
                    let (s, stat) = if range >= 1e-12 {
                        (range, BlockStat::Range { imax, imin })
                    } else {
                        let maxabs = max.abs().max(min.abs());
                        if maxabs >= 1e-12 {
                            let (iabs, sign) = if max.abs() >= min.abs() {
                                (imax, max.signum())
                            } else {
                                (imin, min.signum())
                            };
                            (maxabs, BlockStat::Abs { iabs, sign })
                        } else {
                            (1.0, BlockStat::Const)
                        }
                    };
                    out.set(&[bi, 0, oy, ox], s);
                    stats.push(stat);
                }
            }
        }
        self.push(out, Op::BlockRange { input, ksize, padding, stats }, "block_range")
    }

    // ---- shape plumbing ----------------------------------------------------

    /// [B,G,H,W] -> [B,c_out,H,W]; output channel c copies group c % G.
    pub fn broadcast_channels(&mut self, input: NodeId, c_out: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "broadcast_channels wants [B,G,H,W], got {:?}",
                x.shape()
            )));
        }
        let (b, g, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c_out % g != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "c_out {} not a multiple of group count {}",
                c_out, g
            )));
        }
        let v = Tensor::from_fn(&[b, c_out, h, w], |idx| x.at(&[idx[0], idx[1] % g, idx[2], idx[3]]));
        self.push(v, Op::BroadcastChannels { input, c_out }, "broadcast_channels")
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(input).reshaped(shape)?;
        self.push(v, Op::Reshape(input), "reshape")
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.value(ids[0]).shape().to_vec();
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &id in ids {
            let sh = self.value(id).shape();
            if sh.len() != 4 || sh[0] != b || sh[2] != h || sh[3] != w {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    first,
                    sh
                )));
            }
            c_total += sh[1];
        }
        let mut data = Vec::with_capacity(b * c_total * h * w);
        for bi in 0..b {
            for &id in ids {
                let t = self.value(id);
                let c = t.shape()[1];
                let start = bi * c * h * w;
                data.extend_from_slice(&t.data()[start..start + c * h * w]);
            }
        }
        let v = Tensor::new(vec![b, c_total, h, w], data)?;
        self.push(v, Op::ConcatChannels(ids.to_vec()), "concat_channels")
    }

    /// Channels [start, start+len) of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if start + len > c {
            return Err(TensorError::ShapeMismatch(format!(
                "slice [{}, {}) out of {} channels",
                start,
                start + len,
                c
            )));
        }
        let mut data = Vec::with_capacity(b * len * h * w);
        for bi in 0..b {
            let s = (bi * c + start) * h * w;
            data.extend_from_slice(&x.data()[s..s + len * h * w]);
        }
        let v = Tensor::new(vec![b, len, h, w], data)?;
        self.push(v, Op::SliceChannels { input, start }, "slice_channels")
    }

    /// 2x2 average pooling; H and W must be even.
    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch(format!("avg_pool2 needs even H,W, got {}x{}", h, w)));
        }
        let v = Tensor::from_fn(&[b, c, h / 2, w / 2], |idx| {
            let (bi, ci, y, xx) = (idx[0], idx[1], idx[2] * 2, idx[3] * 2);
            0.25 * (x.at(&[bi, ci, y, xx])
                + x.at(&[bi, ci, y + 1, xx])
                + x.at(&[bi, ci, y, xx + 1])
                + x.at(&[bi, ci, y + 1, xx + 1]))
        });
        self.push(v, Op::AvgPool2(input), "avg_pool2")
    }

    /// 2x block-copy upsampling. Preserves the overall mean exactly.
    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let v = Tensor::from_fn(&[b, c, h * 2, w * 2], |idx| {
            x.at(&[idx[0], idx[1], idx[2] / 2, idx[3] / 2])
        });
        self.push(v, Op::Upsample2(input), "upsample2")
    }

    /// Hook a fixed linear map into the graph.
    pub fn linear_map(&mut self, input: NodeId, map: Arc<dyn LinearOp>) -> Result<NodeId> {
        let v = map.apply(self.value(input));
        let label = map.label();
        if !v.is_finite() {
            return Err(TensorError::NonFinite(label));
        }
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push_unchecked(v, Op::Linear { input, map }, needs))
    }

    /// k tensors of identical shape [B, ...] -> [B, k, ...].
    pub fn stack_axis1(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(TensorError::Invalid("stack of zero tensors".into()));
        }
        let sh = self.value(ids[0]).shape().to_vec();
        for &id in ids {
            if self.value(id).shape() != sh.as_slice() {
                return Err(TensorError::ShapeMismatch("stack_axis1 shape mismatch".into()));
            }
        }
        let b = sh[0];
        let inner: usize = sh[1..].iter().product();
        let k = ids.len();
        let mut data = Vec::with_capacity(b * k * inner);
        for bi in 0..b {
            for &id in ids {
                let t = self.value(id);
                data.extend_from_slice(&t.data()[bi * inner..(bi + 1) * inner]);
            }
        }
        let mut out_shape = vec![b, k];
        out_shape.extend_from_slice(&sh[1..]);
        let v = Tensor::new(out_shape, data)?;
        self.push(v, Op::StackAxis1(ids.to_vec()), "stack_axis1")
    }

    /// [B, S, ...] -> [B, ...] at the given S index.
    pub fn select_axis1(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() < 2 || index >= x.shape()[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "select_axis1 index {} of shape {:?}",
                index,
                x.shape()
            )));
        }
        let b = x.shape()[0];
        let s = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(b * inner);
        for bi in 0..b {
            let start = (bi * s + index) * inner;
            data.extend_from_slice(&x.data()[start..start + inner]);
        }
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&x.shape()[2..]);
        let v = Tensor::new(out_shape, data)?;
        self.push(v, Op::SelectAxis1 { input, index }, "select_axis1")
    }

    /// [..., T] -> [...] at the given last-axis index.
    pub fn index_last_axis(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        let rank = x.rank();
        if rank == 0 || index >= x.shape()[rank - 1] {
            return Err(TensorError::ShapeMismatch(format!(
                "index_last_axis index {} of shape {:?}",
                index,
                x.shape()
            )));
        }
        let t = x.shape()[rank - 1];
        let outer: usize = x.shape()[..rank - 1].iter().product();
        let mut data = Vec::with_capacity(outer);
        for i in 0..outer {
            data.push(x.data()[i * t + index]);
        }
        let v = Tensor::new(x.shape()[..rank - 1].to_vec(), data)?;
        self.push(v, Op::IndexLastAxis { input, index }, "index_last_axis")
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients for every node that (transitively) requires them,
    /// starting from a scalar loss. Visits each node exactly once, in
    /// reverse arena order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        if !self.nodes[i].needs_grad {
            return Ok(());
        }
        // Taking the op apart immutably, then accumulating, keeps the borrow
        // checker happy without cloning tensors we don't need.
        enum Deltas {
            None,
            One(NodeId, Tensor),
            Two(NodeId, Tensor, NodeId, Tensor),
            Many(Vec<(NodeId, Tensor)>),
        }
        let node = &self.nodes[i];
        let deltas = match &node.op {
            Op::Leaf => Deltas::None,
            Op::Add(a, b) => {
                let ga = reduce_to_shape(g, self.value(*a).shape());
                let gb = reduce_to_shape(g, self.value(*b).shape());
                Deltas::Two(*a, ga, *b, gb)
            }
            Op::Sub(a, b) => {
                let ga = reduce_to_shape(g, self.value(*a).shape());
                let gb = reduce_to_shape(&g.map(|x| -x), self.value(*b).shape());
                Deltas::Two(*a, ga, *b, gb)
            }
            Op::Mul(a, b) => {
                let gb_full = broadcast_binary(g, self.value(*a), |x, y| x * y)?;
                let ga_full = broadcast_binary(g, self.value(*b), |x, y| x * y)?;
                let ga = reduce_to_shape(&ga_full, self.value(*a).shape());
                let gb = reduce_to_shape(&gb_full, self.value(*b).shape());
                Deltas::Two(*a, ga, *b, gb)
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga_full = broadcast_binary(g, bv, |x, y| x / y)?;
                let gb_full = {
                    let t = broadcast_binary(av, bv, |x, y| -x / (y * y))?;
                    broadcast_binary(g, &t, |x, y| x * y)?
                };
                let ga = reduce_to_shape(&ga_full, av.shape());
                let gb = reduce_to_shape(&gb_full, bv.shape());
                Deltas::Two(*a, ga, *b, gb)
            }
            Op::Neg(a) => Deltas::One(*a, g.map(|x| -x)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    // subgradient at 0 is 0
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                Deltas::One(*a, d)
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv /= *xv;
                }
                Deltas::One(*a, d)
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= 2.0 * *xv;
                }
                Deltas::One(*a, d)
            }
            Op::ScaleBy(a, c) => Deltas::One(*a, g.map(|x| x * c)),
            Op::Reduce { input, op, axes, args } => {
                let x = self.value(*input);
                let mut d = Tensor::zeros(x.shape());
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let count: usize = axes.iter().map(|&ax| x.shape()[ax]).product();
                        let scale = if matches!(op, ReduceOp::Mean) { 1.0 / count as f64 } else { 1.0 };
                        let keep_axes: Vec<usize> =
                            (0..x.rank()).filter(|ax| !axes.contains(ax)).collect();
                        let out_st = strides(g.shape());
                        let mut idx = vec![0usize; x.rank()];
                        for flat in 0..x.numel() {
                            let mut o = 0;
                            for (k, &ax) in keep_axes.iter().enumerate() {
                                o += idx[ax] * out_st[k];
                            }
                            d.data_mut()[flat] = g.data()[o] * scale;
                            for ax in (0..x.rank()).rev() {
                                idx[ax] += 1;
                                if idx[ax] < x.shape()[ax] {
                                    break;
                                }
                                idx[ax] = 0;
                            }
                        }
                    }
                    ReduceOp::Min | ReduceOp::Max => {
                        for (o, &arg) in args.iter().enumerate() {
                            d.data_mut()[arg] += g.data()[o];
                        }
                    }
                }
                Deltas::One(*input, d)
            }
            Op::Conv2d { input, kernel, padding, dilation } => {
                let need_in = self.nodes[input.0].needs_grad;
                let need_k = self.nodes[kernel.0].needs_grad;
                let (gi, gk) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *padding,
                    *dilation,
                    g,
                    need_in,
                    need_k,
                );
                let mut v = Vec::new();
                if let Some(gi) = gi {
                    v.push((*input, gi));
                }
                if let Some(gk) = gk {
                    v.push((*kernel, gk));
                }
                Deltas::Many(v)
            }
            Op::BlockRange { input, stats, .. } => {
                let x = self.value(*input);
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let per_sample = c * h * w;
                let positions = g.shape()[2] * g.shape()[3];
                let mut d = Tensor::zeros(x.shape());
                for (p, stat) in stats.iter().enumerate() {
                    let bi = p / positions;
                    let gv = g.data()[p];
                    match stat {
                        BlockStat::Range { imax, imin } => {
                            if *imax != usize::MAX {
                                d.data_mut()[bi * per_sample + imax] += gv;
                            }
                            if *imin != usize::MAX {
                                d.data_mut()[bi * per_sample + imin] -= gv;
                            }
                        }
                        BlockStat::Abs { iabs, sign } => {
                            if *iabs != usize::MAX {
                                d.data_mut()[bi * per_sample + iabs] += gv * sign;
                            }
                        }
                        BlockStat::Const => {}
                    }
                }
                Deltas::One(*input, d)
            }
            Op::BroadcastChannels { input, c_out } => {
                let x = self.value(*input);
                let (b, gr, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut d = Tensor::zeros(x.shape());
                for bi in 0..b {
                    for co in 0..*c_out {
                        let gi = co % gr;
                        for y in 0..h {
                            for xx in 0..w {
                                let v = g.at(&[bi, co, y, xx]);
                                let o = offset(x.shape(), &[bi, gi, y, xx]);
                                d.data_mut()[o] += v;
                            }
                        }
                    }
                }
                Deltas::One(*input, d)
            }
            Op::Reshape(a) => {
                let d = g.reshaped(self.value(*a).shape())?;
                Deltas::One(*a, d)
            }
            Op::ConcatChannels(ids) => {
                let (b, h, w) = {
                    let sh = g.shape();
                    (sh[0], sh[2], sh[3])
                };
                let mut out = Vec::with_capacity(ids.len());
                let mut start = 0;
                for &id in ids {
                    let c = self.value(id).shape()[1];
                    let mut d = Tensor::zeros(self.value(id).shape());
                    let c_total = g.shape()[1];
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let v = g.data()
                                        [((bi * c_total + start + ci) * h + y) * w + xx];
                                    d.data_mut()[((bi * c + ci) * h + y) * w + xx] = v;
                                }
                            }
                        }
                    }
                    out.push((id, d));
                    start += c;
                }
                Deltas::Many(out)
            }
            Op::SliceChannels { input, start } => {
                let x = self.value(*input);
                let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let len = g.shape()[1];
                let mut d = Tensor::zeros(x.shape());
                for bi in 0..b {
                    for ci in 0..len {
                        for y in 0..h {
                            for xx in 0..w {
                                let v = g.data()[((bi * len + ci) * h + y) * w + xx];
                                d.data_mut()[((bi * c + start + ci) * h + y) * w + xx] = v;
                            }
                        }
                    }
                }
                Deltas::One(*input, d)
            }
            Op::AvgPool2(a) => {
                let x = self.value(*a);
                let d = Tensor::from_fn(x.shape(), |idx| {
                    0.25 * g.at(&[idx[0], idx[1], idx[2] / 2, idx[3] / 2])
                });
                Deltas::One(*a, d)
            }
            Op::Upsample2(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.shape());
                let (b, c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let v = g.at(&[bi, ci, y, xx]);
                                let o = offset(x.shape(), &[bi, ci, y / 2, xx / 2]);
                                d.data_mut()[o] += v;
                            }
                        }
                    }
                }
                Deltas::One(*a, d)
            }
            Op::Linear { input, map } => {
                let d = map.adjoint(g, self.value(*input).shape());
                Deltas::One(*input, d)
            }
            Op::StackAxis1(ids) => {
                let b = g.shape()[0];
                let k = g.shape()[1];
                let inner: usize = g.shape()[2..].iter().product();
                let mut out = Vec::with_capacity(ids.len());
                for (j, &id) in ids.iter().enumerate() {
                    let mut d = Tensor::zeros(self.value(id).shape());
                    for bi in 0..b {
                        let src = (bi * k + j) * inner;
                        d.data_mut()[bi * inner..(bi + 1) * inner]
                            .copy_from_slice(&g.data()[src..src + inner]);
                    }
                    out.push((id, d));
                }
                Deltas::Many(out)
            }
            Op::SelectAxis1 { input, index } => {
                let x = self.value(*input);
                let b = x.shape()[0];
                let s = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let mut d = Tensor::zeros(x.shape());
                for bi in 0..b {
                    let dst = (bi * s + index) * inner;
                    d.data_mut()[dst..dst + inner]
                        .copy_from_slice(&g.data()[bi * inner..(bi + 1) * inner]);
                }
                Deltas::One(*input, d)
            }
            Op::IndexLastAxis { input, index } => {
                let x = self.value(*input);
                let t = x.shape()[x.rank() - 1];
                let mut d = Tensor::zeros(x.shape());
                for (i, &v) in g.data().iter().enumerate() {
                    d.data_mut()[i * t + index] = v;
                }
                Deltas::One(*input, d)
            }
        };
        match deltas {
            Deltas::None => {}
            Deltas::One(a, d) => self.accum(a, d),
            Deltas::Two(a, da, b, db) => {
                self.accum(a, da);
                self.accum(b, db);
            }
            Deltas::Many(v) => {
                for (id, d) in v {
                    self.accum(id, d);
                }
            }
        }
        Ok(())
    }
}

/// Shapes broadcast if their ranks match and each axis agrees or is 1.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "broadcast rank mismatch: {:?} vs {:?}",
            a, b
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(TensorError::ShapeMismatch(format!("cannot broadcast {:?} with {:?}", a, b)))
            }
        })
        .collect()
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let rank = out_shape.len();
    let sa = strides(a.shape());
    let sb = strides(b.shape());
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..rank {
            if a.shape()[ax] > 1 {
                oa += idx[ax] * sa[ax];
            }
            if b.shape()[ax] > 1 {
                ob += idx[ax] * sb[ax];
            }
        }
        data.push(f(a.data()[oa], b.data()[ob]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `g` over the axes where `shape` is 1 but `g` is wider.
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let rank = shape.len();
    let st = strides(shape);
    let mut out = Tensor::zeros(shape);
    let mut idx = vec![0usize; rank];
    for &v in g.data() {
        let mut o = 0;
        for ax in 0..rank {
            if shape[ax] > 1 {
                o += idx[ax] * st[ax];
            }
        }
        out.data_mut()[o] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < g.shape()[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
