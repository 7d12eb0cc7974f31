//! Reverse-mode autodiff over a flat operation tape.
//!
//! A [`Graph`] is an append-only list of nodes; insertion order is the
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once and adds its contribution into every
//! input's gradient buffer. Values are computed eagerly as nodes are
//! pushed. A fresh graph is built per training or inference step and
//! dropped afterwards; the pass is single-threaded.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{shape_str, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Pointwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
}

/// Operation record. Each variant stores whatever the backward rule needs
/// beyond the input values themselves.
#[derive(Debug, Clone)]
enum Op {
    /// Parameter or constant input.
    Leaf,
    /// (x, w, b) convolution with the stored geometry.
    Conv2d(kernels::ConvDims),
    Pointwise(Pointwise),
    /// [n,c,h,w] -> [n,c,1,1] spatial mean.
    GlobalAvgPool,
    /// Channel concatenation; stores each input's channel count.
    ConcatChannels(Vec<usize>),
    /// Channel slice starting at `from` (length from the output shape).
    SliceChannels { from: usize },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Abs,
    /// (x [n, ...], s [n]) -> x broadcast-scaled by its sample's factor.
    ScalePerSample,
    /// (f1, f2) -> all-pairs correlation volume.
    CorrVolume,
    /// (corr, flow) -> windowed bilinear samples.
    CorrLookup { radius: usize },
    /// [n,2] logits -> [n] first-class softmax probability at temperature
    /// tau, computed as sigmoid((z0 - z1)/tau).
    GateFromLogits { tau: f64 },
    /// (pred, target) -> [n] mean absolute difference over valid pixels
    /// and channels. `counts` holds each sample's valid-pixel count.
    MaskedL1Mean { valid: Vec<bool>, counts: Vec<usize> },
    MeanAll,
    SumAll,
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The gradient buffer of a node after [`Graph::backward`]. `None`
    /// when the node was not reached or does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Meters the forward cost of every operation recorded on the tape.
    ///
    /// Costs follow the same table as the architecture walk in
    /// [`crate::flops`]: convolution `2·k²·cin·cout·ho·wo` plus
    /// `cout·ho·wo` for the bias; relu and elementwise arithmetic 1 per
    /// output element; sigmoid and tanh 4 per element; global average
    /// pooling `c·(h·w + 1)` per sample; correlation volume
    /// `(2·c + 1)·(h·w)²` per sample; windowed bilinear lookup 16 per
    /// output element; the gate 8 per sample; concat, slice, reshape,
    /// and leaves are free. Loss reductions carry nominal per-element
    /// costs so the meter covers the whole tape, but component
    /// comparisons only ever meter loss-free subgraphs.
    pub fn tape_flops(&self) -> u64 {
        self.nodes.iter().map(|n| self.node_flops(n)).sum()
    }

    fn node_flops(&self, node: &Node) -> u64 {
        let out = node.value.numel() as u64;
        match &node.op {
            Op::Leaf | Op::ConcatChannels(_) | Op::SliceChannels { .. } | Op::Reshape => 0,
            Op::Conv2d(d) => {
                let (k, ho, wo) = (d.k as u64, d.ho() as u64, d.wo() as u64);
                let per_sample = 2 * k * k * (d.cin as u64) * (d.cout as u64) * ho * wo
                    + (d.cout as u64) * ho * wo;
                d.batch as u64 * per_sample
            }
            Op::Pointwise(Pointwise::Relu) => out,
            Op::Pointwise(Pointwise::Sigmoid) | Op::Pointwise(Pointwise::Tanh) => 4 * out,
            Op::GlobalAvgPool => {
                let s = self.nodes[node.inputs[0].0].value.shape();
                (s[0] * s[1]) as u64 * (s[2] as u64 * s[3] as u64 + 1)
            }
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Scale(_)
            | Op::AddScalar
            | Op::Abs
            | Op::ScalePerSample => out,
            Op::CorrVolume => {
                let s = self.nodes[node.inputs[0].0].value.shape();
                let hw = (s[2] * s[3]) as u64;
                s[0] as u64 * (2 * s[1] as u64 + 1) * hw * hw
            }
            Op::CorrLookup { .. } => 16 * out,
            Op::GateFromLogits { .. } => 8 * out,
            Op::MaskedL1Mean { .. } => {
                4 * self.nodes[node.inputs[0].0].value.numel() as u64 + 2 * out
            }
            Op::MeanAll => self.nodes[node.inputs[0].0].value.numel() as u64 + 1,
            Op::SumAll => self.nodes[node.inputs[0].0].value.numel() as u64,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// A parameter leaf. `trainable` controls whether backward reaches it.
    pub fn param(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, trainable)
    }

    /// Re-enters a node's current value as a fresh constant, cutting the
    /// gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    // ── Forward builders ────────────────────────────────────────────────

    /// 2-D convolution: `x [n,ci,h,w]`, `w [co,ci,k,k]`, `b [co]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                "rank-4 input and weight",
                format!("input {}, weight {}", shape_str(&xs), shape_str(&ws)),
            ));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("weight [co,{},k,k]", xs[1]),
                shape_str(&ws),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias [{}]", ws[0]), shape_str(&bs)));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be positive"));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("spatial extent >= kernel {}", ws[2]),
                format!("{}x{} with pad {}", xs[2], xs[3], pad),
            ));
        }
        let dims = kernels::ConvDims {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let shape = [xs[0], ws[0], dims.ho(), dims.wo()];
        let rg = self.any_requires_grad(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d(dims),
            vec![x, w, b],
            Tensor::from_vec(&shape, out)?,
            rg,
        ))
    }

    fn pointwise(&mut self, x: NodeId, kind: Pointwise) -> NodeId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| match kind {
                Pointwise::Relu => a.max(0.0),
                Pointwise::Sigmoid => stable_sigmoid(a),
                Pointwise::Tanh => a.tanh(),
            })
            .collect();
        let t = Tensor::from_vec(&v.shape().to_vec(), data).expect("pointwise preserves shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Pointwise(kind), vec![x], t, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, Pointwise::Tanh)
    }

    /// `[n,c,h,w] -> [n,c,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", "rank-4 input", shape_str(&xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = src[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::GlobalAvgPool,
            vec![x],
            Tensor::from_vec(&[n, c, 1, 1], out)?,
            rg,
        ))
    }

    /// Concatenates rank-4 inputs along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("concat_channels: needs at least one input"));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", "rank-4 inputs", shape_str(&first)));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("[{n}, *, {h}, {w}]"),
                    shape_str(s),
                ));
            }
            channels.push(s[1]);
        }
        let ctot: usize = channels.iter().sum();
        let mut out = vec![0.0; n * ctot * h * w];
        let hw = h * w;
        for s_ix in 0..n {
            let mut off = 0;
            for (xi, &x) in xs.iter().enumerate() {
                let c = channels[xi];
                let src = self.value(x).data();
                out[(s_ix * ctot + off) * hw..(s_ix * ctot + off + c) * hw]
                    .copy_from_slice(&src[s_ix * c * hw..(s_ix + 1) * c * hw]);
                off += c;
            }
        }
        let rg = self.any_requires_grad(xs);
        Ok(self.push(
            Op::ConcatChannels(channels),
            xs.to_vec(),
            Tensor::from_vec(&[n, ctot, h, w], out)?,
            rg,
        ))
    }

    /// Keeps channels `from..to` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || from >= to || to > xs[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("rank-4 with {from} < {to} <= channels"),
                shape_str(&xs),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let keep = to - from;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * keep * hw];
        for s_ix in 0..n {
            out[s_ix * keep * hw..(s_ix + 1) * keep * hw]
                .copy_from_slice(&src[(s_ix * c + from) * hw..(s_ix * c + to) * hw]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::SliceChannels { from },
            vec![x],
            Tensor::from_vec(&[n, keep, h, w], out)?,
            rg,
        ))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape("elementwise op", shape_str(&sa), shape_str(sb)));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = match op {
            Op::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            Op::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
            Op::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
            _ => unreachable!("binary dispatch"),
        };
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(op, vec![a, b], Tensor::from_vec(&sa, data)?, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let t = Tensor::from_vec(&v.shape().to_vec(), data).expect("scale preserves shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Scale(c), vec![x], t, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a + c).collect();
        let t = Tensor::from_vec(&v.shape().to_vec(), data).expect("add_scalar preserves shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::AddScalar, vec![x], t, rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.abs()).collect();
        let t = Tensor::from_vec(&v.shape().to_vec(), data).expect("abs preserves shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Abs, vec![x], t, rg)
    }

    /// Scales sample `i` of `x` (leading axis) by `s[i]`.
    pub fn scale_per_sample(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(s).shape();
        if xs.is_empty() || ss != [xs[0]] {
            return Err(Error::shape(
                "scale_per_sample",
                format!("factors [{}]", xs.first().copied().unwrap_or(0)),
                shape_str(ss),
            ));
        }
        let per = self.value(x).numel() / xs[0];
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..xs[0] {
            let f = sd[i];
            for j in 0..per {
                out[i * per + j] = xd[i * per + j] * f;
            }
        }
        let rg = self.any_requires_grad(&[x, s]);
        Ok(self.push(Op::ScalePerSample, vec![x, s], Tensor::from_vec(&xs, out)?, rg))
    }

    /// All-pairs correlation volume of two `[n,c,h,w]` feature maps,
    /// shaped `[n, h, w, h, w]` and scaled by `1/sqrt(c)`.
    pub fn corr_volume(&mut self, f1: NodeId, f2: NodeId) -> Result<NodeId> {
        let s1 = self.value(f1).shape().to_vec();
        let s2 = self.value(f2).shape();
        if s1.len() != 4 || s1 != s2 {
            return Err(Error::shape("corr_volume", shape_str(&s1), shape_str(s2)));
        }
        let (n, c, h, w) = (s1[0], s1[1], s1[2], s1[3]);
        let out =
            kernels::corr_volume_forward(self.value(f1).data(), self.value(f2).data(), n, c, h * w);
        let rg = self.any_requires_grad(&[f1, f2]);
        Ok(self.push(
            Op::CorrVolume,
            vec![f1, f2],
            Tensor::from_vec(&[n, h, w, h, w], out)?,
            rg,
        ))
    }

    /// Windowed bilinear lookup; see [`kernels::corr_lookup_forward`].
    /// Output is `[n, (2r+1)^2, h, w]`.
    pub fn corr_lookup(&mut self, corr: NodeId, flow: NodeId, radius: usize) -> Result<NodeId> {
        let cs = self.value(corr).shape().to_vec();
        let fs = self.value(flow).shape().to_vec();
        if cs.len() != 5 || cs[1] != cs[3] || cs[2] != cs[4] {
            return Err(Error::shape("corr_lookup", "[n,h,w,h,w] volume", shape_str(&cs)));
        }
        let (n, h, w) = (cs[0], cs[1], cs[2]);
        if fs != [n, 2, h, w] {
            return Err(Error::shape(
                "corr_lookup",
                format!("flow [{n},2,{h},{w}]"),
                shape_str(&fs),
            ));
        }
        let side = 2 * radius + 1;
        let out = kernels::corr_lookup_forward(
            self.value(corr).data(),
            self.value(flow).data(),
            n,
            h,
            w,
            radius,
        );
        let rg = self.any_requires_grad(&[corr, flow]);
        Ok(self.push(
            Op::CorrLookup { radius },
            vec![corr, flow],
            Tensor::from_vec(&[n, side * side, h, w], out)?,
            rg,
        ))
    }

    /// Two-class softmax probability of class 0 at temperature `tau`,
    /// from `[n, 2]` logits. Equivalent to the max-subtracted softmax and
    /// computed as `sigmoid((z0 - z1)/tau)`, which never overflows.
    pub fn gate_from_logits(&mut self, z: NodeId, tau: f64) -> Result<NodeId> {
        let zs = self.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != 2 {
            return Err(Error::shape("gate_from_logits", "[n, 2] logits", shape_str(&zs)));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::contract("gate_from_logits: tau must be positive"));
        }
        let n = zs[0];
        let zd = self.value(z).data();
        let out: Vec<f64> = (0..n)
            .map(|i| stable_sigmoid((zd[2 * i] - zd[2 * i + 1]) / tau))
            .collect();
        let rg = self.nodes[z.0].requires_grad;
        Ok(self.push(
            Op::GateFromLogits { tau },
            vec![z],
            Tensor::from_vec(&[n], out)?,
            rg,
        ))
    }

    /// Per-sample mean absolute difference over valid pixels and all
    /// channels: inputs `[n,c,h,w]`, `valid` flattened `[n,h,w]`, output
    /// `[n]`. Errors if any sample has an empty valid set.
    pub fn masked_l1_mean(&mut self, pred: NodeId, target: NodeId, valid: &[bool]) -> Result<NodeId> {
        let ps = self.value(pred).shape().to_vec();
        let ts = self.value(target).shape();
        if ps.len() != 4 || ps != ts {
            return Err(Error::shape("masked_l1_mean", shape_str(&ps), shape_str(ts)));
        }
        let (n, c, h, w) = (ps[0], ps[1], ps[2], ps[3]);
        if valid.len() != n * h * w {
            return Err(Error::shape(
                "masked_l1_mean",
                format!("valid mask of {} entries", n * h * w),
                format!("{} entries", valid.len()),
            ));
        }
        let mut counts = vec![0usize; n];
        for i in 0..n {
            counts[i] = valid[i * h * w..(i + 1) * h * w].iter().filter(|&&v| v).count();
            if counts[i] == 0 {
                return Err(Error::contract(format!(
                    "masked_l1_mean: sample {i} has no valid pixels"
                )));
            }
        }
        let pd = self.value(pred).data();
        let td = self.value(target).data();
        let hw = h * w;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for px in 0..hw {
                    if valid[i * hw + px] {
                        acc += (pd[base + px] - td[base + px]).abs();
                    }
                }
            }
            out[i] = acc / (c * counts[i]) as f64;
        }
        let rg = self.any_requires_grad(&[pred, target]);
        Ok(self.push(
            Op::MaskedL1Mean {
                valid: valid.to_vec(),
                counts,
            },
            vec![pred, target],
            Tensor::from_vec(&[n], out)?,
            rg,
        ))
    }

    /// Mean over all elements, as a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::MeanAll, vec![x], Tensor::scalar(m), rg)
    }

    /// Sum over all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::SumAll, vec![x], Tensor::scalar(s), rg)
    }

    /// Reinterprets the buffer under a new shape with the same element
    /// count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", v.numel()),
                shape_str(shape),
            ));
        }
        let t = Tensor::from_vec(shape, v.data().to_vec())?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape, vec![x], t, rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// over all paths; nodes with `requires_grad == false` are skipped
    /// along with their subtrees.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {}",
                shape_str(self.value(loss).shape())
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "backward: loss does not depend on any trainable parameter",
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                self.grads[idx] = None;
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout)?;
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    /// Adds `contrib` into the gradient buffer of `target` (which is
    /// always earlier on the tape than the node being processed).
    fn accum(&mut self, target: NodeId, contrib: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[target.0];
        match slot {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(contrib) {
                    *d += s;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) -> Result<()> {
        let inputs = self.nodes[idx].inputs.clone();
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d(dims) => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(inputs[0]).data(),
                    self.value(inputs[1]).data(),
                    gout,
                    &dims,
                );
                self.accum(inputs[0], &dx);
                self.accum(inputs[1], &dw);
                self.accum(inputs[2], &db);
            }
            Op::Pointwise(kind) => {
                let x = self.value(inputs[0]).data();
                let y = self.value(NodeId(idx)).data();
                let dx: Vec<f64> = match kind {
                    // Subgradient 0 at the kink.
                    Pointwise::Relu => x
                        .iter()
                        .zip(gout)
                        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                        .collect(),
                    Pointwise::Sigmoid => y.iter().zip(gout).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
                    Pointwise::Tanh => y.iter().zip(gout).map(|(&t, &g)| g * (1.0 - t * t)).collect(),
                };
                self.accum(inputs[0], &dx);
            }
            Op::GlobalAvgPool => {
                let xs = self.value(inputs[0]).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    let g = gout[i] / hw as f64;
                    for v in &mut dx[i * hw..(i + 1) * hw] {
                        *v = g;
                    }
                }
                self.accum(inputs[0], &dx);
            }
            Op::ConcatChannels(channels) => {
                let os = self.value(NodeId(idx)).shape().to_vec();
                let (n, ctot, h, w) = (os[0], os[1], os[2], os[3]);
                let hw = h * w;
                let mut off = 0;
                for (xi, &c) in channels.iter().enumerate() {
                    let mut dx = vec![0.0; n * c * hw];
                    for s_ix in 0..n {
                        dx[s_ix * c * hw..(s_ix + 1) * c * hw].copy_from_slice(
                            &gout[(s_ix * ctot + off) * hw..(s_ix * ctot + off + c) * hw],
                        );
                    }
                    self.accum(inputs[xi], &dx);
                    off += c;
                }
            }
            Op::SliceChannels { from } => {
                let xs = self.value(inputs[0]).shape().to_vec();
                let os = self.value(NodeId(idx)).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let keep = os[1];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for s_ix in 0..n {
                    dx[(s_ix * c + from) * hw..(s_ix * c + from + keep) * hw]
                        .copy_from_slice(&gout[s_ix * keep * hw..(s_ix + 1) * keep * hw]);
                }
                self.accum(inputs[0], &dx);
            }
            Op::Add => {
                self.accum(inputs[0], gout);
                self.accum(inputs[1], gout);
            }
            Op::Sub => {
                self.accum(inputs[0], gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.accum(inputs[1], &neg);
            }
            Op::Mul => {
                let a = self.value(inputs[0]).data().to_vec();
                let b = self.value(inputs[1]).data();
                let da: Vec<f64> = gout.iter().zip(b).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gout.iter().zip(&a).map(|(g, x)| g * x).collect();
                self.accum(inputs[0], &da);
                self.accum(inputs[1], &db);
            }
            Op::Scale(c) => {
                let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.accum(inputs[0], &dx);
            }
            Op::AddScalar => {
                self.accum(inputs[0], gout);
            }
            Op::Abs => {
                let x = self.value(inputs[0]).data();
                // Subgradient 0 at the kink.
                let dx: Vec<f64> = x
                    .iter()
                    .zip(gout)
                    .map(|(&a, &g)| {
                        if a > 0.0 {
                            g
                        } else if a < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accum(inputs[0], &dx);
            }
            Op::ScalePerSample => {
                let xs = self.value(inputs[0]).shape().to_vec();
                let per = self.value(inputs[0]).numel() / xs[0];
                let xd = self.value(inputs[0]).data().to_vec();
                let sd = self.value(inputs[1]).data();
                let mut dx = vec![0.0; xd.len()];
                let mut ds = vec![0.0; xs[0]];
                for i in 0..xs[0] {
                    let f = sd[i];
                    for j in 0..per {
                        dx[i * per + j] = gout[i * per + j] * f;
                        ds[i] += gout[i * per + j] * xd[i * per + j];
                    }
                }
                self.accum(inputs[0], &dx);
                self.accum(inputs[1], &ds);
            }
            Op::CorrVolume => {
                let s1 = self.value(inputs[0]).shape().to_vec();
                let (n, c, h, w) = (s1[0], s1[1], s1[2], s1[3]);
                let (df1, df2) = kernels::corr_volume_backward(
                    self.value(inputs[0]).data(),
                    self.value(inputs[1]).data(),
                    gout,
                    n,
                    c,
                    h * w,
                );
                self.accum(inputs[0], &df1);
                self.accum(inputs[1], &df2);
            }
            Op::CorrLookup { radius } => {
                let cs = self.value(inputs[0]).shape().to_vec();
                let (n, h, w) = (cs[0], cs[1], cs[2]);
                let (dcorr, dflow) = kernels::corr_lookup_backward(
                    self.value(inputs[0]).data(),
                    self.value(inputs[1]).data(),
                    gout,
                    n,
                    h,
                    w,
                    radius,
                );
                self.accum(inputs[0], &dcorr);
                self.accum(inputs[1], &dflow);
            }
            Op::GateFromLogits { tau } => {
                let p = self.value(NodeId(idx)).data();
                let n = p.len();
                let mut dz = vec![0.0; 2 * n];
                for i in 0..n {
                    let d = gout[i] * p[i] * (1.0 - p[i]) / tau;
                    dz[2 * i] = d;
                    dz[2 * i + 1] = -d;
                }
                self.accum(inputs[0], &dz);
            }
            Op::MaskedL1Mean { valid, counts } => {
                let ps = self.value(inputs[0]).shape().to_vec();
                let (n, c, h, w) = (ps[0], ps[1], ps[2], ps[3]);
                let hw = h * w;
                let pd = self.value(inputs[0]).data().to_vec();
                let td = self.value(inputs[1]).data();
                let mut dp = vec![0.0; pd.len()];
                for i in 0..n {
                    let norm = gout[i] / (c * counts[i]) as f64;
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for px in 0..hw {
                            if valid[i * hw + px] {
                                let diff = pd[base + px] - td[base + px];
                                // Subgradient 0 at the kink.
                                dp[base + px] = if diff > 0.0 {
                                    norm
                                } else if diff < 0.0 {
                                    -norm
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
                if self.nodes[inputs[1].0].requires_grad {
                    let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                    self.accum(inputs[1], &dt);
                }
                self.accum(inputs[0], &dp);
            }
            Op::MeanAll => {
                let n = self.value(inputs[0]).numel();
                let g = gout[0] / n as f64;
                self.accum(inputs[0], &vec![g; n]);
            }
            Op::SumAll => {
                let n = self.value(inputs[0]).numel();
                self.accum(inputs[0], &vec![gout[0]; n]);
            }
            Op::Reshape => {
                self.accum(inputs[0], gout);
            }
        }
        Ok(())
    }
}

/// Overflow-safe logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
