//! Reverse-mode autodiff over an eagerly-evaluated tape.
//!
//! A [`Graph`] is an arena of nodes; each builder method runs the forward
//! kernel immediately and records an op. Because ops are recorded in
//! execution order the arena is topologically sorted, and [`Graph::backward`]
//! is a single reverse sweep that visits each node exactly once. A graph is
//! confined to one execution context; independent graphs may run on separate
//! threads.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::kernels::{self, Activation};
use super::{ensure_finite, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

enum Op<T> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    SoftmaxRows {
        x: NodeId,
    },
    /// `D[i,j] = ||q_i - k_j||²`
    PairwiseSqDist {
        q: NodeId,
        k: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        pad: usize,
    },
    Pool2d {
        x: NodeId,
        sh: usize,
        sw: usize,
        mode: PoolMode,
        argmax: Option<Vec<usize>>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    PixelShuffle {
        x: NodeId,
        r: usize,
    },
    /// `out[ch, i] = in[ch, src[i]]` over flat spatial indices; covers
    /// reflect-pad, cyclic roll and crop in one copy.
    RemapSpatial {
        x: NodeId,
        src: Rc<Vec<usize>>,
        out_hw: (usize, usize),
    },
    /// `[c,h,w]` feature map → `[N, c]` token rows at the given flat
    /// spatial positions.
    GatherTokens {
        fmap: NodeId,
        positions: Rc<Vec<usize>>,
    },
    /// Inverse of a set of gathers that jointly cover every position once.
    ScatterTokens {
        groups: Vec<NodeId>,
        positions: Vec<Rc<Vec<usize>>>,
        c: usize,
        hw: (usize, usize),
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    /// `[c,h,w]` → `[1,c]` spatial mean per channel.
    GlobalAvgPool {
        x: NodeId,
    },
    /// Multiply channel `ch` of `x` by `gate[0, ch]`.
    ChannelScale {
        x: NodeId,
        gate: NodeId,
    },
    /// `out[i] = x[i] + table[idx[i]]` (relative-position bias lookup).
    AddIndexedBias {
        x: NodeId,
        table: NodeId,
        idx: Rc<Vec<usize>>,
    },
    SumAll {
        x: NodeId,
    },
    /// Mean absolute error between two same-shaped tensors (scalar output).
    L1Loss {
        a: NodeId,
        b: NodeId,
    },
    /// Fused exact-attention head: `softmax(q·kᵀ·scale + bias + mask)·v`.
    /// `att` is the saved attention map for the backward pass.
    AttnCore {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: T,
        bias: Option<(NodeId, Rc<Vec<usize>>)>,
        att: Tensor<T>,
    },
    /// Fused anchored-attention head, evaluated right-to-left:
    /// `softmax(sim(q,a))·(softmax(sim(a,k))·v)`. Saves both maps and the
    /// distilled feature `z`.
    AnchoredCore {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        a: NodeId,
        dot: bool,
        scale: T,
        m_e: Tensor<T>,
        m_d: Tensor<T>,
        z: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-node gradients produced by [`Graph::backward`]. Nodes not reachable
/// from the loss have no entry; parameters read them as zero.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

/// The autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_leaves: Vec<(usize, NodeId)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Insert a constant/input leaf. Rejects non-finite values so the
    /// all-finite invariant holds inductively for every downstream op.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        ensure_finite(&value, "leaf input")?;
        Ok(self.push(value, Op::Leaf))
    }

    /// Insert a parameter leaf; `param_index` keys the gradient scatter in
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, param_index: usize, value: Tensor<T>) -> Result<NodeId> {
        let id = self.leaf(value)?;
        self.param_leaves.push((param_index, id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::transpose(self.value(x))?;
        Ok(self.push(out, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        ensure_finite(&out, "scale output")?;
        Ok(self.push(out, Op::Scale { x, factor }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    pub fn pairwise_sqdist(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        let (nq, d) = self.value(q).dims2()?;
        let (nk, d2) = self.value(k).dims2()?;
        if d != d2 {
            return Err(Error::shape(format!(
                "pairwise_sqdist feature dims differ: {d} vs {d2}"
            )));
        }
        let mut out = Tensor::zeros(&[nq, nk]);
        {
            let (qd, kd, od) = (self.value(q).data(), self.value(k).data(), out.data_mut());
            for i in 0..nq {
                for j in 0..nk {
                    let mut s = T::zero();
                    for t in 0..d {
                        let dlt = qd[i * d + t] - kd[j * d + t];
                        s += dlt * dlt;
                    }
                    od[i * nk + j] = s;
                }
            }
        }
        ensure_finite(&out, "pairwise_sqdist output")?;
        Ok(self.push(out, Op::PairwiseSqDist { q, k }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, pad: usize) -> Result<NodeId> {
        let out = kernels::conv2d(self.value(x), self.value(k), self.value(b), pad)?;
        Ok(self.push(out, Op::Conv2d { x, k, b, pad }))
    }

    pub fn pool2d_axes(
        &mut self,
        x: NodeId,
        sh: usize,
        sw: usize,
        mode: PoolMode,
    ) -> Result<NodeId> {
        let (out, argmax) =
            kernels::pool2d_axes(self.value(x), sh, sw, mode == PoolMode::Max)?;
        Ok(self.push(
            out,
            Op::Pool2d {
                x,
                sh,
                sw,
                mode,
                argmax,
            },
        ))
    }

    pub fn pool2d(&mut self, x: NodeId, s: usize, mode: PoolMode) -> Result<NodeId> {
        self.pool2d_axes(x, s, s, mode)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let out = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let out = kernels::activation(self.value(x), kind)?;
        Ok(self.push(out, Op::Activation { x, kind }))
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let out = kernels::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(out, Op::PixelShuffle { x, r }))
    }

    pub fn remap_spatial(
        &mut self,
        x: NodeId,
        src: Rc<Vec<usize>>,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if src.len() != out_h * out_w {
            return Err(Error::Internal(format!(
                "remap table has {} entries for a {}x{} target",
                src.len(),
                out_h,
                out_w
            )));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        {
            let (xd, od) = (self.value(x).data(), out.data_mut());
            let oplane = out_h * out_w;
            for ch in 0..c {
                let xp = &xd[ch * plane..(ch + 1) * plane];
                let op = &mut od[ch * oplane..(ch + 1) * oplane];
                for (i, &s) in src.iter().enumerate() {
                    op[i] = xp[s];
                }
            }
        }
        Ok(self.push(
            out,
            Op::RemapSpatial {
                x,
                src,
                out_hw: (out_h, out_w),
            },
        ))
    }

    pub fn gather_tokens(&mut self, fmap: NodeId, positions: Rc<Vec<usize>>) -> Result<NodeId> {
        let (c, h, w) = self.value(fmap).dims3()?;
        let plane = h * w;
        let n = positions.len();
        let mut out = Tensor::zeros(&[n, c]);
        {
            let (xd, od) = (self.value(fmap).data(), out.data_mut());
            for (i, &p) in positions.iter().enumerate() {
                debug_assert!(p < plane);
                for ch in 0..c {
                    od[i * c + ch] = xd[ch * plane + p];
                }
            }
        }
        Ok(self.push(out, Op::GatherTokens { fmap, positions }))
    }

    pub fn scatter_tokens(
        &mut self,
        groups: &[NodeId],
        positions: &[Rc<Vec<usize>>],
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        if groups.is_empty() || groups.len() != positions.len() {
            return Err(Error::Internal(
                "scatter_tokens: group/position count mismatch".into(),
            ));
        }
        let (_, c) = self.value(groups[0]).dims2()?;
        let plane = h * w;
        let mut covered = vec![false; plane];
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let od = out.data_mut();
            for (gi, (&g, pos)) in groups.iter().zip(positions.iter()).enumerate() {
                let t = &self.nodes[g.0].value;
                let (n, cg) = t.dims2()?;
                if cg != c || n != pos.len() {
                    return Err(Error::Internal(format!(
                        "scatter_tokens group {gi}: tokens {:?} vs {} positions",
                        t.shape(),
                        pos.len()
                    )));
                }
                let td = t.data();
                for (i, &p) in pos.iter().enumerate() {
                    if p >= plane || covered[p] {
                        return Err(Error::Internal(format!(
                            "scatter_tokens: position {p} out of range or covered twice"
                        )));
                    }
                    covered[p] = true;
                    for ch in 0..c {
                        od[ch * plane + p] = td[i * c + ch];
                    }
                }
            }
        }
        if !covered.iter().all(|&v| v) {
            return Err(Error::Internal(
                "scatter_tokens: incomplete spatial coverage".into(),
            ));
        }
        Ok(self.push(
            out,
            Op::ScatterTokens {
                groups: groups.to_vec(),
                positions: positions.to_vec(),
                c,
                hw: (h, w),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::shape(format!(
                "slice_rows {start}..{} out of {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of {n} cols",
                start + len
            )));
        }
        let mut out = Tensor::zeros(&[m, len]);
        {
            let (xd, od) = (self.value(x).data(), out.data_mut());
            for i in 0..m {
                od[i * len..(i + 1) * len]
                    .copy_from_slice(&xd[i * n + start..i * n + start + len]);
            }
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero parts"));
        }
        let n = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, nc) = self.value(p).dims2()?;
            if nc != n {
                return Err(Error::shape(format!(
                    "concat_rows width mismatch: {nc} vs {n}"
                )));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(vec![rows, n], data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero parts"));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.value(p).dims2().map(|(_, w)| w))
            .collect::<Result<_>>()?;
        for &p in parts {
            if self.value(p).dims2()?.0 != m {
                return Err(Error::shape("concat_cols row-count mismatch"));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[m, total]);
        {
            let od = out.data_mut();
            let mut off = 0;
            for (&p, &wd) in parts.iter().zip(widths.iter()) {
                let pd = self.nodes[p.0].value.data();
                for i in 0..m {
                    od[i * total + off..i * total + off + wd]
                        .copy_from_slice(&pd[i * wd..(i + 1) * wd]);
                }
                off += wd;
            }
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let inv = T::from_f64c(1.0 / plane as f64);
        let mut out = Tensor::zeros(&[1, c]);
        {
            let (xd, od) = (self.value(x).data(), out.data_mut());
            for ch in 0..c {
                let mut s = T::zero();
                for &v in &xd[ch * plane..(ch + 1) * plane] {
                    s += v;
                }
                od[ch] = s * inv;
            }
        }
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn channel_scale(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        let gs = self.value(gate).shape();
        if gs != [1, c] {
            return Err(Error::shape(format!(
                "channel gate {gs:?} does not match {c} channels"
            )));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let (xd, gd, od) = (
                self.value(x).data(),
                self.value(gate).data(),
                out.data_mut(),
            );
            for ch in 0..c {
                let g = gd[ch];
                for p in 0..plane {
                    od[ch * plane + p] = xd[ch * plane + p] * g;
                }
            }
        }
        ensure_finite(&out, "channel_scale output")?;
        Ok(self.push(out, Op::ChannelScale { x, gate }))
    }

    pub fn add_indexed_bias(
        &mut self,
        x: NodeId,
        table: NodeId,
        idx: Rc<Vec<usize>>,
    ) -> Result<NodeId> {
        if idx.len() != self.value(x).numel() {
            return Err(Error::shape(format!(
                "bias index table has {} entries for {} logits",
                idx.len(),
                self.value(x).numel()
            )));
        }
        let tlen = self.value(table).numel();
        let mut out = self.value(x).clone();
        {
            let (td, od) = (self.value(table).data(), out.data_mut());
            for (o, &i) in od.iter_mut().zip(idx.iter()) {
                debug_assert!(i < tlen);
                *o += td[i];
            }
        }
        ensure_finite(&out, "add_indexed_bias output")?;
        Ok(self.push(out, Op::AddIndexedBias { x, table, idx }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let out = Tensor::scalar(s);
        ensure_finite(&out, "sum_all output")?;
        Ok(self.push(out, Op::SumAll { x }))
    }

    /// Mean absolute error. The subgradient at exact ties is 0.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "l1_loss operands differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let n = self.value(a).numel();
        let inv = T::from_f64c(1.0 / n as f64);
        let mut s = T::zero();
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            s += (x - y).abs();
        }
        let out = Tensor::scalar(s * inv);
        ensure_finite(&out, "l1_loss output")?;
        Ok(self.push(out, Op::L1Loss { a, b }))
    }

    /// Fused exact-attention head over one token group:
    /// `softmax(q·kᵀ/√d + bias + mask)·v` in a single node.
    pub fn attn_core(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<(NodeId, Rc<Vec<usize>>)>,
        mask: Option<Rc<Tensor<T>>>,
    ) -> Result<NodeId> {
        let (n, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        if d != dk {
            return Err(Error::shape(format!("attn_core dims differ: {d} vs {dk}")));
        }
        if self.value(v).dims2()?.0 != nk {
            return Err(Error::shape("attn_core key/value row mismatch"));
        }
        let scale = T::from_f64c(1.0 / (d as f64).sqrt());
        let mut logits = sim_forward(self.value(q), self.value(k), true, scale)?;
        if let Some((table, idx)) = &bias {
            if idx.len() != n * nk {
                return Err(Error::shape("attn_core bias index size mismatch"));
            }
            let td = self.value(*table).data();
            for (o, &i) in logits.data_mut().iter_mut().zip(idx.iter()) {
                *o += td[i];
            }
        }
        if let Some(m) = &mask {
            if m.shape() != [n, nk] {
                return Err(Error::shape("attn_core mask shape mismatch"));
            }
            for (o, &mv) in logits.data_mut().iter_mut().zip(m.data()) {
                *o += mv;
            }
        }
        let att = kernels::softmax_rows(&logits)?;
        let out = kernels::matmul(&att, self.value(v))?;
        Ok(self.push(
            out,
            Op::AttnCore {
                q,
                k,
                v,
                scale,
                bias,
                att,
            },
        ))
    }

    /// Fused anchored-attention head: `softmax(sim(q,a))·(softmax(sim(a,k))·v)`
    /// evaluated right-to-left so no `n×n` array exists.
    pub fn anchored_core(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        a: NodeId,
        dot: bool,
    ) -> Result<NodeId> {
        let (n, d) = self.value(q).dims2()?;
        let n_a = self.value(a).dims2()?.0;
        if n_a > n {
            return Err(Error::Config(format!(
                "{n_a} anchors for {n} tokens: anchors must summarize, not inflate"
            )));
        }
        let scale = T::from_f64c(1.0 / (d as f64).sqrt());
        let m_d = kernels::softmax_rows(&sim_forward(self.value(a), self.value(k), dot, scale)?)?;
        let z = kernels::matmul(&m_d, self.value(v))?;
        let m_e = kernels::softmax_rows(&sim_forward(self.value(q), self.value(a), dot, scale)?)?;
        let out = kernels::matmul(&m_e, &z)?;
        Ok(self.push(
            out,
            Op::AnchoredCore {
                q,
                k,
                v,
                a,
                dot,
                scale,
                m_e,
                m_d,
                z,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every node reachable from the loss
    /// gets a gradient; unreachable parameters read as zero (documented:
    /// ablated branches share the training loop).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Scatter node gradients into `Parameter.gradient` accumulators
    /// (added, so batches can accumulate across graphs).
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<T>,
        params: &mut [Parameter<T>],
        scale: T,
    ) {
        for &(pidx, node) in &self.param_leaves {
            if let Some(g) = grads.get(node) {
                let dst = params[pidx].gradient.data_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s * scale;
                }
            }
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |n: NodeId| &self.nodes[n.0].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let bt = kernels::transpose(val(*b))?;
                acc(&mut grads[a.0], kernels::matmul(g, &bt)?);
                let at = kernels::transpose(val(*a))?;
                acc(&mut grads[b.0], kernels::matmul(&at, g)?);
            }
            Op::Transpose { x } => {
                acc(&mut grads[x.0], kernels::transpose(g)?);
            }
            Op::Reshape { x } => {
                acc(&mut grads[x.0], g.reshaped(val(*x).shape())?);
            }
            Op::Add { a, b } => {
                acc(&mut grads[a.0], g.clone());
                acc(&mut grads[b.0], g.clone());
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                acc(&mut grads[x.0], g.map(|v| v * f));
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].value;
                acc(&mut grads[x.0], softmax_backward_rows(y, g)?);
            }
            Op::PairwiseSqDist { q, k } => {
                let (nq, d) = val(*q).dims2()?;
                let (nk, _) = val(*k).dims2()?;
                let two = T::from_f64c(2.0);
                let mut dq = Tensor::zeros(&[nq, d]);
                let mut dk = Tensor::zeros(&[nk, d]);
                {
                    let (qd, kd, gd) = (val(*q).data(), val(*k).data(), g.data());
                    let (dqd, dkd) = (dq.data_mut(), dk.data_mut());
                    for i in 0..nq {
                        for j in 0..nk {
                            let gv = two * gd[i * nk + j];
                            for t in 0..d {
                                let diff = qd[i * d + t] - kd[j * d + t];
                                dqd[i * d + t] += gv * diff;
                                dkd[j * d + t] -= gv * diff;
                            }
                        }
                    }
                }
                acc(&mut grads[q.0], dq);
                acc(&mut grads[k.0], dk);
            }
            Op::Linear { x, w, b } => {
                let wt = kernels::transpose(val(*w))?;
                acc(&mut grads[x.0], kernels::matmul(g, &wt)?);
                let xt = kernels::transpose(val(*x))?;
                acc(&mut grads[w.0], kernels::matmul(&xt, g)?);
                let (n, d_out) = g.dims2()?;
                let mut db = Tensor::zeros(&[d_out]);
                {
                    let (gd, bd) = (g.data(), db.data_mut());
                    for i in 0..n {
                        for j in 0..d_out {
                            bd[j] += gd[i * d_out + j];
                        }
                    }
                }
                acc(&mut grads[b.0], db);
            }
            Op::Conv2d { x, k, b, pad } => {
                let (dx, dk, db) = conv2d_backward(val(*x), val(*k), g, *pad)?;
                acc(&mut grads[x.0], dx);
                acc(&mut grads[k.0], dk);
                acc(&mut grads[b.0], db);
            }
            Op::Pool2d {
                x,
                sh,
                sw,
                mode,
                argmax,
            } => {
                let (c, h, w) = val(*x).dims3()?;
                let (oh, ow) = (h / sh, w / sw);
                let mut dx = Tensor::zeros(&[c, h, w]);
                let gd = g.data();
                match mode {
                    PoolMode::Avg => {
                        let inv = T::from_f64c(1.0 / (sh * sw) as f64);
                        let dxd = dx.data_mut();
                        for ch in 0..c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = gd[(ch * oh + i) * ow + j] * inv;
                                    for di in 0..*sh {
                                        for dj in 0..*sw {
                                            dxd[(ch * h + i * sh + di) * w + j * sw + dj] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    PoolMode::Max => {
                        let am = argmax.as_ref().expect("max pool saved argmax");
                        let dxd = dx.data_mut();
                        for (o, &src) in am.iter().enumerate() {
                            dxd[src] += gd[o];
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) =
                    layer_norm_backward(val(*x), val(*gamma), g, *eps)?;
                acc(&mut grads[x.0], dx);
                acc(&mut grads[gamma.0], dgamma);
                acc(&mut grads[beta.0], dbeta);
            }
            Op::Activation { x, kind } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let (xd, gd, dd) = (xv.data(), g.data(), dx.data_mut());
                    for i in 0..xd.len() {
                        dd[i] = gd[i] * kernels::activation_grad_scalar(xd[i], *kind);
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::PixelShuffle { x, r } => {
                acc(&mut grads[x.0], kernels::pixel_unshuffle(g, *r)?);
            }
            Op::RemapSpatial { x, src, out_hw } => {
                let (c, h, w) = val(*x).dims3()?;
                let plane = h * w;
                let oplane = out_hw.0 * out_hw.1;
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let (gd, dd) = (g.data(), dx.data_mut());
                    for ch in 0..c {
                        for (i, &s) in src.iter().enumerate() {
                            dd[ch * plane + s] += gd[ch * oplane + i];
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::GatherTokens { fmap, positions } => {
                let (c, h, w) = val(*fmap).dims3()?;
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let (gd, dd) = (g.data(), dx.data_mut());
                    for (i, &p) in positions.iter().enumerate() {
                        for ch in 0..c {
                            dd[ch * plane + p] += gd[i * c + ch];
                        }
                    }
                }
                acc(&mut grads[fmap.0], dx);
            }
            Op::ScatterTokens {
                groups,
                positions,
                c,
                hw,
            } => {
                let plane = hw.0 * hw.1;
                let gd = g.data();
                for (&grp, pos) in groups.iter().zip(positions.iter()) {
                    let mut dg = Tensor::zeros(&[pos.len(), *c]);
                    {
                        let dd = dg.data_mut();
                        for (i, &p) in pos.iter().enumerate() {
                            for ch in 0..*c {
                                dd[i * c + ch] = gd[ch * plane + p];
                            }
                        }
                    }
                    acc(&mut grads[grp.0], dg);
                }
            }
            Op::SliceRows { x, start, len } => {
                let (m, n) = val(*x).dims2()?;
                let mut dx = Tensor::zeros(&[m, n]);
                dx.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                acc(&mut grads[x.0], dx);
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = val(*x).dims2()?;
                let mut dx = Tensor::zeros(&[m, n]);
                {
                    let (gd, dd) = (g.data(), dx.data_mut());
                    for i in 0..m {
                        dd[i * n + start..i * n + start + len]
                            .copy_from_slice(&gd[i * len..(i + 1) * len]);
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::ConcatRows { parts } => {
                let n = g.dims2()?.1;
                let mut row = 0;
                for &p in parts {
                    let m = val(p).dims2()?.0;
                    let dg = Tensor::from_vec(
                        vec![m, n],
                        g.data()[row * n..(row + m) * n].to_vec(),
                    )?;
                    acc(&mut grads[p.0], dg);
                    row += m;
                }
            }
            Op::ConcatCols { parts } => {
                let (m, total) = g.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let wd = val(p).dims2()?.1;
                    let mut dg = Tensor::zeros(&[m, wd]);
                    {
                        let (gd, dd) = (g.data(), dg.data_mut());
                        for i in 0..m {
                            dd[i * wd..(i + 1) * wd]
                                .copy_from_slice(&gd[i * total + off..i * total + off + wd]);
                        }
                    }
                    acc(&mut grads[p.0], dg);
                    off += wd;
                }
            }
            Op::GlobalAvgPool { x } => {
                let (c, h, w) = val(*x).dims3()?;
                let plane = h * w;
                let inv = T::from_f64c(1.0 / plane as f64);
                let mut dx = Tensor::zeros(&[c, h, w]);
                {
                    let (gd, dd) = (g.data(), dx.data_mut());
                    for ch in 0..c {
                        let gv = gd[ch] * inv;
                        for p in 0..plane {
                            dd[ch * plane + p] = gv;
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::ChannelScale { x, gate } => {
                let (c, h, w) = val(*x).dims3()?;
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgate = Tensor::zeros(&[1, c]);
                {
                    let (xd, gtd) = (val(*x).data(), val(*gate).data());
                    let gd = g.data();
                    let (dxd, dgd) = (dx.data_mut(), dgate.data_mut());
                    for ch in 0..c {
                        let gv = gtd[ch];
                        let mut s = T::zero();
                        for p in 0..plane {
                            dxd[ch * plane + p] = gd[ch * plane + p] * gv;
                            s += gd[ch * plane + p] * xd[ch * plane + p];
                        }
                        dgd[ch] = s;
                    }
                }
                acc(&mut grads[x.0], dx);
                acc(&mut grads[gate.0], dgate);
            }
            Op::AddIndexedBias { x, table, idx } => {
                acc(&mut grads[x.0], g.clone());
                let mut dt = Tensor::zeros(val(*table).shape());
                {
                    let (gd, dd) = (g.data(), dt.data_mut());
                    for (gi, &ti) in idx.iter().enumerate() {
                        dd[ti] += gd[gi];
                    }
                }
                acc(&mut grads[table.0], dt);
            }
            Op::SumAll { x } => {
                let gv = g.data()[0];
                acc(&mut grads[x.0], Tensor::full(val(*x).shape(), gv));
            }
            Op::AttnCore {
                q,
                k,
                v,
                scale,
                bias,
                att,
            } => {
                // out = att·v
                let vt = kernels::transpose(val(*v))?;
                let d_att = kernels::matmul(g, &vt)?;
                let att_t = kernels::transpose(att)?;
                acc(&mut grads[v.0], kernels::matmul(&att_t, g)?);
                let d_logits = softmax_backward_rows(att, &d_att)?;
                if let Some((table, idx)) = bias {
                    let mut dt = Tensor::zeros(val(*table).shape());
                    {
                        let (gd, dd) = (d_logits.data(), dt.data_mut());
                        for (gi, &ti) in idx.iter().enumerate() {
                            dd[ti] += gd[gi];
                        }
                    }
                    acc(&mut grads[table.0], dt);
                }
                let (dq, dk) = sim_backward(val(*q), val(*k), &d_logits, true, *scale)?;
                acc(&mut grads[q.0], dq);
                acc(&mut grads[k.0], dk);
            }
            Op::AnchoredCore {
                q,
                k,
                v,
                a,
                dot,
                scale,
                m_e,
                m_d,
                z,
            } => {
                // out = m_e·z ; z = m_d·v
                let zt = kernels::transpose(z)?;
                let d_me = kernels::matmul(g, &zt)?;
                let me_t = kernels::transpose(m_e)?;
                let d_z = kernels::matmul(&me_t, g)?;
                let d_logits_e = softmax_backward_rows(m_e, &d_me)?;
                let (dq, da1) = sim_backward(val(*q), val(*a), &d_logits_e, *dot, *scale)?;

                let vt = kernels::transpose(val(*v))?;
                let d_md = kernels::matmul(&d_z, &vt)?;
                let md_t = kernels::transpose(m_d)?;
                acc(&mut grads[v.0], kernels::matmul(&md_t, &d_z)?);
                let d_logits_d = softmax_backward_rows(m_d, &d_md)?;
                let (da2, dk) = sim_backward(val(*a), val(*k), &d_logits_d, *dot, *scale)?;

                acc(&mut grads[q.0], dq);
                acc(&mut grads[k.0], dk);
                let mut da = da1;
                for (x, &y) in da.data_mut().iter_mut().zip(da2.data()) {
                    *x += y;
                }
                acc(&mut grads[a.0], da);
            }
            Op::L1Loss { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                let n = av.numel();
                let gv = g.data()[0] * T::from_f64c(1.0 / n as f64);
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                {
                    let (ad, bd) = (av.data(), bv.data());
                    let (dad, dbd) = (da.data_mut(), db.data_mut());
                    for i in 0..n {
                        let s = if ad[i] > bd[i] {
                            T::one()
                        } else if ad[i] < bd[i] {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        dad[i] = gv * s;
                        dbd[i] = -(gv * s);
                    }
                }
                acc(&mut grads[a.0], da);
                acc(&mut grads[b.0], db);
            }
        }
        Ok(())
    }
}

/// Similarity logits: `q·kᵀ·scale` (dot) or `−‖qᵢ−kⱼ‖²·scale` (euclidean).
fn sim_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    dot: bool,
    scale: T,
) -> Result<Tensor<T>> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if d != dk {
        return Err(Error::shape(format!(
            "similarity feature dims differ: {d} vs {dk}"
        )));
    }
    if dot {
        super::flops::add(super::flops::sim_dot_flops(nq, nk, d));
    } else {
        super::flops::add(super::flops::sim_euclid_flops(nq, nk, d));
    }
    let mut out = Tensor::zeros(&[nq, nk]);
    let (qd, kd, od) = (q.data(), k.data(), out.data_mut());
    for i in 0..nq {
        for j in 0..nk {
            let mut s = T::zero();
            if dot {
                for t in 0..d {
                    s += qd[i * d + t] * kd[j * d + t];
                }
            } else {
                for t in 0..d {
                    let dl = qd[i * d + t] - kd[j * d + t];
                    s -= dl * dl;
                }
            }
            od[i * nk + j] = s * scale;
        }
    }
    ensure_finite(&out, "similarity logits")?;
    Ok(out)
}

/// Gradients of [`sim_forward`] w.r.t. `q` and `k` given `d_logits`.
fn sim_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    d_logits: &Tensor<T>,
    dot: bool,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (nq, d) = q.dims2()?;
    let (nk, _) = k.dims2()?;
    let mut dq = Tensor::zeros(&[nq, d]);
    let mut dk = Tensor::zeros(&[nk, d]);
    let (qd, kd, gd) = (q.data(), k.data(), d_logits.data());
    let (dqd, dkd) = (dq.data_mut(), dk.data_mut());
    if dot {
        // dq = scale·g·k ; dk = scale·gᵀ·q
        for i in 0..nq {
            for j in 0..nk {
                let gv = gd[i * nk + j] * scale;
                for t in 0..d {
                    dqd[i * d + t] += gv * kd[j * d + t];
                    dkd[j * d + t] += gv * qd[i * d + t];
                }
            }
        }
    } else {
        // logits = −scale·‖q−k‖²: d/dq = −2·scale·g·(q−k)
        let two = T::from_f64c(2.0);
        for i in 0..nq {
            for j in 0..nk {
                let gv = gd[i * nk + j] * scale * two;
                for t in 0..d {
                    let diff = qd[i * d + t] - kd[j * d + t];
                    dqd[i * d + t] -= gv * diff;
                    dkd[j * d + t] += gv * diff;
                }
            }
        }
    }
    Ok((dq, dk))
}

/// `dx_i = y_i·(g_i − Σ_j g_j·y_j)` per row.
fn softmax_backward_rows<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = y.dims2()?;
    let mut dx = Tensor::zeros(&[r, c]);
    let (yd, gd, xd) = (y.data(), g.data(), dx.data_mut());
    for i in 0..r {
        let mut dot = T::zero();
        for j in 0..c {
            dot += gd[i * c + j] * yd[i * c + j];
        }
        for j in 0..c {
            xd[i * c + j] = yd[i * c + j] * (gd[i * c + j] - dot);
        }
    }
    Ok(dx)
}

fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), add.shape());
            for (d, &s) in t.data_mut().iter_mut().zip(add.data()) {
                *d += s;
            }
        }
        None => *slot = Some(add),
    }
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c_in, h, w) = x.dims3()?;
    let (c_out, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (_, oh, ow) = g.dims3()?;
    let mut dx = Tensor::zeros(&[c_in, h, w]);
    let mut dk = Tensor::zeros(k.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let (dxd, dkd, dbd) = (dx.data_mut(), dk.data_mut(), db.data_mut());
    for co in 0..c_out {
        let mut bsum = T::zero();
        for &v in &gd[co * oh * ow..(co + 1) * oh * ow] {
            bsum += v;
        }
        dbd[co] = bsum;
        for ci in 0..c_in {
            for u in 0..kh {
                let i0 = pad.saturating_sub(u);
                let i1 = if h + pad > u { (h + pad - u).min(oh) } else { i0 };
                for v in 0..kw {
                    let kv = kd[((co * c_in + ci) * kh + u) * kw + v];
                    let j0 = pad.saturating_sub(v);
                    let j1 = if w + pad > v { (w + pad - v).min(ow) } else { j0 };
                    if j0 >= j1 {
                        continue;
                    }
                    let len = j1 - j0;
                    let mut ksum = T::zero();
                    for i in i0..i1 {
                        let si = i + u - pad;
                        let xoff = (ci * h + si) * w + j0 + v - pad;
                        let xs = &xd[xoff..xoff + len];
                        let gs = &gd[(co * oh + i) * ow + j0..][..len];
                        let dxs = &mut dxd[xoff..xoff + len];
                        for t in 0..len {
                            ksum += gs[t] * xs[t];
                            dxs[t] += gs[t] * kv;
                        }
                    }
                    dkd[((co * c_in + ci) * kh + u) * kw + v] += ksum;
                }
            }
        }
    }
    Ok((dx, dk, db))
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = x.dims2()?;
    let dn = T::from_f64c(d as f64);
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let (xd, gd, gmd) = (x.data(), g.data(), gamma.data());
    let (dxd, dgd, dbd) = (dx.data_mut(), dgamma.data_mut(), dbeta.data_mut());
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let grow = &gd[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row.iter() {
            let dl = v - mean;
            var += dl * dl;
        }
        var = var / dn;
        let rstd = (var + eps).sqrt().recip();
        // hat_j = (x_j - mean) * rstd ; dhat_j = g_j * gamma_j
        let mut sum_dhat = T::zero();
        let mut sum_dhat_hat = T::zero();
        for j in 0..d {
            let hat = (row[j] - mean) * rstd;
            let dhat = grow[j] * gmd[j];
            sum_dhat += dhat;
            sum_dhat_hat += dhat * hat;
            dgd[j] += grow[j] * hat;
            dbd[j] += grow[j];
        }
        let m1 = sum_dhat / dn;
        let m2 = sum_dhat_hat / dn;
        for j in 0..d {
            let hat = (row[j] - mean) * rstd;
            let dhat = grow[j] * gmd[j];
            dxd[i * d + j] = (dhat - m1 - hat * m2) * rstd;
        }
    }
    Ok((dx, dgamma, dbeta))
}
