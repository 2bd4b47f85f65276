//! Tape-level attention blocks used inside the transformer layer: windowed
//! multi-head exact attention with relative-position bias, and multi-head
//! anchored stripe attention.

use std::rc::Rc;

use super::geometry::{partition_plan, PartitionGeom};
use super::{AnchorSpec, SimilarityMeasure, StripeSpec, WindowSpec, MASK_LOGIT};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Parameter leaves of one window-attention block.
pub struct WindowParamNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    /// One relative-position bias table per head, each `(2·size−1)²` long.
    pub bias_tables: Vec<NodeId>,
}

/// Parameter leaves of one anchored-stripe-attention block.
pub struct StripeParamNodes {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub anchor_w: NodeId,
    pub anchor_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// Per-head query/key/anchor values captured during a forward pass, for
/// exact-vs-anchored map diagnostics.
#[derive(Clone, Debug)]
pub struct StripeProbe<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub a: Tensor<T>,
    pub measure: SimilarityMeasure,
}

/// Relative-position bias lookup table for a `size×size` window:
/// entry for token pair (i, j) is `(Δr + size−1)·(2·size−1) + (Δc + size−1)`.
fn relpos_index(size: usize) -> Vec<usize> {
    let n = size * size;
    let span = 2 * size - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / size, i % size);
        for j in 0..n {
            let (rj, cj) = (j / size, j % size);
            let dr = ri + size - 1 - rj;
            let dc = ci + size - 1 - cj;
            idx.push(dr * span + dc);
        }
    }
    idx
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: NodeId, heads: usize) -> Result<Vec<NodeId>> {
    let (_, c) = g.value(x).dims2()?;
    let dh = c / heads;
    (0..heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
}

/// Per-window multi-head exact attention with a learnable relative-position
/// bias on the logits. The shifted variant masks pairs that were brought
/// together across a roll boundary (logit −1e4 before softmax).
pub fn window_attention<T: Scalar>(
    g: &mut Graph<T>,
    fmap: NodeId,
    spec: &WindowSpec,
    heads: usize,
    params: &WindowParamNodes,
) -> Result<NodeId> {
    let (c, h, w) = g.value(fmap).dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide {c} channels"
        )));
    }
    if params.bias_tables.len() != heads {
        return Err(Error::Config(format!(
            "expected {heads} bias tables, got {}",
            params.bias_tables.len()
        )));
    }
    let plan = partition_plan(h, w, &PartitionGeom::Window(*spec), 1, 1)?;
    let rolled = g.remap_spatial(fmap, plan.forward_src.clone(), plan.padded_h, plan.padded_w)?;

    let bias_idx = Rc::new(relpos_index(spec.size));
    let mask_logit = T::from_f64c(MASK_LOGIT);

    // all windows share the projections: gather every window's tokens into
    // one matrix, project once, then slice per window
    let all_positions: Rc<Vec<usize>> = Rc::new(
        plan.groups
            .iter()
            .flat_map(|gg| gg.positions.iter().copied())
            .collect(),
    );
    let tokens = g.gather_tokens(rolled, all_positions)?;
    let q = g.linear(tokens, params.w_q, params.b_q)?;
    let k = g.linear(tokens, params.w_k, params.b_k)?;
    let v = g.linear(tokens, params.w_v, params.b_v)?;
    let (qh, kh, vh) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );

    let n_g = spec.size * spec.size;
    let mut outs = Vec::with_capacity(plan.groups.len());
    let mut positions = Vec::with_capacity(plan.groups.len());
    for (gi, gg) in plan.groups.iter().enumerate() {
        let row0 = gi * n_g;
        let mask: Option<Rc<Tensor<T>>> = if plan.is_shifted() {
            let regions = plan.group_regions(gg);
            if regions.iter().any(|&r| r != regions[0]) {
                let n = regions.len();
                let mut m = Tensor::<T>::zeros(&[n, n]);
                let md = m.data_mut();
                for i in 0..n {
                    for j in 0..n {
                        if regions[i] != regions[j] {
                            md[i * n + j] = mask_logit;
                        }
                    }
                }
                Some(Rc::new(m))
            } else {
                None
            }
        } else {
            None
        };

        let mut head_outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qg = g.slice_rows(qh[head], row0, n_g)?;
            let kg = g.slice_rows(kh[head], row0, n_g)?;
            let vg = g.slice_rows(vh[head], row0, n_g)?;
            head_outs.push(g.attn_core(
                qg,
                kg,
                vg,
                Some((params.bias_tables[head], bias_idx.clone())),
                mask.clone(),
            )?);
        }
        outs.push(g.concat_cols(&head_outs)?);
        positions.push(gg.positions.clone());
    }

    let scattered = g.scatter_tokens(&outs, &positions, plan.padded_h, plan.padded_w)?;
    g.remap_spatial(scattered, plan.inverse_src.clone(), h, w)
}

/// Multi-head anchored attention within stripes. Per stripe: project Q/K/V,
/// build anchors from the stripe's pre-projection features, split heads, run
/// the right-to-left anchored contraction per head, merge heads, apply the
/// output projection, and merge stripes back.
pub fn anchored_stripe_attention<T: Scalar>(
    g: &mut Graph<T>,
    fmap: NodeId,
    stripe: &StripeSpec,
    anchor: &AnchorSpec,
    heads: usize,
    measure: SimilarityMeasure,
    params: &StripeParamNodes,
    mut probes: Option<&mut Vec<StripeProbe<T>>>,
) -> Result<NodeId> {
    let (c, h, w) = g.value(fmap).dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide {c} channels"
        )));
    }
    anchor.validate()?;
    // pad the long axis so each stripe yields at least `heads` anchors
    let s = anchor.down_factor;
    let stripe_axis_anchors = (stripe.width / s.min(stripe.width)).max(1);
    let long_min = s * heads.div_ceil(stripe_axis_anchors);
    let plan = partition_plan(h, w, &PartitionGeom::Stripe(*stripe), s, long_min)?;
    let rolled = g.remap_spatial(fmap, plan.forward_src.clone(), plan.padded_h, plan.padded_w)?;

    // all stripes share the projections: gather once, project once
    let all_positions: Rc<Vec<usize>> = Rc::new(
        plan.groups
            .iter()
            .flat_map(|gg| gg.positions.iter().copied())
            .collect(),
    );
    let all_tokens = g.gather_tokens(rolled, all_positions)?;
    let q_all = g.linear(all_tokens, params.w_q, params.b_q)?;
    let k_all = g.linear(all_tokens, params.w_k, params.b_k)?;
    let v_all = g.linear(all_tokens, params.w_v, params.b_v)?;

    let mut outs = Vec::with_capacity(plan.groups.len());
    let mut positions = Vec::with_capacity(plan.groups.len());
    for (gi, gg) in plan.groups.iter().enumerate() {
        let n_g = gg.positions.len();
        let row0 = gi * n_g;
        let tokens = g.slice_rows(all_tokens, row0, n_g)?;
        let q = g.slice_rows(q_all, row0, n_g)?;
        let k = g.slice_rows(k_all, row0, n_g)?;
        let v = g.slice_rows(v_all, row0, n_g)?;

        // anchors from the stripe's input features (pre-QKV branch)
        let tokens_t = g.transpose(tokens)?;
        let grid = g.reshape(tokens_t, &[c, gg.height, gg.width])?;
        let (fh, fw) = anchor.axis_factors(gg.height, gg.width);
        if gg.height % fh != 0 || gg.width % fw != 0 {
            return Err(Error::Config(format!(
                "anchor pooling {fh}x{fw} does not divide stripe {}x{} \
                 (down factor {} incompatible with stripe width {})",
                gg.height, gg.width, anchor.down_factor, stripe.width
            )));
        }
        let pooled = g.pool2d_axes(grid, fh, fw, anchor.pool)?;
        let n_a = (gg.height / fh) * (gg.width / fw);
        if n_a < heads {
            return Err(Error::Config(format!(
                "{n_a} anchors for {heads} heads: anchor count below heads"
            )));
        }
        let pooled_flat = g.reshape(pooled, &[c, n_a])?;
        let anchor_tokens = g.transpose(pooled_flat)?;
        let a = g.linear(anchor_tokens, params.anchor_w, params.anchor_b)?;

        let (qh, kh, vh, ah) = (
            split_heads(g, q, heads)?,
            split_heads(g, k, heads)?,
            split_heads(g, v, heads)?,
            split_heads(g, a, heads)?,
        );
        let dot = measure == SimilarityMeasure::Dot;
        let mut head_outs = Vec::with_capacity(heads);
        for head in 0..heads {
            // right-to-left inside the fused core: Z = M_d·V first, never
            // an N×N array
            head_outs.push(g.anchored_core(qh[head], kh[head], vh[head], ah[head], dot)?);
            if let Some(p) = probes.as_deref_mut() {
                p.push(StripeProbe {
                    q: g.value(qh[head]).clone(),
                    k: g.value(kh[head]).clone(),
                    a: g.value(ah[head]).clone(),
                    measure,
                });
            }
        }
        let merged = g.concat_cols(&head_outs)?;
        outs.push(g.linear(merged, params.out_w, params.out_b)?);
        positions.push(gg.positions.clone());
    }

    let scattered = g.scatter_tokens(&outs, &positions, plan.padded_h, plan.padded_w)?;
    g.remap_spatial(scattered, plan.inverse_src.clone(), h, w)
}
