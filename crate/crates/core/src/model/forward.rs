//! Forward pass of the GRL network on the autodiff tape.
//!
//! Layer structure (pre-norm): the normed input is split along channels into
//! a window-attention half and an anchored-stripe half, their concatenation
//! goes through a single C→C projection; a channel-attention conv branch
//! runs on the raw input in parallel; both are added to the input, followed
//! by a pre-norm MLP with its own residual.

use crate::attention::{
    anchored_stripe_attention, window_attention, StripeDirection, StripeParamNodes, StripeProbe,
    StripeSpec, WindowParamNodes, WindowSpec,
};
use crate::error::{Error, Result};
use crate::model::{GRLConfig, Model, Task};
use crate::tensor::kernels::Activation;
use crate::tensor::{Graph, NodeId, Scalar};

const LN_EPS: f64 = 1e-5;

/// Parameter leaves of one forward pass, indexed like the model's registry.
pub struct ModelNodes {
    ids: Vec<NodeId>,
}

impl ModelNodes {
    /// Insert every parameter of `model` as a tracked leaf.
    pub fn insert<T: Scalar>(g: &mut Graph<T>, model: &Model<T>) -> Result<Self> {
        let mut ids = Vec::with_capacity(model.params.len());
        for (i, p) in model.params.entries().iter().enumerate() {
            ids.push(g.param(i, p.value.clone())?);
        }
        Ok(ModelNodes { ids })
    }

    pub fn by_name<T: Scalar>(&self, model: &Model<T>, name: &str) -> Result<NodeId> {
        Ok(self.ids[model.params.idx(name)?])
    }
}

/// Named nodes of one transformer layer.
pub struct LayerNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub win: WindowParamNodes,
    pub stripe: StripeParamNodes,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub ca1_w: NodeId,
    pub ca1_b: NodeId,
    pub ca2_w: NodeId,
    pub ca2_b: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub mlp1_w: NodeId,
    pub mlp1_b: NodeId,
    pub mlp2_w: NodeId,
    pub mlp2_b: NodeId,
}

impl LayerNodes {
    pub fn gather<T: Scalar>(
        nodes: &ModelNodes,
        model: &Model<T>,
        stage: usize,
        layer: usize,
    ) -> Result<Self> {
        let p = format!("stage{stage}.layer{layer}");
        let n = |s: &str| nodes.by_name(model, &format!("{p}.{s}"));
        let mut bias_tables = Vec::with_capacity(model.config.heads);
        for h in 0..model.config.heads {
            bias_tables.push(n(&format!("win.bias.h{h}"))?);
        }
        Ok(LayerNodes {
            ln1_gamma: n("ln1.gamma")?,
            ln1_beta: n("ln1.beta")?,
            win: WindowParamNodes {
                w_q: n("win.q.w")?,
                b_q: n("win.q.b")?,
                w_k: n("win.k.w")?,
                b_k: n("win.k.b")?,
                w_v: n("win.v.w")?,
                b_v: n("win.v.b")?,
                bias_tables,
            },
            stripe: StripeParamNodes {
                w_q: n("stripe.q.w")?,
                b_q: n("stripe.q.b")?,
                w_k: n("stripe.k.w")?,
                b_k: n("stripe.k.b")?,
                w_v: n("stripe.v.w")?,
                b_v: n("stripe.v.b")?,
                anchor_w: n("stripe.anchor.w")?,
                anchor_b: n("stripe.anchor.b")?,
                out_w: n("stripe.out.w")?,
                out_b: n("stripe.out.b")?,
            },
            proj_w: n("proj.w")?,
            proj_b: n("proj.b")?,
            conv1_w: n("conv1.w")?,
            conv1_b: n("conv1.b")?,
            conv2_w: n("conv2.w")?,
            conv2_b: n("conv2.b")?,
            ca1_w: n("ca1.w")?,
            ca1_b: n("ca1.b")?,
            ca2_w: n("ca2.w")?,
            ca2_b: n("ca2.b")?,
            ln2_gamma: n("ln2.gamma")?,
            ln2_beta: n("ln2.beta")?,
            mlp1_w: n("mlp1.w")?,
            mlp1_b: n("mlp1.b")?,
            mlp2_w: n("mlp2.w")?,
            mlp2_b: n("mlp2.b")?,
        })
    }
}

/// `[c,h,w]` feature map → `[h·w, c]` token rows.
fn tokens_of_fmap<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[c, h * w])?;
    g.transpose(flat)
}

/// `[N, c]` token rows → `[c,h,w]` feature map.
fn fmap_of_tokens<T: Scalar>(g: &mut Graph<T>, t: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let (_, c) = g.value(t).dims2()?;
    let tt = g.transpose(t)?;
    g.reshape(tt, &[c, h, w])
}

fn split_channels<T: Scalar>(
    g: &mut Graph<T>,
    fmap: NodeId,
    at: usize,
) -> Result<(NodeId, NodeId)> {
    let (c, h, w) = g.value(fmap).dims3()?;
    let flat = g.reshape(fmap, &[c, h * w])?;
    let lo = g.slice_rows(flat, 0, at)?;
    let hi = g.slice_rows(flat, at, c - at)?;
    Ok((
        g.reshape(lo, &[at, h, w])?,
        g.reshape(hi, &[c - at, h, w])?,
    ))
}

fn concat_channels<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ca, h, w) = g.value(a).dims3()?;
    let (cb, _, _) = g.value(b).dims3()?;
    let fa = g.reshape(a, &[ca, h * w])?;
    let fb = g.reshape(b, &[cb, h * w])?;
    let cat = g.concat_rows(&[fa, fb])?;
    g.reshape(cat, &[ca + cb, h, w])
}

/// Local branch: two 3×3 convolutions with a ReLU between, gated per channel
/// by `sigmoid(lin(relu(lin(gap(t)))))` (squeeze ratio 4).
pub fn channel_attention_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    l: &LayerNodes,
) -> Result<NodeId> {
    let t = g.conv2d(x, l.conv1_w, l.conv1_b, 1)?;
    let t = g.activation(t, Activation::Relu)?;
    let t = g.conv2d(t, l.conv2_w, l.conv2_b, 1)?;
    let z = g.global_avg_pool(t)?;
    let z = g.linear(z, l.ca1_w, l.ca1_b)?;
    let z = g.activation(z, Activation::Relu)?;
    let z = g.linear(z, l.ca2_w, l.ca2_b)?;
    let gate = g.activation(z, Activation::Sigmoid)?;
    g.channel_scale(t, gate)
}

/// Stripe mode schedule: layers cycle horizontal, vertical,
/// shifted-horizontal, shifted-vertical (shift = width/2).
fn stripe_mode(config: &GRLConfig, layer_index: usize) -> StripeSpec {
    let width = config.stripe.width;
    let (direction, shift) = match layer_index % 4 {
        0 => (StripeDirection::Horizontal, 0),
        1 => (StripeDirection::Vertical, 0),
        2 => (StripeDirection::Horizontal, width / 2),
        _ => (StripeDirection::Vertical, width / 2),
    };
    StripeSpec {
        direction,
        width,
        shift,
    }
}

/// Window mode schedule: unshifted on even layers, shifted on odd ones.
fn window_mode(config: &GRLConfig, layer_index: usize) -> WindowSpec {
    WindowSpec {
        size: config.window.size,
        shift: if layer_index % 2 == 1 {
            config.window.shift
        } else {
            0
        },
    }
}

/// One transformer layer; output shape equals input shape.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    model: &Model<T>,
    l: &LayerNodes,
    layer_index: usize,
    mut probes: Option<&mut Vec<StripeProbe<T>>>,
) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3()?;
    if c != model.config.embed_dim {
        return Err(Error::shape(format!(
            "layer expects {} channels, got {c}",
            model.config.embed_dim
        )));
    }
    let cfg = &model.config;
    let half = c / 2;

    let tokens = tokens_of_fmap(g, x)?;
    let eps = T::from_f64c(LN_EPS);
    let normed = g.layer_norm(tokens, l.ln1_gamma, l.ln1_beta, eps)?;
    let normed_fmap = fmap_of_tokens(g, normed, h, w)?;
    let (win_in, stripe_in) = split_channels(g, normed_fmap, half)?;

    let win_out = window_attention(g, win_in, &window_mode(cfg, layer_index), cfg.heads, &l.win)?;
    let stripe_out = anchored_stripe_attention(
        g,
        stripe_in,
        &stripe_mode(cfg, layer_index),
        &cfg.anchor,
        cfg.heads,
        cfg.measure,
        &l.stripe,
        probes.as_deref_mut(),
    )?;

    let cat = concat_channels(g, win_out, stripe_out)?;
    let cat_tokens = tokens_of_fmap(g, cat)?;
    let proj = g.linear(cat_tokens, l.proj_w, l.proj_b)?;
    let attn_fmap = fmap_of_tokens(g, proj, h, w)?;

    let conv_out = channel_attention_conv(g, x, l)?;

    let sum = g.add(x, attn_fmap)?;
    let y1 = g.add(sum, conv_out)?;

    let y1_tokens = tokens_of_fmap(g, y1)?;
    let normed2 = g.layer_norm(y1_tokens, l.ln2_gamma, l.ln2_beta, eps)?;
    let hdn = g.linear(normed2, l.mlp1_w, l.mlp1_b)?;
    let act = g.activation(hdn, Activation::Gelu)?;
    let mlp = g.linear(act, l.mlp2_w, l.mlp2_b)?;
    let mlp_fmap = fmap_of_tokens(g, mlp, h, w)?;
    g.add(y1, mlp_fmap)
}

/// One transformer stage: its layers, a closing 3×3 convolution, and a skip
/// connection around the whole stage.
pub fn stage<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    model: &Model<T>,
    nodes: &ModelNodes,
    stage_index: usize,
    mut probes: Option<&mut Vec<StripeProbe<T>>>,
) -> Result<NodeId> {
    let mut cur = x;
    for li in 0..model.config.layers_per_stage {
        let l = LayerNodes::gather(nodes, model, stage_index, li)?;
        let layer_index = stage_index * model.config.layers_per_stage + li;
        cur = transformer_layer(g, cur, model, &l, layer_index, probes.as_deref_mut())?;
    }
    let cw = nodes.by_name(model, &format!("stage{stage_index}.conv.w"))?;
    let cb = nodes.by_name(model, &format!("stage{stage_index}.conv.b"))?;
    let conv = g.conv2d(cur, cw, cb, 1)?;
    g.add(x, conv)
}

/// Full network: feature extraction, representation learning with a global
/// skip, and the task head. Denoise adds a global residual to the input;
/// SR heads upsample by pixel shuffle.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    nodes: &ModelNodes,
    img: NodeId,
    mut probes: Option<&mut Vec<StripeProbe<T>>>,
) -> Result<NodeId> {
    let (c_in, h, w) = g.value(img).dims3()?;
    if c_in != model.config.channels_in {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {c_in}",
            model.config.channels_in
        )));
    }
    if h < 8 || w < 8 {
        return Err(Error::Config(format!(
            "undersized input {h}x{w}: both extents must be >= 8"
        )));
    }
    let n = |name: &str| nodes.by_name(model, name);

    let feat = {
        let (wt, bt) = (n("feat.conv.w")?, n("feat.conv.b")?);
        g.conv2d(img, wt, bt, 1)?
    };
    let mut x = feat;
    for si in 0..model.config.stages {
        x = stage(g, x, model, nodes, si, probes.as_deref_mut())?;
    }
    let pre = g.add(x, feat)?;

    let pre = match model.config.task {
        Task::Denoise => pre,
        Task::SrX2 => {
            let up = g.conv2d(pre, n("up0.conv.w")?, n("up0.conv.b")?, 1)?;
            g.pixel_shuffle(up, 2)?
        }
        Task::SrX4 => {
            let up = g.conv2d(pre, n("up0.conv.w")?, n("up0.conv.b")?, 1)?;
            let up = g.pixel_shuffle(up, 2)?;
            let up = g.conv2d(up, n("up1.conv.w")?, n("up1.conv.b")?, 1)?;
            g.pixel_shuffle(up, 2)?
        }
    };
    let head = g.conv2d(pre, n("head.conv.w")?, n("head.conv.b")?, 1)?;
    match model.config.task {
        Task::Denoise => g.add(img, head),
        _ => Ok(head),
    }
}

impl<T: Scalar> Model<T> {
    /// Run a forward pass on a fresh tape and return the output values.
    pub fn forward_value(&self, img: &crate::tensor::Tensor<T>) -> Result<crate::tensor::Tensor<T>> {
        let mut g = Graph::new();
        let nodes = ModelNodes::insert(&mut g, self)?;
        let inp = g.leaf(img.clone())?;
        let out = forward(&mut g, self, &nodes, inp, None)?;
        Ok(g.value(out).clone())
    }

    /// Forward pass that also captures per-head stripe Q/K/A probes.
    pub fn forward_with_probes(
        &self,
        img: &crate::tensor::Tensor<T>,
    ) -> Result<(crate::tensor::Tensor<T>, Vec<StripeProbe<T>>)> {
        let mut g = Graph::new();
        let nodes = ModelNodes::insert(&mut g, self)?;
        let inp = g.leaf(img.clone())?;
        let mut probes = Vec::new();
        let out = forward(&mut g, self, &nodes, inp, Some(&mut probes))?;
        Ok((g.value(out).clone(), probes))
    }
}
