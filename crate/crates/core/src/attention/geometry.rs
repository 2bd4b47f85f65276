//! Partition/merge geometry: reflect padding, cyclic shift, and the cutting
//! of a feature map into stripes or windows. All of it is value-independent,
//! so the plan is computed once and shared by the raw and tape paths.

use std::rc::Rc;

use super::{StripeDirection, StripeSpec, TokenGroup, WindowSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub enum PartitionGeom {
    Stripe(StripeSpec),
    Window(WindowSpec),
}

/// Geometry of one partition cell.
#[derive(Clone, Debug)]
pub struct GroupGeom {
    /// Flat indices into the padded+rolled map, row-major over the group's
    /// own `(height, width)` grid.
    pub positions: Rc<Vec<usize>>,
    pub height: usize,
    pub width: usize,
}

/// Everything needed to cut a map into groups and to invert the cut.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub shift_y: usize,
    pub shift_x: usize,
    /// padded+rolled flat index → original flat index (pad + roll fused).
    pub forward_src: Rc<Vec<usize>>,
    /// original flat index → padded+rolled flat index (unroll + crop fused).
    pub inverse_src: Rc<Vec<usize>>,
    pub groups: Vec<GroupGeom>,
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Symmetric reflection of index `t` into `[0, n)`; total for any pad width.
fn fold(t: usize, n: usize) -> usize {
    let m = t % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Build the partition plan for an `h×w` map.
///
/// `long_multiple` additionally pads a stripe's long axis to a multiple of
/// the anchor down factor so anchor pooling always divides, and `long_min`
/// sets a floor on the padded long extent (used to guarantee enough anchors
/// for the head count on tiny maps); plain partition uses 1 for both.
pub fn partition_plan(
    h: usize,
    w: usize,
    geom: &PartitionGeom,
    long_multiple: usize,
    long_min: usize,
) -> Result<PartitionPlan> {
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot partition an empty map"));
    }
    let lm = long_multiple.max(1);
    let pad_long = |x: usize| round_up(x.max(long_min.max(1)), lm);
    let (padded_h, padded_w, shift_y, shift_x) = match geom {
        PartitionGeom::Window(spec) => {
            spec.validate()?;
            (
                round_up(h, spec.size),
                round_up(w, spec.size),
                spec.shift,
                spec.shift,
            )
        }
        PartitionGeom::Stripe(spec) => {
            spec.validate()?;
            match spec.direction {
                StripeDirection::Horizontal => {
                    (round_up(h, spec.width), pad_long(w), spec.shift, 0)
                }
                StripeDirection::Vertical => {
                    (pad_long(h), round_up(w, spec.width), 0, spec.shift)
                }
            }
        }
    };

    let mut forward_src = Vec::with_capacity(padded_h * padded_w);
    for r in 0..padded_h {
        let pr = (r + shift_y) % padded_h;
        let sr = fold(pr, h);
        for c in 0..padded_w {
            let pc = (c + shift_x) % padded_w;
            forward_src.push(sr * w + fold(pc, w));
        }
    }
    let mut inverse_src = Vec::with_capacity(h * w);
    for r in 0..h {
        let pr = (r + padded_h - shift_y % padded_h) % padded_h;
        for c in 0..w {
            let pc = (c + padded_w - shift_x % padded_w) % padded_w;
            inverse_src.push(pr * padded_w + pc);
        }
    }

    let mut groups = Vec::new();
    match geom {
        PartitionGeom::Window(spec) => {
            let s = spec.size;
            for wr in 0..padded_h / s {
                for wc in 0..padded_w / s {
                    let mut positions = Vec::with_capacity(s * s);
                    for r in 0..s {
                        for c in 0..s {
                            positions.push((wr * s + r) * padded_w + wc * s + c);
                        }
                    }
                    groups.push(GroupGeom {
                        positions: Rc::new(positions),
                        height: s,
                        width: s,
                    });
                }
            }
        }
        PartitionGeom::Stripe(spec) => match spec.direction {
            StripeDirection::Horizontal => {
                for band in 0..padded_h / spec.width {
                    let mut positions = Vec::with_capacity(spec.width * padded_w);
                    for r in 0..spec.width {
                        for c in 0..padded_w {
                            positions.push((band * spec.width + r) * padded_w + c);
                        }
                    }
                    groups.push(GroupGeom {
                        positions: Rc::new(positions),
                        height: spec.width,
                        width: padded_w,
                    });
                }
            }
            StripeDirection::Vertical => {
                for band in 0..padded_w / spec.width {
                    let mut positions = Vec::with_capacity(padded_h * spec.width);
                    for r in 0..padded_h {
                        for c in 0..spec.width {
                            positions.push(r * padded_w + band * spec.width + c);
                        }
                    }
                    groups.push(GroupGeom {
                        positions: Rc::new(positions),
                        height: padded_h,
                        width: spec.width,
                    });
                }
            }
        },
    }

    Ok(PartitionPlan {
        orig_h: h,
        orig_w: w,
        padded_h,
        padded_w,
        shift_y,
        shift_x,
        forward_src: Rc::new(forward_src),
        inverse_src: Rc::new(inverse_src),
        groups,
    })
}

impl PartitionPlan {
    /// Wrap-region label per position of one group: bit 1 = row came across
    /// the vertical roll boundary, bit 0 = column did. Tokens whose labels
    /// differ must not attend to each other in shifted windows.
    pub fn group_regions(&self, group: &GroupGeom) -> Vec<u8> {
        group
            .positions
            .iter()
            .map(|&p| {
                let r = p / self.padded_w;
                let c = p % self.padded_w;
                let row_wrapped = self.shift_y > 0 && r >= self.padded_h - self.shift_y;
                let col_wrapped = self.shift_x > 0 && c >= self.padded_w - self.shift_x;
                ((row_wrapped as u8) << 1) | (col_wrapped as u8)
            })
            .collect()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift_y > 0 || self.shift_x > 0
    }
}

/// Apply the pad+roll map to a raw feature map.
pub fn apply_forward<T: Scalar>(plan: &PartitionPlan, fmap: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = fmap.dims3()?;
    if h != plan.orig_h || w != plan.orig_w {
        return Err(Error::shape(format!(
            "plan built for {}x{}, map is {h}x{w}",
            plan.orig_h, plan.orig_w
        )));
    }
    let plane = h * w;
    let oplane = plan.padded_h * plan.padded_w;
    let mut out = Tensor::zeros(&[c, plan.padded_h, plan.padded_w]);
    let (xd, od) = (fmap.data(), out.data_mut());
    for ch in 0..c {
        for (i, &s) in plan.forward_src.iter().enumerate() {
            od[ch * oplane + i] = xd[ch * plane + s];
        }
    }
    Ok(out)
}

/// Cut a feature map into token groups.
pub fn partition<T: Scalar>(
    fmap: &Tensor<T>,
    geom: &PartitionGeom,
) -> Result<(PartitionPlan, Vec<TokenGroup<T>>)> {
    partition_with(fmap, geom, 1)
}

/// [`partition`] with extra long-axis padding for anchored stripes.
pub fn partition_with<T: Scalar>(
    fmap: &Tensor<T>,
    geom: &PartitionGeom,
    long_multiple: usize,
) -> Result<(PartitionPlan, Vec<TokenGroup<T>>)> {
    let (c, h, w) = fmap.dims3()?;
    let plan = partition_plan(h, w, geom, long_multiple, 1)?;
    let rolled = apply_forward(&plan, fmap)?;
    let plane = plan.padded_h * plan.padded_w;
    let rd = rolled.data();
    let mut out = Vec::with_capacity(plan.groups.len());
    for gg in &plan.groups {
        let n = gg.positions.len();
        let mut tokens = Tensor::zeros(&[n, c]);
        {
            let td = tokens.data_mut();
            for (i, &p) in gg.positions.iter().enumerate() {
                for ch in 0..c {
                    td[i * c + ch] = rd[ch * plane + p];
                }
            }
        }
        out.push(TokenGroup {
            tokens,
            index_map: gg.positions.as_ref().clone(),
            height: gg.height,
            width: gg.width,
        });
    }
    Ok((plan, out))
}

/// Exact inverse of [`partition`]: scatter the groups back, un-roll, crop.
/// Fails on incomplete or overlapping index coverage.
pub fn merge<T: Scalar>(plan: &PartitionPlan, groups: &[TokenGroup<T>]) -> Result<Tensor<T>> {
    if groups.is_empty() {
        return Err(Error::Internal("merge of zero groups".into()));
    }
    let c = groups[0].tokens.dims2()?.1;
    let plane = plan.padded_h * plan.padded_w;
    let mut rolled = Tensor::<T>::zeros(&[c, plan.padded_h, plan.padded_w]);
    let mut covered = vec![false; plane];
    {
        let rd = rolled.data_mut();
        for (gi, gr) in groups.iter().enumerate() {
            let (n, cg) = gr.tokens.dims2()?;
            if cg != c || n != gr.index_map.len() {
                return Err(Error::Internal(format!(
                    "merge group {gi}: tokens {:?} vs {} indices",
                    gr.tokens.shape(),
                    gr.index_map.len()
                )));
            }
            let td = gr.tokens.data();
            for (i, &p) in gr.index_map.iter().enumerate() {
                if p >= plane || covered[p] {
                    return Err(Error::Internal(format!(
                        "merge: index {p} out of range or covered twice"
                    )));
                }
                covered[p] = true;
                for ch in 0..c {
                    rd[ch * plane + p] = td[i * c + ch];
                }
            }
        }
    }
    if !covered.iter().all(|&v| v) {
        return Err(Error::Internal("merge: incomplete coverage".into()));
    }
    let mut out = Tensor::zeros(&[c, plan.orig_h, plan.orig_w]);
    let oplane = plan.orig_h * plan.orig_w;
    {
        let (rd, od) = (rolled.data(), out.data_mut());
        for ch in 0..c {
            for (i, &s) in plan.inverse_src.iter().enumerate() {
                od[ch * oplane + i] = rd[ch * plane + s];
            }
        }
    }
    Ok(out)
}
