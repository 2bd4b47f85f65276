//! Independent reference implementations for oracle tests. Everything here
//! is deliberately written as plain f64 loops that do not share code with
//! the library's kernels or tape.

#![allow(dead_code)]

use grl_core::Tensor64;
use grl_core::attention::{StripeDirection, StripeSpec};

use rand_chacha::ChaCha8Rng;


pub fn t(shape: &[usize], data: Vec<f64>) -> Tensor64 {
    Tensor64::from_vec(shape.to_vec(), data).unwrap()
}

/// Triple-loop matmul.
pub fn naive_matmul(a: &Tensor64, b: &Tensor64) -> Tensor64 {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    t(&[m, n], out)
}

pub fn naive_softmax_rows(x: &Tensor64) -> Tensor64 {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..c {
            out[i * c + j] = exps[j] / sum;
        }
    }
    t(&[r, c], out)
}

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor64, k: &Tensor64, bias: &[f64], pad: usize) -> Tensor64 {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = bias[co];
                for ci in 0..c_in {
                    for u in 0..kh {
                        for v in 0..kw {
                            let si = i as isize + u as isize - pad as isize;
                            let sj = j as isize + v as isize - pad as isize;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            s += x.data()[(ci * h + si as usize) * w + sj as usize]
                                * k.data()[((co * c_in + ci) * kh + u) * kw + v];
                        }
                    }
                }
                out[(co * oh + i) * ow + j] = s;
            }
        }
    }
    t(&[c_out, oh, ow], out)
}

pub fn naive_linear(x: &Tensor64, w: &Tensor64, b: &[f64]) -> Tensor64 {
    let mut out = naive_matmul(x, w);
    let (n, d) = (out.shape()[0], out.shape()[1]);
    for i in 0..n {
        for j in 0..d {
            out.data_mut()[i * d + j] += b[j];
        }
    }
    out
}

pub fn naive_layer_norm(x: &Tensor64, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = gamma[j] * (row[j] - mean) * rstd + beta[j];
        }
    }
    t(&[n, d], out)
}

/// Per-pair similarity: `dot` → q·k/√d, else −‖q−k‖²/√d.
pub fn naive_similarity(q: &Tensor64, k: &Tensor64, dot: bool) -> Tensor64 {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let inv = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * nk];
    for i in 0..nq {
        for j in 0..nk {
            let mut s = 0.0;
            for p in 0..d {
                let (a, b) = (q.data()[i * d + p], k.data()[j * d + p]);
                if dot {
                    s += a * b;
                } else {
                    s -= (a - b) * (a - b);
                }
            }
            out[i * nk + j] = s * inv;
        }
    }
    t(&[nq, nk], out)
}

/// Fully naive exact attention (explicit loops end to end).
pub fn naive_exact_attention(q: &Tensor64, k: &Tensor64, v: &Tensor64, dot: bool) -> Tensor64 {
    let map = naive_softmax_rows(&naive_similarity(q, k, dot));
    naive_matmul(&map, v)
}

/// Block pooling with per-axis factors.
pub fn naive_pool_axes(x: &Tensor64, fh: usize, fw: usize, max_mode: bool) -> Tensor64 {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / fh, w / fw);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut agg = if max_mode { f64::NEG_INFINITY } else { 0.0 };
                for di in 0..fh {
                    for dj in 0..fw {
                        let v = x.data()[(ch * h + i * fh + di) * w + j * fw + dj];
                        if max_mode {
                            agg = agg.max(v);
                        } else {
                            agg += v;
                        }
                    }
                }
                out[(ch * oh + i) * ow + j] = if max_mode { agg } else { agg / (fh * fw) as f64 };
            }
        }
    }
    t(&[c, oh, ow], out)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

pub fn max_rel_err(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

// ---------------------------------------------------------------------------
// straight-line reference implementations of the attention blocks
// ---------------------------------------------------------------------------

pub fn fold(t: usize, n: usize) -> usize {
    let m = t % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

pub struct QkvParams {
    pub w_q: Tensor64,
    pub b_q: Tensor64,
    pub w_k: Tensor64,
    pub b_k: Tensor64,
    pub w_v: Tensor64,
    pub b_v: Tensor64,
}

impl QkvParams {
    pub fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (c as f64).sqrt();
        QkvParams {
            w_q: Tensor64::randn(&[c, c], s, rng),
            b_q: Tensor64::randn(&[c], 0.1, rng),
            w_k: Tensor64::randn(&[c, c], s, rng),
            b_k: Tensor64::randn(&[c], 0.1, rng),
            w_v: Tensor64::randn(&[c, c], s, rng),
            b_v: Tensor64::randn(&[c], 0.1, rng),
        }
    }
}

pub fn slice_cols(x: &Tensor64, start: usize, len: usize) -> Tensor64 {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * len];
    for i in 0..m {
        out[i * len..(i + 1) * len].copy_from_slice(&x.data()[i * n + start..i * n + start + len]);
    }
    t(&[m, len], out)
}

/// Reference window attention: pad, roll, loop windows naively, with bias
/// and shift masking. Also reports the largest attention weight given to a
/// masked (cross-boundary) pair.
#[allow(clippy::too_many_arguments)]
pub fn reference_window_attention(
    fmap: &Tensor64,
    size: usize,
    shift: usize,
    heads: usize,
    p: &QkvParams,
    bias_tables: &[Tensor64],
) -> (Tensor64, f64) {
    let (c, h, w) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    let hp = h.div_ceil(size) * size;
    let wp = w.div_ceil(size) * size;
    // pad then roll
    let mut rolled = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for r in 0..hp {
            for cc in 0..wp {
                let pr = (r + shift) % hp;
                let pc = (cc + shift) % wp;
                rolled[(ch * hp + r) * wp + cc] = fmap.data()[(ch * h + fold(pr, h)) * w + fold(pc, w)];
            }
        }
    }
    let dh = c / heads;
    let n = size * size;
    let span = 2 * size - 1;
    let mut out_rolled = vec![0.0; c * hp * wp];
    let mut worst_masked = 0.0_f64;
    for wr in 0..hp / size {
        for wc in 0..wp / size {
            let mut tokens = Tensor64::zeros(&[n, c]);
            let mut regions = vec![0u8; n];
            for i in 0..n {
                let r = wr * size + i / size;
                let cc = wc * size + i % size;
                for ch in 0..c {
                    tokens.data_mut()[i * c + ch] = rolled[(ch * hp + r) * wp + cc];
                }
                let row_wrapped = shift > 0 && r >= hp - shift;
                let col_wrapped = shift > 0 && cc >= wp - shift;
                regions[i] = ((row_wrapped as u8) << 1) | (col_wrapped as u8);
            }
            let q = naive_linear(&tokens, &p.w_q, p.b_q.data());
            let k = naive_linear(&tokens, &p.w_k, p.b_k.data());
            let v = naive_linear(&tokens, &p.w_v, p.b_v.data());
            let mut merged = Tensor64::zeros(&[n, c]);
            for head in 0..heads {
                let qh = slice_cols(&q, head * dh, dh);
                let kh = slice_cols(&k, head * dh, dh);
                let vh = slice_cols(&v, head * dh, dh);
                let mut logits = naive_similarity(&qh, &kh, true);
                for i in 0..n {
                    let (ri, ci) = (i / size, i % size);
                    for j in 0..n {
                        let (rj, cj) = (j / size, j % size);
                        let idx = (ri + size - 1 - rj) * span + (ci + size - 1 - cj);
                        logits.data_mut()[i * n + j] += bias_tables[head].data()[idx];
                        if regions[i] != regions[j] {
                            logits.data_mut()[i * n + j] += -1.0e4;
                        }
                    }
                }
                let att = naive_softmax_rows(&logits);
                for i in 0..n {
                    for j in 0..n {
                        if regions[i] != regions[j] {
                            worst_masked = worst_masked.max(att.data()[i * n + j]);
                        }
                    }
                }
                let oh = naive_matmul(&att, &vh);
                for i in 0..n {
                    for q0 in 0..dh {
                        merged.data_mut()[i * c + head * dh + q0] = oh.data()[i * dh + q0];
                    }
                }
            }
            for i in 0..n {
                let r = wr * size + i / size;
                let cc = wc * size + i % size;
                for ch in 0..c {
                    out_rolled[(ch * hp + r) * wp + cc] = merged.data()[i * c + ch];
                }
            }
        }
    }
    // unroll + crop
    let mut out = Tensor64::zeros(&[c, h, w]);
    for ch in 0..c {
        for r in 0..h {
            for cc in 0..w {
                let rr = (r + hp - shift % hp) % hp;
                let rc = (cc + wp - shift % wp) % wp;
                out.data_mut()[(ch * h + r) * w + cc] = out_rolled[(ch * hp + rr) * wp + rc];
            }
        }
    }
    (out, worst_masked)
}

/// Straight-line reference of the anchored stripe block.
#[allow(clippy::too_many_arguments)]
pub fn reference_stripe_attention(
    fmap: &Tensor64,
    stripe: &StripeSpec,
    s_factor: usize,
    pool_max: bool,
    heads: usize,
    measure_dot: bool,
    p: &QkvParams,
    anchor_w: &Tensor64,
    anchor_b: &Tensor64,
    out_w: &Tensor64,
    out_b: &Tensor64,
) -> Tensor64 {
    let (c, h, w) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    let horizontal = stripe.direction == StripeDirection::Horizontal;
    let (hp, wp) = if horizontal {
        (
            h.div_ceil(stripe.width) * stripe.width,
            w.div_ceil(s_factor) * s_factor,
        )
    } else {
        (
            h.div_ceil(s_factor) * s_factor,
            w.div_ceil(stripe.width) * stripe.width,
        )
    };
    let (sy, sx) = if horizontal { (stripe.shift, 0) } else { (0, stripe.shift) };
    let mut rolled = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for r in 0..hp {
            for cc in 0..wp {
                let pr = (r + sy) % hp;
                let pc = (cc + sx) % wp;
                rolled[(ch * hp + r) * wp + cc] = fmap.data()[(ch * h + fold(pr, h)) * w + fold(pc, w)];
            }
        }
    }
    let dh = c / heads;
    let mut out_rolled = vec![0.0; c * hp * wp];
    let bands = if horizontal { hp / stripe.width } else { wp / stripe.width };
    for band in 0..bands {
        let (gh, gw) = if horizontal { (stripe.width, wp) } else { (hp, stripe.width) };
        let n = gh * gw;
        let mut tokens = Tensor64::zeros(&[n, c]);
        let pos = |i: usize| -> (usize, usize) {
            if horizontal {
                (band * stripe.width + i / gw, i % gw)
            } else {
                (i / gw, band * stripe.width + i % gw)
            }
        };
        for i in 0..n {
            let (r, cc) = pos(i);
            for ch in 0..c {
                tokens.data_mut()[i * c + ch] = rolled[(ch * hp + r) * wp + cc];
            }
        }
        let q = naive_linear(&tokens, &p.w_q, p.b_q.data());
        let k = naive_linear(&tokens, &p.w_k, p.b_k.data());
        let v = naive_linear(&tokens, &p.w_v, p.b_v.data());
        // anchors from pre-projection tokens: grid [c, gh, gw] → pool → project
        let mut grid = Tensor64::zeros(&[c, gh, gw]);
        for i in 0..n {
            for ch in 0..c {
                grid.data_mut()[ch * n + i] = tokens.data()[i * c + ch];
            }
        }
        let (fh, fw) = (s_factor.min(gh), s_factor.min(gw));
        let pooled = naive_pool_axes(&grid, fh, fw, pool_max);
        let n_a = (gh / fh) * (gw / fw);
        let mut a_tokens = Tensor64::zeros(&[n_a, c]);
        for i in 0..n_a {
            for ch in 0..c {
                a_tokens.data_mut()[i * c + ch] = pooled.data()[ch * n_a + i];
            }
        }
        let a = naive_linear(&a_tokens, anchor_w, anchor_b.data());
        let mut merged = Tensor64::zeros(&[n, c]);
        for head in 0..heads {
            let qh = slice_cols(&q, head * dh, dh);
            let kh = slice_cols(&k, head * dh, dh);
            let vh = slice_cols(&v, head * dh, dh);
            let ah = slice_cols(&a, head * dh, dh);
            let m_d = naive_softmax_rows(&naive_similarity(&ah, &kh, measure_dot));
            let z = naive_matmul(&m_d, &vh);
            let m_e = naive_softmax_rows(&naive_similarity(&qh, &ah, measure_dot));
            let oh = naive_matmul(&m_e, &z);
            for i in 0..n {
                for q0 in 0..dh {
                    merged.data_mut()[i * c + head * dh + q0] = oh.data()[i * dh + q0];
                }
            }
        }
        let projected = naive_linear(&merged, out_w, out_b.data());
        for i in 0..n {
            let (r, cc) = pos(i);
            for ch in 0..c {
                out_rolled[(ch * hp + r) * wp + cc] = projected.data()[i * c + ch];
            }
        }
    }
    let mut out = Tensor64::zeros(&[c, h, w]);
    for ch in 0..c {
        for r in 0..h {
            for cc in 0..w {
                let rr = (r + hp - sy % hp) % hp;
                let rc = (cc + wp - sx % wp) % wp;
                out.data_mut()[(ch * h + r) * w + cc] = out_rolled[(ch * hp + rr) * wp + rc];
            }
        }
    }
    out
}

