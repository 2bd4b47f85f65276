//! Raw (non-tape) kernels. Every kernel is a pure function with a fixed
//! reduction order, so identical inputs give bit-identical outputs. Outputs
//! are finiteness-checked: NaN/Inf becomes an [`Error::Numeric`].

use serde::{Deserialize, Serialize};

use super::{ensure_finite, flops, Scalar, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearities available on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Relu,
    Sigmoid,
}

/// `C[i,j] = Σ_t A[i,t]·B[t,j]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    flops::add(flops::matmul_flops(m, k, n));
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd, od) = (a.data(), b.data(), out.data_mut());
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    ensure_finite(&out, "matmul output")?;
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction. Rejects non-finite input.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if !x.is_all_finite() {
        return Err(Error::Numeric("softmax_rows input must be finite".into()));
    }
    if c == 0 {
        return Err(Error::shape("softmax_rows on zero columns"));
    }
    flops::add(flops::softmax_flops(r, c));
    let mut out = Tensor::zeros(&[r, c]);
    let (xd, od) = (x.data(), out.data_mut());
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let orow = &mut od[i * c..(i + 1) * c];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = T::zero();
        for j in 0..c {
            let e = (row[j] - mx).exp_nonpos();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    ensure_finite(&out, "softmax_rows output")?;
    Ok(out)
}

/// `X·W + b` with the bias broadcast over rows.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d_out) = w.dims2()?;
    if b.shape() != [d_out] {
        return Err(Error::shape(format!(
            "linear bias {:?} does not match output dim {}",
            b.shape(),
            d_out
        )));
    }
    let mut out = matmul(x, w)?;
    let n = out.rows();
    let od = out.data_mut();
    let bd = b.data();
    for i in 0..n {
        for j in 0..d_out {
            od[i * d_out + j] += bd[j];
        }
    }
    ensure_finite(&out, "linear output")?;
    Ok(out)
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// `x: [c_in, h, w]`, `k: [c_out, c_in, kh, kw]`, odd kernel extents,
/// output `[c_out, h + 2·pad − kh + 1, w + 2·pad − kw + 1]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = x.dims3()?;
    if k.rank() != 4 {
        return Err(Error::shape(format!(
            "conv kernel must be rank 4, got {:?}",
            k.shape()
        )));
    }
    let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv kernel expects {kc} input channels, feature map has {c_in}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "conv kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv bias {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let (xd, kd, od) = (x.data(), k.data(), out.data_mut());
    for co in 0..c_out {
        let b = bias.data()[co];
        for v in od[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
            *v = b;
        }
        for ci in 0..c_in {
            for u in 0..kh {
                // output (i,j) reads input (i + u - pad, j + v - pad);
                // precompute the valid ranges so the inner loop is a
                // branch-free axpy
                let i0 = pad.saturating_sub(u);
                let i1 = if h + pad > u { (h + pad - u).min(oh) } else { i0 };
                for v in 0..kw {
                    let kv = kd[((co * c_in + ci) * kh + u) * kw + v];
                    if kv == T::zero() {
                        continue;
                    }
                    let j0 = pad.saturating_sub(v);
                    let j1 = if w + pad > v { (w + pad - v).min(ow) } else { j0 };
                    if j0 >= j1 {
                        continue;
                    }
                    let len = j1 - j0;
                    for i in i0..i1 {
                        let si = i + u - pad;
                        let xs = &xd[(ci * h + si) * w + j0 + v - pad..][..len];
                        let os = &mut od[(co * oh + i) * ow + j0..][..len];
                        for t in 0..len {
                            os[t] += kv * xs[t];
                        }
                    }
                }
            }
        }
    }
    ensure_finite(&out, "conv2d output")?;
    Ok(out)
}

/// Block pooling with independent per-axis factors. `sh`/`sw` must divide the
/// spatial extents. Returns the pooled map and, for max mode, the flat input
/// index of each block's (first) maximum.
pub fn pool2d_axes<T: Scalar>(
    x: &Tensor<T>,
    sh: usize,
    sw: usize,
    max_mode: bool,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let (c, h, w) = x.dims3()?;
    if sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
        return Err(Error::Config(format!(
            "pool factors {sh}x{sw} do not divide feature map {h}x{w}"
        )));
    }
    let (oh, ow) = (h / sh, w / sw);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = if max_mode {
        Some(vec![0usize; c * oh * ow])
    } else {
        None
    };
    let xd = x.data();
    let od = out.data_mut();
    let inv = T::from_f64c(1.0 / (sh * sw) as f64);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let oidx = (ch * oh + i) * ow + j;
                if max_mode {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for di in 0..sh {
                        for dj in 0..sw {
                            let idx = (ch * h + i * sh + di) * w + j * sw + dj;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    od[oidx] = best;
                    argmax.as_mut().unwrap()[oidx] = best_idx;
                } else {
                    let mut sum = T::zero();
                    for di in 0..sh {
                        for dj in 0..sw {
                            sum += xd[(ch * h + i * sh + di) * w + j * sw + dj];
                        }
                    }
                    od[oidx] = sum * inv;
                }
            }
        }
    }
    ensure_finite(&out, "pool2d output")?;
    Ok((out, argmax))
}

/// Square-block pooling, `s` dividing both extents.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, s: usize, max_mode: bool) -> Result<Tensor<T>> {
    Ok(pool2d_axes(x, s, s, max_mode)?.0)
}

/// Per-row normalization to zero mean / unit variance, then `γ·x̂ + β`.
/// Population variance; `eps` keeps the rsqrt finite on constant rows.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm affine {:?}/{:?} does not match width {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, d]);
    let (xd, od) = (x.data(), out.data_mut());
    let (gd, bd) = (gamma.data(), beta.data());
    let dn = T::from_f64c(d as f64);
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row.iter() {
            let dlt = v - mean;
            var += dlt * dlt;
        }
        var = var / dn;
        let rstd = (var + eps).sqrt().recip();
        let orow = &mut od[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = gd[j] * (row[j] - mean) * rstd + bd[j];
        }
    }
    ensure_finite(&out, "layer_norm output")?;
    Ok(out)
}

pub fn activation_scalar<T: Scalar>(v: T, kind: Activation) -> T {
    match kind {
        Activation::Gelu => {
            // sqrt(2/pi)
            let c = T::from_f64c(0.797_884_560_802_865_4);
            let half = T::from_f64c(0.5);
            let a = T::from_f64c(0.044_715);
            half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
        }
        Activation::Relu => v.max(T::zero()),
        Activation::Sigmoid => sigmoid(v),
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Derivative of [`activation_scalar`] at `v`.
pub fn activation_grad_scalar<T: Scalar>(v: T, kind: Activation) -> T {
    match kind {
        Activation::Gelu => {
            let c = T::from_f64c(0.797_884_560_802_865_4);
            let half = T::from_f64c(0.5);
            let a = T::from_f64c(0.044_715);
            let three = T::from_f64c(3.0);
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            half * (T::one() + t)
                + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
        }
        Activation::Relu => {
            if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid(v);
            s * (T::one() - s)
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    let out = x.map(|v| activation_scalar(v, kind));
    ensure_finite(&out, "activation output")?;
    Ok(out)
}

/// Rearrange `[c·r², h, w]` into `[c, h·r, w·r]`.
///
/// Layout (pinned for checkpoint portability):
/// `out[c, i·r + di, j·r + dj] = in[c·r² + di·r + dj, i, j]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c_in, h, w) = x.dims3()?;
    if r == 0 || c_in % (r * r) != 0 {
        return Err(Error::Config(format!(
            "pixel_shuffle needs channels divisible by r²; got {c_in} channels, r = {r}"
        )));
    }
    let c = c_in / (r * r);
    let mut out = Tensor::zeros(&[c, h * r, w * r]);
    let (xd, od) = (x.data(), out.data_mut());
    for ch in 0..c {
        for di in 0..r {
            for dj in 0..r {
                let src_c = ch * r * r + di * r + dj;
                for i in 0..h {
                    for j in 0..w {
                        od[(ch * h * r + i * r + di) * w * r + j * r + dj] =
                            xd[(src_c * h + i) * w + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, hr, wr) = x.dims3()?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::Config(format!(
            "pixel_unshuffle needs spatial extents divisible by r; got {hr}x{wr}, r = {r}"
        )));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor::zeros(&[c * r * r, h, w]);
    let (xd, od) = (x.data(), out.data_mut());
    for ch in 0..c {
        for di in 0..r {
            for dj in 0..r {
                let dst_c = ch * r * r + di * r + dj;
                for i in 0..h {
                    for j in 0..w {
                        od[(dst_c * h + i) * w + j] =
                            xd[(ch * hr + i * r + di) * wr + j * r + dj];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let mut out = Tensor::zeros(&[n, m]);
    let (xd, od) = (x.data(), out.data_mut());
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = xd[i * n + j];
        }
    }
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    ensure_finite(&out, "add output")?;
    Ok(out)
}
