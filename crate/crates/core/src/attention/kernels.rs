//! Raw (non-tape) attention kernels, used by the oracle/benchmark paths.
//! All similarity and map computations here feed the flop counters.

use super::SimilarityMeasure;
use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, flops, kernels, PoolMode, Scalar, Tensor};

/// Pairwise similarity logits between `n_q` queries and `n_k` keys.
///
/// `dot` gives `Q·Kᵀ/√d`; `negative_sq_euclidean` gives `−‖qᵢ−kⱼ‖²/√d`,
/// sharing the `1/√d` temperature.
pub fn similarity_logits<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<Tensor<T>> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if d != dk {
        return Err(Error::shape(format!(
            "similarity feature dims differ: {d} vs {dk}"
        )));
    }
    let inv = T::from_f64c(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(&[nq, nk]);
    let (qd, kd, od) = (q.data(), k.data(), out.data_mut());
    match measure {
        SimilarityMeasure::Dot => {
            flops::add(flops::sim_dot_flops(nq, nk, d));
            for i in 0..nq {
                for j in 0..nk {
                    let mut s = T::zero();
                    for t in 0..d {
                        s += qd[i * d + t] * kd[j * d + t];
                    }
                    od[i * nk + j] = s * inv;
                }
            }
        }
        SimilarityMeasure::NegativeSqEuclidean => {
            flops::add(flops::sim_euclid_flops(nq, nk, d));
            for i in 0..nq {
                for j in 0..nk {
                    let mut s = T::zero();
                    for t in 0..d {
                        let dl = qd[i * d + t] - kd[j * d + t];
                        s += dl * dl;
                    }
                    od[i * nk + j] = -(s * inv);
                }
            }
        }
    }
    ensure_finite(&out, "similarity logits")?;
    Ok(out)
}

/// Exact self-attention: `softmax(sim(Q,K))·V`, materializing the full map.
pub fn exact_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<Tensor<T>> {
    if k.dims2()?.0 != v.dims2()?.0 {
        return Err(Error::shape(format!(
            "key rows {} != value rows {}",
            k.dims2()?.0,
            v.dims2()?.0
        )));
    }
    let map = kernels::softmax_rows(&similarity_logits(q, k, measure)?)?;
    kernels::matmul(&map, v)
}

/// The exact attention map alone: `softmax(sim(Q,K))`.
pub fn exact_map<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<Tensor<T>> {
    kernels::softmax_rows(&similarity_logits(q, k, measure)?)
}

/// The two anchored maps `(Mₑ, M_d)`:
/// `Mₑ = softmax(sim(Q,A))` expanding, `M_d = softmax(sim(A,K))` distilling.
pub fn anchored_maps<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    a: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let m_e = kernels::softmax_rows(&similarity_logits(q, a, measure)?)?;
    let m_d = kernels::softmax_rows(&similarity_logits(a, k, measure)?)?;
    Ok((m_e, m_d))
}

/// Anchored self-attention `Mₑ·(M_d·V)`.
///
/// Evaluation proceeds right-to-left — the distilled feature `Z = M_d·V` is
/// formed first — so no `N×N` array is ever materialized; the largest
/// intermediate has `N·N_a` elements.
pub fn anchored_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    a: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<Tensor<T>> {
    let n = q.dims2()?.0;
    let n_a = a.dims2()?.0;
    if n_a > n {
        return Err(Error::Config(format!(
            "{n_a} anchors for {n} tokens: anchors must summarize, not inflate"
        )));
    }
    if k.dims2()?.0 != v.dims2()?.0 {
        return Err(Error::shape(format!(
            "key rows {} != value rows {}",
            k.dims2()?.0,
            v.dims2()?.0
        )));
    }
    let m_d = kernels::softmax_rows(&similarity_logits(a, k, measure)?)?;
    let z = kernels::matmul(&m_d, v)?;
    let m_e = kernels::softmax_rows(&similarity_logits(q, a, measure)?)?;
    kernels::matmul(&m_e, &z)
}

/// Summarize a stripe's feature grid into anchor tokens: block-pool by the
/// clamped per-axis factors, flatten to tokens, then project linearly.
///
/// With `down_factor == 1`, identity projection and zero bias, the anchors
/// are exactly the input tokens.
pub fn compute_anchors<T: Scalar>(
    x: &Tensor<T>,
    pool: PoolMode,
    down_factor: usize,
    proj_w: &Tensor<T>,
    proj_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let fh = down_factor.min(h);
    let fw = down_factor.min(w);
    if h % fh != 0 || w % fw != 0 {
        return Err(Error::Config(format!(
            "anchor pooling {fh}x{fw} does not divide stripe {h}x{w} (partition padding bug)"
        )));
    }
    let (pooled, _) = kernels::pool2d_axes(x, fh, fw, pool == PoolMode::Max)?;
    let n_a = (h / fh) * (w / fw);
    let tokens = kernels::transpose(&pooled.reshaped(&[c, n_a])?)?;
    kernels::linear(&tokens, proj_w, proj_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn dot_similarity_unit_vectors() {
        let q = t2(1, 2, &[1.0, 0.0]);
        let s = similarity_logits(&q, &q, SimilarityMeasure::Dot).unwrap();
        assert!((s.data()[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn euclidean_identical_rows_have_zero_diagonal() {
        let q = t2(3, 2, &[1.0, 2.0, -0.5, 0.25, 3.0, -1.0]);
        let s = similarity_logits(&q, &q, SimilarityMeasure::NegativeSqEuclidean).unwrap();
        for i in 0..3 {
            assert_eq!(s.at2(i, i), 0.0);
            for j in 0..3 {
                assert!(s.at2(i, j) <= 0.0);
            }
        }
    }

    #[test]
    fn similarity_rejects_dim_mismatch() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let k = Tensor::<f64>::zeros(&[2, 4]);
        assert!(similarity_logits(&q, &k, SimilarityMeasure::Dot).is_err());
    }

    #[test]
    fn exact_attention_single_token_returns_value() {
        let q = t2(1, 3, &[0.3, -2.0, 1.0]);
        let k = t2(1, 3, &[5.0, 0.0, -1.0]);
        let v = t2(1, 3, &[7.0, 8.0, 9.0]);
        let y = exact_attention(&q, &k, &v, SimilarityMeasure::Dot).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn exact_attention_zero_queries_average_values() {
        let q = Tensor::<f64>::zeros(&[3, 2]);
        let k = t2(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 2.0, 2.0]);
        let v = t2(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = exact_attention(&q, &k, &v, SimilarityMeasure::Dot).unwrap();
        for i in 0..3 {
            assert!((y.at2(i, 0) - 4.0).abs() < 1e-12);
            assert!((y.at2(i, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_attention_rejects_kv_row_mismatch() {
        let q = Tensor::<f64>::zeros(&[2, 2]);
        let k = Tensor::<f64>::zeros(&[3, 2]);
        let v = Tensor::<f64>::zeros(&[4, 2]);
        assert!(exact_attention(&q, &k, &v, SimilarityMeasure::Dot).is_err());
    }

    #[test]
    fn anchored_single_token_and_anchor_returns_value() {
        let q = t2(1, 2, &[0.1, 0.2]);
        let k = t2(1, 2, &[0.5, -0.5]);
        let v = t2(1, 2, &[4.0, -3.0]);
        let a = t2(1, 2, &[9.9, 9.9]);
        let y = anchored_attention(&q, &k, &v, &a, SimilarityMeasure::Dot).unwrap();
        assert!(y.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn anchored_single_anchor_collapses_to_rank_one() {
        // one anchor: Mₑ is an all-ones column, so every output row equals
        // Σⱼ softmax(sim(a,K))ⱼ · Vⱼ
        use crate::tensor::kernels as tk;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let q = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
        let y = anchored_attention(&q, &k, &v, &a, SimilarityMeasure::Dot).unwrap();
        let m_d = tk::softmax_rows(&similarity_logits(&a, &k, SimilarityMeasure::Dot).unwrap()).unwrap();
        let want_row = tk::matmul(&m_d, &v).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((y.at2(i, j) - want_row.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anchored_rejects_more_anchors_than_tokens() {
        let q = Tensor::<f64>::zeros(&[2, 2]);
        let a = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(
            anchored_attention(&q, &q, &q, &a, SimilarityMeasure::Dot),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn anchors_identity_when_factor_one() {
        // s=1, identity projection, zero bias → anchors == input tokens
        let x = Tensor::from_vec(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let eye = Tensor::<f64>::eye(2);
        let zero = Tensor::<f64>::zeros(&[2]);
        let a = compute_anchors(&x, PoolMode::Avg, 1, &eye, &zero).unwrap();
        // tokens are row-major spatial positions with channel columns
        assert_eq!(a.shape(), &[6, 2]);
        for p in 0..6 {
            assert_eq!(a.at2(p, 0), x.data()[p]);
            assert_eq!(a.at2(p, 1), x.data()[6 + p]);
        }
    }

    #[test]
    fn anchors_of_constant_map_are_identical_rows() {
        let x = Tensor::<f64>::full(&[3, 4, 8], 0.7);
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let w = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let a = compute_anchors(&x, PoolMode::Avg, 2, &w, &b).unwrap();
        assert_eq!(a.shape(), &[8, 3]);
        for i in 1..8 {
            for j in 0..3 {
                assert_eq!(a.at2(i, j), a.at2(0, j));
            }
        }
    }

    #[test]
    fn anchors_reject_non_dividing_factor() {
        let x = Tensor::<f64>::zeros(&[1, 4, 5]);
        let eye = Tensor::<f64>::eye(1);
        let zero = Tensor::<f64>::zeros(&[1]);
        // fw = min(4,5) = 4 does not divide 5
        assert!(compute_anchors(&x, PoolMode::Avg, 4, &eye, &zero).is_err());
    }
}
