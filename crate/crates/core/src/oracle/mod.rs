//! Diagnostics for the anchored approximation: exact vs. approximate
//! attention maps, Pearson correlation, the rank bound, complexity
//! accounting, and heat-map export.

pub mod svd;

use std::path::Path;

use crate::attention::{kernels as akern, SimilarityMeasure};
use crate::error::{Error, Result};
use crate::tensor::{flops, kernels, Scalar, Tensor};
use crate::util::atomic_write;

/// Guard: `attention_maps` refuses to materialize maps beyond this many
/// tokens; subsample instead.
pub const MAP_GUARD: usize = 4096;

/// Exact map `M`, materialized approximation `Mₑ·M_d`, and their agreement
/// statistics.
#[derive(Clone, Debug)]
pub struct AttentionDiagnostics<T> {
    pub exact_map: Tensor<T>,
    pub approx_map: Tensor<T>,
    /// Global Pearson over the flattened maps; NaN when degenerate.
    pub pearson: f64,
    /// True when either map had zero variance (constant input).
    pub degenerate: bool,
    pub rank_bound_ok: bool,
    pub max_row_sum_err: f64,
}

/// Counted multiply-adds and map-element counts for exact vs. anchored
/// attention at a given problem size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub n: usize,
    pub n_a: usize,
    pub d: usize,
    pub flops_exact: u64,
    pub flops_anchored: u64,
    /// Attention-map elements: N².
    pub mem_exact: u64,
    /// Attention-map elements: N·N_a for each of Mₑ and M_d.
    pub mem_anchored: u64,
}

impl ComplexityReport {
    /// The map-application matmul terms alone (2·N²·d vs. 4·N·N_a·d for dot
    /// similarity).
    pub fn matmul_flops_exact(&self) -> u64 {
        2 * (self.n as u64) * (self.n as u64) * (self.d as u64)
    }

    pub fn matmul_flops_anchored(&self) -> u64 {
        4 * (self.n as u64) * (self.n_a as u64) * (self.d as u64)
    }
}

/// Sample Pearson correlation over the flattened values. `None` when either
/// input has zero variance (the statistic is undefined).
pub fn pearson<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<f64>> {
    if a.numel() != b.numel() {
        return Err(Error::shape(format!(
            "pearson over different sizes: {} vs {}",
            a.numel(),
            b.numel()
        )));
    }
    if a.numel() < 2 {
        return Err(Error::shape("pearson needs at least 2 elements"));
    }
    let n = a.numel() as f64;
    let (mut ma, mut mb) = (0.0_f64, 0.0_f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ma += x.to_f64c();
        mb += y.to_f64c();
    }
    ma /= n;
    mb /= n;
    let (mut cov, mut va, mut vb) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let dx = x.to_f64c() - ma;
        let dy = y.to_f64c() - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va.sqrt() * vb.sqrt())))
}

/// True iff `σ_{N_a+1}/σ₁ < rel_tol` for the square map — the numerical
/// statement that the map's rank is at most `n_a`.
pub fn rank_check<T: Scalar>(map: &Tensor<T>, n_a: usize, rel_tol: f64) -> Result<bool> {
    let (r, c) = map.dims2()?;
    if r != c {
        return Err(Error::shape(format!("rank_check needs a square map, got {r}x{c}")));
    }
    let sv = svd::singular_values(map)?;
    if n_a >= sv.len() {
        return Ok(true);
    }
    if sv[0] == 0.0 {
        return Ok(true);
    }
    Ok(sv[n_a] / sv[0] < rel_tol)
}

/// Largest deviation of any row sum from 1.
pub fn max_row_sum_err<T: Scalar>(map: &Tensor<T>) -> Result<f64> {
    let (r, c) = map.dims2()?;
    let mut worst = 0.0_f64;
    for i in 0..r {
        let mut s = 0.0_f64;
        for j in 0..c {
            s += map.data()[i * c + j].to_f64c();
        }
        worst = worst.max((s - 1.0).abs());
    }
    Ok(worst)
}

/// Materialize and compare the exact map `M` against the anchored
/// approximation `Mₑ·M_d`.
pub fn attention_maps<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    a: &Tensor<T>,
    measure: SimilarityMeasure,
) -> Result<AttentionDiagnostics<T>> {
    let n = q.dims2()?.0;
    let nk = k.dims2()?.0;
    let n_a = a.dims2()?.0;
    if n.max(nk) > MAP_GUARD {
        return Err(Error::Config(format!(
            "refusing to materialize a {n}x{nk} map (guard {MAP_GUARD}); subsample the tokens"
        )));
    }
    let exact_map = akern::exact_map(q, k, measure)?;
    let (m_e, m_d) = akern::anchored_maps(q, k, a, measure)?;
    let approx_map = kernels::matmul(&m_e, &m_d)?;

    let p = pearson(&exact_map, &approx_map)?;
    let degenerate = p.is_none();
    let rank_bound_ok = rank_check(&approx_map, n_a, 1e-6)?;
    let err = max_row_sum_err(&exact_map)?
        .max(max_row_sum_err(&approx_map)?)
        .max(max_row_sum_err(&m_e)?)
        .max(max_row_sum_err(&m_d)?);
    Ok(AttentionDiagnostics {
        exact_map,
        approx_map,
        pearson: p.unwrap_or(f64::NAN),
        degenerate,
        rank_bound_ok,
        max_row_sum_err: err,
    })
}

/// Closed-form multiply-add and memory accounting, equal by construction to
/// what the instrumented kernels count (see `tensor::flops` for the cost
/// model). Exact attention: similarity + softmax(N×N) + map·V. Anchored:
/// distill similarity + softmax(N_a×N) + Z + expand similarity +
/// softmax(N×N_a) + final product.
pub fn complexity_report(n: usize, n_a: usize, d: usize, measure: SimilarityMeasure) -> ComplexityReport {
    let sim = |m: usize, nn: usize| match measure {
        SimilarityMeasure::Dot => flops::sim_dot_flops(m, nn, d),
        SimilarityMeasure::NegativeSqEuclidean => flops::sim_euclid_flops(m, nn, d),
    };
    let flops_exact = sim(n, n) + flops::softmax_flops(n, n) + flops::matmul_flops(n, n, d);
    let flops_anchored = sim(n_a, n)
        + flops::softmax_flops(n_a, n)
        + flops::matmul_flops(n_a, n, d)
        + sim(n, n_a)
        + flops::softmax_flops(n, n_a)
        + flops::matmul_flops(n, n_a, d);
    ComplexityReport {
        n,
        n_a,
        d,
        flops_exact,
        flops_anchored,
        mem_exact: (n as u64) * (n as u64),
        mem_anchored: 2 * (n as u64) * (n_a as u64),
    }
}

/// Write a min-max normalized 8-bit PGM (P5) heat map. A constant map
/// renders as mid-gray (128).
pub fn dump_heatmap<T: Scalar>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = map.dims2()?;
    if !map.is_all_finite() {
        return Err(Error::Numeric("heatmap input must be finite".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.data() {
        let v = v.to_f64c();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        bytes.extend(
            map.data()
                .iter()
                .map(|&v| ((v.to_f64c() - lo) * scale).round().clamp(0.0, 255.0) as u8),
        );
    } else {
        bytes.extend(std::iter::repeat_n(128u8, h * w));
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

/// Header of the diagnostics CSV log.
pub const DIAG_CSV_HEADER: &str = "n,na,d,pearson,rank_ok,row_sum_err,flops_exact,flops_anchored";

/// One diagnostics CSV row matching [`DIAG_CSV_HEADER`].
pub fn diag_csv_row<T: Scalar>(diag: &AttentionDiagnostics<T>, rep: &ComplexityReport) -> String {
    format!(
        "{},{},{},{},{},{:e},{},{}",
        rep.n,
        rep.n_a,
        rep.d,
        if diag.degenerate {
            "nan".to_string()
        } else {
            format!("{:.6}", diag.pearson)
        },
        diag.rank_bound_ok,
        diag.max_row_sum_err,
        rep.flops_exact,
        rep.flops_anchored
    )
}
