//! Singular values via one-sided Jacobi: repeatedly orthogonalize column
//! pairs in a fixed sweep order until off-diagonal mass is negligible; the
//! singular values are the final column norms. Deterministic and accurate
//! enough for rank checks on attention maps.

use crate::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Singular values of a rank-2 tensor, descending.
pub fn singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    let (rows, cols) = m.dims2()?;
    // work in f64 regardless of input dtype
    let mut a: Vec<f64> = m.data().iter().map(|v| v.to_f64c()).collect();
    let n = cols;
    let eps = 1e-14_f64;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let x = a[i * n + p];
                    let y = a[i * n + q];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(f64::MIN_POSITIVE));
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = a[i * n + p];
                    let y = a[i * n + q];
                    a[i * n + p] = c * x - s * y;
                    a[i * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-12 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..rows {
                s += a[i * n + j] * a[i * n + j];
            }
            s.sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(sv)
}
