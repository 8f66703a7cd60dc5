//! Dense Cholesky helpers shared by the kernel, sampler and NNGP code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Diagonal jitter always added to correlation matrices before factorization.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// Factorizes `m + jitter * I`, starting at `start` and growing the jitter
/// tenfold (from `BASE_JITTER` when `start` is zero) until `MAX_JITTER`.
///
/// Returns the factor together with the jitter that succeeded.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    start: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = start;
    loop {
        let mut work = m.clone();
        if jitter > 0.0 {
            for i in 0..work.nrows() {
                work[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(work) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((chol, jitter));
            }
        }
        jitter = if jitter == 0.0 { BASE_JITTER } else { jitter * 10.0 };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Factorization(format!(
                "{}x{} matrix not positive definite up to jitter {MAX_JITTER:e}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
}

/// Log-determinant from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Draws from N(A^{-1} b, A^{-1}) given the Cholesky factor of the precision A.
pub fn sample_from_precision<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    b: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(b);
    let eps = DVector::from_iterator(b.len(), (0..b.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise = chol
        .l_dirty()
        .tr_solve_lower_triangular(&eps)
        .expect("triangular factor has a positive diagonal");
    mean + noise
}

/// Draws from N(mean, L L^T) given the lower Cholesky factor L of the covariance.
pub fn sample_from_covariance<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    mean: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let eps = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let l = chol.l_dirty();
    let mut out = mean.clone();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l[(i, j)] * eps[j];
        }
        out[i] += acc;
    }
    out
}
