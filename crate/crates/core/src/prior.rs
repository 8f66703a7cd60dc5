//! Forward simulation of the SIBP prior and the quantities that describe
//! its limiting behaviour: the logistic moments δ_p, the limiting mean and
//! variance of per-subject feature counts, the joint-possession function D(ρ)
//! and the expected number of common features.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryMatrix;
use crate::error::{Error, Result};
use crate::kernels::{build_correlation, KernelSpec, Location};
use crate::linalg;
use crate::numeric::{log_sigmoid, normal_expectation, sigmoid};

/// Hyperparameters of the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub mu: f64,
    pub tau: f64,
    pub kernel: KernelSpec,
    /// Truncation level K.
    pub truncation: usize,
    /// Rate of the exchangeable IBP the baseline corresponds to; informational.
    pub alpha: f64,
}

impl PriorParams {
    pub fn new(mu: f64, tau: f64, kernel: KernelSpec, truncation: usize) -> Result<Self> {
        let p = Self {
            mu,
            tau,
            kernel,
            truncation,
            alpha: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.mu.is_finite() {
            return Err(Error::invalid("mu must be finite"));
        }
        if self.truncation == 0 {
            return Err(Error::invalid("truncation K must be at least 1"));
        }
        self.kernel.validate()
    }
}

/// One draw of (U, B, Z) from the prior.
#[derive(Debug, Clone)]
pub struct PriorDraw {
    /// Latent fields, n×K.
    pub u: DMatrix<f64>,
    /// Stick products b_ik = Π_{j≤k} σ(u_ij), n×K.
    pub b: DMatrix<f64>,
    pub z: BinaryMatrix,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            estimate: mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// Samples n×K latent fields u_k ~ N(μ1, τ^{-1}Q) column by column.
fn sample_fields<R: Rng + ?Sized>(
    sampler: &FieldSampler,
    params: &PriorParams,
    rng: &mut R,
) -> DMatrix<f64> {
    let k = params.truncation;
    let sd = params.tau.sqrt().recip();
    match sampler {
        FieldSampler::Exchangeable(n) => {
            let mut u = DMatrix::zeros(*n, k);
            for col in 0..k {
                let v = params.mu + sd * rng.sample::<f64, _>(StandardNormal);
                u.column_mut(col).fill(v);
            }
            u
        }
        FieldSampler::Dense(chol) => {
            let n = chol.l_dirty().nrows();
            let mean = DVector::from_element(n, params.mu);
            let mut u = DMatrix::zeros(n, k);
            for col in 0..k {
                let draw = linalg::sample_from_covariance(chol, &DVector::zeros(n), rng);
                u.set_column(col, &(&mean + draw * sd));
            }
            u
        }
    }
}

enum FieldSampler {
    Exchangeable(usize),
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
}

impl FieldSampler {
    fn new(locations: &[Location], kernel: &KernelSpec) -> Result<Self> {
        if kernel.is_exchangeable() {
            if locations.is_empty() {
                return Err(Error::invalid("at least one location is required"));
            }
            Ok(FieldSampler::Exchangeable(locations.len()))
        } else {
            Ok(FieldSampler::Dense(build_correlation(locations, kernel)?.cholesky().clone()))
        }
    }
}

/// Row-wise stick products b_ik = Π_{j≤k} σ(u_ij).
pub fn stick_products(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = u.shape();
    let mut b = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut log_b = 0.0;
        for col in 0..k {
            log_b += log_sigmoid(u[(i, col)]);
            b[(i, col)] = log_b.exp();
        }
    }
    b
}

/// Draws (U, B, Z) from the SIBP prior at the given sites.
pub fn simulate_prior<R: Rng + ?Sized>(
    locations: &[Location],
    params: &PriorParams,
    rng: &mut R,
) -> Result<PriorDraw> {
    params.validate()?;
    let sampler = FieldSampler::new(locations, &params.kernel)?;
    Ok(draw_from(&sampler, params, rng))
}

fn draw_from<R: Rng + ?Sized>(sampler: &FieldSampler, params: &PriorParams, rng: &mut R) -> PriorDraw {
    let u = sample_fields(sampler, params, rng);
    let b = stick_products(&u);
    let (n, k) = b.shape();
    let mut z = BinaryMatrix::zeros(n, k);
    for i in 0..n {
        for col in 0..k {
            z.set(i, col, rng.random::<f64>() < b[(i, col)]);
        }
    }
    PriorDraw { u, b, z }
}

/// Repeated prior draws sharing one factorization of Q.
pub fn simulate_prior_many<R: Rng + ?Sized>(
    locations: &[Location],
    params: &PriorParams,
    replicates: usize,
    rng: &mut R,
) -> Result<Vec<PriorDraw>> {
    params.validate()?;
    let sampler = FieldSampler::new(locations, &params.kernel)?;
    Ok((0..replicates).map(|_| draw_from(&sampler, params, rng)).collect())
}

/// δ_p = E[σ(X)^p] for X ~ N(μ, 1/τ), by adaptive Gauss-Hermite quadrature.
pub fn delta_p(p: u32, mu: f64, tau: f64) -> Result<f64> {
    if !(p == 1 || p == 2) {
        return Err(Error::invalid(format!("p must be 1 or 2, got {p}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let pf = p as f64;
    Ok(normal_expectation(
        |x| (pf * log_sigmoid(x)).exp(),
        mu,
        tau.sqrt().recip(),
        1e-12,
    ))
}

/// Limiting (K → ∞) mean and variance of a subject's feature count.
pub fn limit_moments(mu: f64, tau: f64) -> Result<(f64, f64)> {
    let d1 = delta_p(1, mu, tau)?;
    let d2 = delta_p(2, mu, tau)?;
    let r1 = d1 / (1.0 - d1);
    let mean = r1;
    let var = r1 * (1.0 + 2.0 * d2 / (1.0 - d2) - r1);
    Ok((mean, var))
}

/// Monte Carlo estimate of D(ρ) = E[σ(u)σ(u')] for a bivariate normal pair
/// with means μ, variances 1/τ and correlation ρ.
pub fn joint_prob_d<R: Rng + ?Sized>(
    rho: f64,
    mu: f64,
    tau: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    Ok(joint_prob_d_grid(&[rho], mu, tau, n_mc, rng)?[0])
}

/// D(ρ) over a grid of correlations with common random numbers.
pub fn joint_prob_d_grid<R: Rng + ?Sized>(
    rhos: &[f64],
    mu: f64,
    tau: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<McEstimate>> {
    if n_mc < 100 {
        return Err(Error::invalid(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if let Some(r) = rhos.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::invalid(format!("rho must lie in (0, 1), got {r}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let sd = tau.sqrt().recip();
    let mut sums = vec![(0.0, 0.0); rhos.len()];
    for _ in 0..n_mc {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let s1 = sigmoid(mu + sd * e1);
        for (acc, &rho) in sums.iter_mut().zip(rhos) {
            let v = s1 * sigmoid(mu + sd * (rho * e1 + (1.0 - rho * rho).sqrt() * e2));
            acc.0 += v;
            acc.1 += v * v;
        }
    }
    let n = n_mc as f64;
    Ok(sums
        .into_iter()
        .map(|(s, ss)| {
            let mean = s / n;
            let var = (ss / n - mean * mean).max(0.0) * n / (n - 1.0);
            McEstimate {
                estimate: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}

/// Monte Carlo estimate of E[K*] = Σ_k {1 - E[Π_i (1 - b_ik)]}.
pub fn expected_common_features<R: Rng + ?Sized>(
    locations: &[Location],
    params: &PriorParams,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_mc < 100 {
        return Err(Error::invalid(format!("n_mc must be at least 100, got {n_mc}")));
    }
    params.validate()?;
    let sampler = FieldSampler::new(locations, &params.kernel)?;
    let samples: Vec<f64> = (0..n_mc)
        .map(|_| {
            let u = sample_fields(&sampler, params, rng);
            let (n, k) = u.shape();
            let mut log_b = vec![0.0; n];
            let mut total = 0.0;
            for col in 0..k {
                let mut log_none = 0.0;
                for (i, lb) in log_b.iter_mut().enumerate() {
                    *lb += log_sigmoid(u[(i, col)]);
                    log_none += crate::numeric::log1m_exp(*lb);
                }
                total += -log_none.exp_m1();
            }
            total
        })
        .collect();
    Ok(McEstimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_sites(n: usize) -> Vec<Location> {
        (0..n)
            .map(|i| Location::new(format!("s{i}"), (i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1))
            .collect()
    }

    /// δ_p by a wide trapezoid rule, independent of the Gauss-Hermite path.
    fn trapezoid_delta(p: i32, mu: f64, tau: f64) -> f64 {
        let sd = tau.sqrt().recip();
        let h = sd / 400.0;
        let lo = mu - 14.0 * sd;
        (0..=11_200)
            .map(|j| {
                let x = lo + j as f64 * h;
                let dens = (-(x - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                sigmoid(x).powi(p) * dens * h
            })
            .sum()
    }

    #[test]
    fn delta_one_is_half_at_zero_mean() {
        for tau in [0.1, 1.0, 25.0] {
            assert!((delta_p(1, 0.0, tau).unwrap() - 0.5).abs() < 1e-12);
        }
        assert!(delta_p(3, 0.0, 1.0).is_err());
    }

    #[test]
    fn delta_concentrated_limit() {
        let d = delta_p(1, 5.0, 100.0).unwrap();
        assert!((d - trapezoid_delta(1, 5.0, 100.0)).abs() < 1e-10);
        assert!((d - 0.993307).abs() < 1e-4);
    }

    #[test]
    fn delta_matches_trapezoid_oracle() {
        for &(mu, tau) in &[(0.0, 1.0), (-2.0, 0.5), (1.0, 4.0), (0.3, 0.05)] {
            for p in [1, 2] {
                let got = delta_p(p as u32, mu, tau).unwrap();
                let want = trapezoid_delta(p, mu, tau);
                assert!((got - want).abs() < 1e-10, "p={p} mu={mu} tau={tau}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn delta_two_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 2_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sigmoid(rng.sample::<f64, _>(StandardNormal)).powi(2))
            .collect();
        let mc = McEstimate::from_samples(&xs);
        let d2 = delta_p(2, 0.0, 1.0).unwrap();
        assert!((mc.estimate - d2).abs() < 3.0 * mc.std_error);
    }

    #[test]
    fn limit_moments_values() {
        let (m, _) = limit_moments(0.0, 1.0).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        let (m, v) = limit_moments(-10.0, 4.0).unwrap();
        assert!(m < 1e-3);
        assert!(v > 0.0);
    }

    #[test]
    fn stick_rows_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PriorParams::new(0.5, 1.0, KernelSpec::exponential(0.3).unwrap(), 12).unwrap();
        let draw = simulate_prior(&grid_sites(20), &params, &mut rng).unwrap();
        for i in 0..20 {
            for k in 1..12 {
                assert!(draw.b[(i, k)] < draw.b[(i, k - 1)]);
                assert!(draw.b[(i, k)] > 0.0 && draw.b[(i, k)] < 1.0);
            }
        }
    }

    #[test]
    fn infinite_precision_gives_halving_sticks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = PriorParams::new(0.0, 1e8, KernelSpec::exponential(0.5).unwrap(), 6).unwrap();
        let draw = simulate_prior(&grid_sites(5), &params, &mut rng).unwrap();
        for i in 0..5 {
            for k in 0..6 {
                assert!((draw.b[(i, k)] - 0.5f64.powi(k as i32 + 1)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn exchangeable_fields_are_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = PriorParams::new(0.0, 1.0, KernelSpec::Exchangeable, 8).unwrap();
        let draw = simulate_prior(&grid_sites(7), &params, &mut rng).unwrap();
        for k in 0..8 {
            let v = draw.u[(0, k)];
            assert!(draw.u.column(k).iter().all(|&x| x == v));
        }
    }

    #[test]
    fn single_site_mean_count_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = PriorParams::new(0.0, 1.0, KernelSpec::exponential(1.0).unwrap(), 100).unwrap();
        let site = [Location::new("a", 0.0, 0.0)];
        let counts: Vec<f64> = simulate_prior_many(&site, &params, 10_000, &mut rng)
            .unwrap()
            .iter()
            .map(|d| d.z.row(0).iter().filter(|&&z| z).count() as f64)
            .collect();
        let mc = McEstimate::from_samples(&counts);
        assert!((mc.estimate - 1.0).abs() < 3.0 * mc.std_error, "{mc:?}");
    }

    #[test]
    fn joint_prob_endpoints_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d1 = delta_p(1, 0.3, 2.0).unwrap();
        let d2 = delta_p(2, 0.3, 2.0).unwrap();
        let lo = joint_prob_d(1e-9, 0.3, 2.0, 400_000, &mut rng).unwrap();
        let hi = joint_prob_d(1.0 - 1e-12, 0.3, 2.0, 400_000, &mut rng).unwrap();
        assert!((lo.estimate - d1 * d1).abs() < 3.0 * lo.std_error);
        assert!((hi.estimate - d2).abs() < 3.0 * hi.std_error);
        assert!(joint_prob_d(0.5, 0.0, 1.0, 99, &mut rng).is_err());
        assert!(joint_prob_d(1.0, 0.0, 1.0, 1000, &mut rng).is_err());
    }

    #[test]
    fn common_features_deterministic_sticks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = PriorParams::new(0.0, 1e10, KernelSpec::exponential(1.0).unwrap(), 50).unwrap();
        let est = expected_common_features(&[Location::new("a", 0.0, 0.0)], &params, 100, &mut rng).unwrap();
        assert!((est.estimate - (1.0 - 0.5f64.powi(50))).abs() < 1e-3);
    }

    #[test]
    fn common_features_grow_with_sites() {
        let params = PriorParams::new(0.0, 1.0, KernelSpec::exponential(0.5).unwrap(), 40).unwrap();
        let small = expected_common_features(&grid_sites(10), &params, 2000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let large = expected_common_features(&grid_sites(100), &params, 2000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let se = (small.std_error.powi(2) + large.std_error.powi(2)).sqrt();
        assert!(large.estimate > small.estimate - 3.0 * se);
    }
}
