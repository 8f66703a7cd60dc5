//! Spatial correlation functions, correlation-matrix assembly and GP
//! conditioning at new sites.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{self, BASE_JITTER};

/// A site with planar coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub coords: [f64; 2],
}

impl Location {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            id: id.into(),
            coords: [x, y],
        }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        let dx = self.coords[0] - other.coords[0];
        let dy = self.coords[1] - other.coords[1];
        dx.hypot(dy)
    }
}

/// Correlation family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    Exponential { range: f64 },
    Matern { range: f64, smoothness: f64 },
    /// Every site shares one latent value (the exchangeable IBP baseline).
    Exchangeable,
}

impl KernelSpec {
    pub fn exponential(range: f64) -> Result<Self> {
        let spec = KernelSpec::Exponential { range };
        spec.validate()?;
        Ok(spec)
    }

    pub fn matern(range: f64, smoothness: f64) -> Result<Self> {
        let spec = KernelSpec::Matern { range, smoothness };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Exponential { range } => {
                if !(range > 0.0 && range.is_finite()) {
                    return Err(Error::invalid(format!("range must be positive, got {range}")));
                }
            }
            KernelSpec::Matern { range, smoothness } => {
                if !(range > 0.0 && range.is_finite()) {
                    return Err(Error::invalid(format!("range must be positive, got {range}")));
                }
                if !(smoothness > 0.0 && smoothness.is_finite()) {
                    return Err(Error::invalid(format!(
                        "smoothness must be positive, got {smoothness}"
                    )));
                }
            }
            KernelSpec::Exchangeable => {}
        }
        Ok(())
    }

    pub fn is_exchangeable(&self) -> bool {
        matches!(self, KernelSpec::Exchangeable)
    }

    /// Free parameters, in the order used by the random-walk update.
    pub fn params(&self) -> Vec<f64> {
        match *self {
            KernelSpec::Exponential { range } => vec![range],
            KernelSpec::Matern { range, smoothness } => vec![range, smoothness],
            KernelSpec::Exchangeable => Vec::new(),
        }
    }

    /// Same family with new parameter values (same order as [`Self::params`]).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let spec = match (*self, params) {
            (KernelSpec::Exponential { .. }, [range]) => KernelSpec::Exponential { range: *range },
            (KernelSpec::Matern { .. }, [range, smoothness]) => KernelSpec::Matern {
                range: *range,
                smoothness: *smoothness,
            },
            (KernelSpec::Exchangeable, []) => KernelSpec::Exchangeable,
            _ => {
                return Err(Error::invalid(format!(
                    "{} parameters do not fit kernel {self:?}",
                    params.len()
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Correlation at distance `d`.
    pub fn correlation(&self, d: f64) -> f64 {
        debug_assert!(d >= 0.0);
        match *self {
            KernelSpec::Exponential { range } => (-d / range).exp(),
            KernelSpec::Matern { range, smoothness } => matern(d / range, smoothness),
            KernelSpec::Exchangeable => 1.0,
        }
    }
}

/// Matérn correlation {2^{κ-1}Γ(κ)}^{-1} x^κ K_κ(x), equal to 1 at x = 0.
fn matern(x: f64, kappa: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_k = ln_bessel_k(kappa, x);
    let log_rho = kappa * x.ln() + log_k - (kappa - 1.0) * std::f64::consts::LN_2 - ln_gamma(kappa);
    log_rho.exp().min(1.0)
}

/// log K_ν(x) for x > 0 by the trapezoid rule on
/// K_ν(x) = ∫_0^∞ exp(-x cosh t) cosh(ν t) dt.
///
/// The integrand is entire and decays doubly exponentially, so the trapezoid
/// rule converges geometrically in the step size.
pub(crate) fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    // the integrand's width in t shrinks like x^{-1/2}
    let step = 0.05f64.min(0.25 / x.sqrt());
    let nu = nu.abs();
    // log of integrand, with cosh(νt) = e^{νt}(1 + e^{-2νt})/2
    let log_f = |t: f64| -x * t.cosh() + nu * t + (0.5 * (1.0 + (-2.0 * nu * t).exp())).ln();
    // peak of the integrand sits at sinh t = ν/x
    let t_peak = (nu / x).asinh();
    let peak = log_f(t_peak);
    let mut terms = Vec::with_capacity(512);
    let mut t = 0.0;
    loop {
        let v = log_f(t);
        terms.push(if t == 0.0 { v + 0.5f64.ln() } else { v });
        if t > t_peak && v < peak - 60.0 {
            break;
        }
        t += step;
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln() + step.ln()
}

/// A dense correlation matrix Q(ψ) with its cached factor.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    spec: KernelSpec,
    locations: Vec<Location>,
    q: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CorrelationMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    /// Jitter added to the diagonal of the factorized matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    /// Q^{-1} v
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// v^T Q^{-1} v
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("factor has positive diagonal");
        w.norm_squared()
    }

    pub fn log_det(&self) -> f64 {
        linalg::log_det(&self.chol)
    }

    /// Q^{-1} as a dense matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Cross-correlation vector C(s) between a new site and the stored sites.
    pub fn cross_correlation(&self, site: &Location) -> DVector<f64> {
        DVector::from_iterator(
            self.locations.len(),
            self.locations
                .iter()
                .map(|l| self.spec.correlation(site.distance(l))),
        )
    }

    /// Conditional mean and variance of u_k(s) given u_k at the stored sites.
    pub fn gp_conditional(
        &self,
        site: &Location,
        u: &DVector<f64>,
        mu: f64,
        tau: f64,
    ) -> Result<(f64, f64)> {
        if u.len() != self.len() {
            return Err(Error::Shape(format!(
                "latent vector has length {}, expected {}",
                u.len(),
                self.len()
            )));
        }
        if self.spec.is_exchangeable() {
            return Ok((u[0], 0.0));
        }
        let c = self.cross_correlation(site);
        let centered = u.add_scalar(-mu);
        let mean = mu + c.dot(&self.solve(&centered));
        let explained = self.quad_form(&c);
        let var = ((1.0 - explained) / tau).max(0.0);
        Ok((mean, var))
    }
}

/// Assembles Q with Q[i][j] = ρ(‖s_i - s_j‖) and factorizes Q + jitter·I.
pub fn build_correlation(locations: &[Location], spec: &KernelSpec) -> Result<CorrelationMatrix> {
    spec.validate()?;
    if locations.is_empty() {
        return Err(Error::invalid("at least one location is required"));
    }
    let n = locations.len();
    let mut q = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let r = spec.correlation(locations[i].distance(&locations[j]));
            q[(i, j)] = r;
            q[(j, i)] = r;
        }
    }
    let (chol, jitter) = linalg::cholesky_with_jitter(&q, BASE_JITTER)?;
    Ok(CorrelationMatrix {
        spec: *spec,
        locations: locations.to_vec(),
        q,
        chol,
        jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sites(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Location::new(format!("s{i}"), rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn exponential_values() {
        let k = KernelSpec::exponential(0.5).unwrap();
        assert_eq!(k.correlation(0.0), 1.0);
        assert!((k.correlation(0.5) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn matern_half_is_exponential() {
        let e = KernelSpec::exponential(0.3).unwrap();
        let m = KernelSpec::matern(0.3, 0.5).unwrap();
        assert!((e.correlation(0.3) - m.correlation(0.3)).abs() < 1e-10);
        for i in 0..=400 {
            let d = i as f64 * 0.01;
            assert!((e.correlation(d) - m.correlation(d)).abs() < 1e-10, "d = {d}");
        }
    }

    #[test]
    fn bessel_k_closed_forms() {
        // K_{3/2}(x) = sqrt(pi/(2x)) e^{-x} (1 + 1/x)
        for &x in &[1e-3, 0.1, 1.0, 5.0, 30.0] {
            let exact = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 1.0 / x);
            let got = ln_bessel_k(1.5, x).exp();
            assert!(((got - exact) / exact).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn matern_limits() {
        let m = KernelSpec::matern(1.0, 2.5).unwrap();
        assert_eq!(m.correlation(0.0), 1.0);
        assert!((m.correlation(1e-9) - 1.0).abs() < 1e-8);
        assert!(m.correlation(40.0) < 1e-12);
    }

    #[test]
    fn correlation_is_nonincreasing() {
        for spec in [
            KernelSpec::exponential(0.2).unwrap(),
            KernelSpec::matern(0.4, 1.5).unwrap(),
            KernelSpec::matern(0.1, 0.3).unwrap(),
        ] {
            let mut prev = 1.0;
            for i in 0..=500 {
                let r = spec.correlation(i as f64 * 0.01);
                assert!(r <= prev + 1e-15 && r > 0.0 || r == 0.0);
                prev = r;
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::exponential(0.0).is_err());
        assert!(KernelSpec::exponential(-1.0).is_err());
        assert!(KernelSpec::matern(1.0, 0.0).is_err());
        assert!(KernelSpec::Exponential { range: 1.0 }.with_params(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_site_matrix() {
        let q = build_correlation(&[Location::new("a", 0.0, 0.0)], &KernelSpec::exponential(1.0).unwrap())
            .unwrap();
        assert_eq!(q.matrix().as_slice(), &[1.0]);
    }

    #[test]
    fn two_sites_at_range() {
        let sites = [Location::new("a", 0.0, 0.0), Location::new("b", 0.6, 0.8)];
        let q = build_correlation(&sites, &KernelSpec::exponential(1.0).unwrap()).unwrap();
        assert!((q.matrix()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn matrix_is_symmetric_unit_diagonal_and_pd() {
        let sites = random_sites(5, 7);
        let q = build_correlation(&sites, &KernelSpec::matern(0.5, 1.5).unwrap()).unwrap();
        let m = q.matrix();
        for i in 0..5 {
            assert_eq!(m[(i, i)], 1.0);
            for j in 0..5 {
                assert_eq!(m[(i, j)], m[(j, i)]);
                assert!((0.0..=1.0).contains(&m[(i, j)]));
            }
        }
        // eigenvalue oracle, independent of the factor
        let eig = m.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        assert!(q.cholesky().l().diagonal().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn duplicate_sites_are_jittered() {
        let sites = [Location::new("a", 0.0, 0.0), Location::new("b", 0.0, 0.0)];
        let q = build_correlation(&sites, &KernelSpec::exponential(1.0).unwrap()).unwrap();
        assert!(q.jitter() >= BASE_JITTER);
    }

    #[test]
    fn conditional_interpolates_and_reverts() {
        let sites = random_sites(6, 3);
        let q = build_correlation(&sites, &KernelSpec::exponential(0.3).unwrap()).unwrap();
        let u = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.1, -0.4, 0.9]);
        let (mean, var) = q.gp_conditional(&sites[0], &u, 0.5, 2.0).unwrap();
        assert!((mean - 0.3).abs() < 1e-6);
        assert!(var < 1e-7);

        let far = Location::new("far", 1e4, 1e4);
        let (mean, var) = q.gp_conditional(&far, &u, 0.5, 2.0).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        assert!((var - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conditional_matches_bivariate_formula() {
        // n = 1 observed site, plus the query: direct bivariate conditioning.
        let sites = [Location::new("a", 0.0, 0.0), Location::new("b", 0.4, 0.0)];
        let spec = KernelSpec::exponential(0.5).unwrap();
        let q = build_correlation(&sites, &spec).unwrap();
        let query = Location::new("q", 0.1, 0.3);
        let u = DVector::from_vec(vec![1.0, -0.5]);
        let (mu, tau) = (0.2, 1.5);
        let (mean, var) = q.gp_conditional(&query, &u, mu, tau).unwrap();

        let r = spec.correlation(0.4);
        let c1 = spec.correlation(query.distance(&sites[0]));
        let c2 = spec.correlation(query.distance(&sites[1]));
        let det = 1.0 - r * r;
        // inverse of [[1, r], [r, 1]] is [[1, -r], [-r, 1]] / det
        let w1 = (c1 - r * c2) / det;
        let w2 = (c2 - r * c1) / det;
        let exp_mean = mu + w1 * (u[0] - mu) + w2 * (u[1] - mu);
        let exp_var = (1.0 - (w1 * c1 + w2 * c2)) / tau;
        assert!((mean - exp_mean).abs() < 1e-7);
        assert!((var - exp_var).abs() < 1e-7);
    }

    #[test]
    fn conditional_variance_bounded() {
        let sites = random_sites(10, 11);
        let q = build_correlation(&sites, &KernelSpec::matern(0.3, 1.0).unwrap()).unwrap();
        let u = DVector::from_element(10, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = Location::new("q", rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0));
            let (_, var) = q.gp_conditional(&s, &u, 0.0, 4.0).unwrap();
            assert!((0.0..=0.25).contains(&var));
        }
    }
}
