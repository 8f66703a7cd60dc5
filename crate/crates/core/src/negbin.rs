//! Negative-binomial count factor model:
//! x_im ~ NB(λ_im, ν_m), log λ_im = η_m + Σ_k z_ik θ_km,
//! with E[x] = λ and Var[x] = λ + λ²/ν.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::binary::BinaryMatrix;
use crate::error::{Error, Result};
use crate::gibbs::{AdaptiveStep, GammaPrior, ObservationModel};
use crate::linalg;
use crate::pg;
use crate::repulsion::{acceptance_probability, PairDistances};

/// Default initial log-scale step of the dispersion random walk.
pub const DEFAULT_NU_STEP: f64 = 0.5;

/// n × M nonnegative counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountData {
    n: usize,
    m: usize,
    values: Vec<u64>,
}

impl CountData {
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("rows have different numbers of features".into()));
        }
        Ok(Self { n: rows.len(), m, values: rows.iter().flatten().copied().collect() })
    }

    /// A data set with `m` features and no subjects.
    pub fn empty(m: usize) -> Self {
        Self { n: 0, m, values: Vec::new() }
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, m: usize) -> u64 {
        self.values[i * self.m + m]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }
}

/// log NB(x | λ = e^{log_lambda}, ν).
pub fn nb_log_pmf(x: u64, log_lambda: f64, nu: f64) -> f64 {
    let xf = x as f64;
    nb_constant(x, nu) + nb_kernel(xf, log_lambda, nu)
}

/// Terms of the log pmf that do not involve λ.
fn nb_constant(x: u64, nu: f64) -> f64 {
    let xf = x as f64;
    ln_gamma(nu + xf) - ln_gamma(nu) - ln_gamma(xf + 1.0)
}

/// ν log(ν/(ν+λ)) + x log(λ/(ν+λ)), evaluated in log space.
#[inline]
fn nb_kernel(x: f64, log_lambda: f64, nu: f64) -> f64 {
    let log_nu = nu.ln();
    let (hi, lo) = if log_nu > log_lambda { (log_nu, log_lambda) } else { (log_lambda, log_nu) };
    let log_sum = hi + (lo - hi).exp().ln_1p();
    let kernel = nu * (log_nu - log_sum);
    if x > 0.0 {
        kernel + x * (log_lambda - log_sum)
    } else {
        kernel
    }
}

/// (η_m, θ_km) and dispersions ν_m.
#[derive(Debug, Clone, PartialEq)]
pub struct NegBinParams {
    /// M × (K+1): row m is Θ_m = (η_m, θ_1m, …, θ_Km).
    pub coef: DMatrix<f64>,
    pub nu: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl NegBinParams {
    pub fn new(m: usize, k: usize) -> Self {
        Self { coef: DMatrix::zeros(m, k + 1), nu: vec![1.0; m], gammas: vec![1.0; k + 1] }
    }

    pub fn n_factors(&self) -> usize {
        self.gammas.len() - 1
    }

    #[inline]
    pub fn log_lambda(&self, z_row: &[bool], m: usize) -> f64 {
        let mut s = self.coef[(m, 0)];
        for (k, &on) in z_row.iter().enumerate() {
            if on {
                s += self.coef[(m, k + 1)];
            }
        }
        s
    }
}

/// Σ_m log NB(x_im | λ_im, ν_m).
pub fn nb_loglik(x_row: &[u64], z_row: &[bool], params: &NegBinParams) -> f64 {
    x_row
        .iter()
        .enumerate()
        .map(|(m, &x)| nb_log_pmf(x, params.log_lambda(z_row, m), params.nu[m]))
        .sum()
}

#[derive(Debug, Clone)]
pub struct NegBinModel {
    data: CountData,
    params: NegBinParams,
    nu_prior: GammaPrior,
    nu_steps: Vec<AdaptiveStep>,
    /// λ-free part of every cell's log pmf, refreshed when ν_m moves.
    constants: Vec<f64>,
}

impl NegBinModel {
    pub fn new(data: CountData, k: usize, nu_prior: GammaPrior) -> Self {
        let params = NegBinParams::new(data.m, k);
        let nu_steps = vec![AdaptiveStep::new(DEFAULT_NU_STEP); data.m];
        let mut model = Self { constants: vec![0.0; data.values.len()], data, params, nu_prior, nu_steps };
        for m in 0..model.data.m {
            model.refresh_constants(m);
        }
        model
    }

    pub fn with_precisions(mut self, gammas: Vec<f64>) -> Result<Self> {
        if gammas.len() != self.params.gammas.len() {
            return Err(Error::Shape(format!("need {} precisions", self.params.gammas.len())));
        }
        if gammas.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::invalid("prior precisions must be positive"));
        }
        self.params.gammas = gammas;
        Ok(self)
    }

    pub fn with_nu_step(mut self, step: f64) -> Self {
        self.nu_steps = vec![AdaptiveStep::new(step); self.data.m];
        self
    }

    pub fn data(&self) -> &CountData {
        &self.data
    }

    pub fn params(&self) -> &NegBinParams {
        &self.params
    }

    pub fn set_params(&mut self, params: NegBinParams) -> Result<()> {
        if params.coef.shape() != self.params.coef.shape() || params.nu.len() != self.params.nu.len() {
            return Err(Error::Shape("parameter shapes differ from the data".into()));
        }
        if params.nu.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("dispersions must be positive"));
        }
        self.params = params;
        for m in 0..self.data.m {
            self.refresh_constants(m);
        }
        Ok(())
    }

    pub fn nu_acceptance(&self, m: usize) -> f64 {
        self.nu_steps[m].acceptance_rate()
    }

    pub fn nu_step(&self, m: usize) -> &AdaptiveStep {
        &self.nu_steps[m]
    }

    fn refresh_constants(&mut self, m: usize) {
        let nu = self.params.nu[m];
        for i in 0..self.data.n {
            self.constants[i * self.data.m + m] = nb_constant(self.data.get(i, m), nu);
        }
    }

    fn pair_distances(&self) -> PairDistances {
        let k = self.params.n_factors();
        PairDistances::new(k, self.data.m, |a, c| self.params.coef[(c, a + 1)])
    }

    /// Exact draw of Θ_m from its augmented conditional, without repulsion.
    pub fn draw_theta_m<R: Rng + ?Sized>(&self, m: usize, active: &[Vec<usize>], rng: &mut R) -> Result<DVector<f64>> {
        let d = self.params.n_factors() + 1;
        let nu = self.params.nu[m];
        let log_nu = nu.ln();
        let mut a = DMatrix::from_diagonal(&DVector::from_column_slice(&self.params.gammas));
        let mut b = DVector::zeros(d);
        for (i, act) in active.iter().enumerate() {
            let x = self.data.get(i, m) as f64;
            let eta: f64 = act.iter().map(|&p| self.params.coef[(m, p)]).sum();
            let omega = pg::draw(x + nu, eta - log_nu, rng);
            let r = 0.5 * (x - nu) + omega * log_nu;
            for &p in act {
                b[p] += r;
                for &q in act {
                    a[(p, q)] += omega;
                }
            }
        }
        let (chol, _) = linalg::cholesky_with_jitter(&a, 0.0)?;
        let draw = linalg::sample_from_precision(&chol, &b, rng);
        if draw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite draw for feature {m}")));
        }
        Ok(draw)
    }

    /// Random-walk Metropolis step for ν_m on the log scale with a given increment.
    pub fn update_nu_with<R: Rng + ?Sized>(&mut self, m: usize, z: &BinaryMatrix, increment: f64, rng: &mut R) -> bool {
        let nu = self.params.nu[m];
        let proposal = nu * increment.exp();
        if !(proposal > 0.0 && proposal.is_finite()) {
            return false;
        }
        let mut log_ratio = self.nu_prior.ln_pdf(proposal) + proposal.ln() - self.nu_prior.ln_pdf(nu) - nu.ln();
        for i in 0..self.data.n {
            let x = self.data.get(i, m);
            let ll = self.params.log_lambda(z.row(i), m);
            log_ratio += nb_log_pmf(x, ll, proposal) - nb_log_pmf(x, ll, nu);
        }
        let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
        if accept {
            self.params.nu[m] = proposal;
            self.refresh_constants(m);
        }
        accept
    }

    pub fn update_nu<R: Rng + ?Sized>(&mut self, m: usize, z: &BinaryMatrix, rng: &mut R) -> bool {
        let eps = self.nu_steps[m].step() * rng.sample::<f64, _>(StandardNormal);
        let accepted = self.update_nu_with(m, z, eps, rng);
        self.nu_steps[m].record(accepted);
        accepted
    }
}

fn active_columns(z: &BinaryMatrix) -> Vec<Vec<usize>> {
    (0..z.nrows())
        .map(|i| {
            std::iter::once(0)
                .chain(z.row(i).iter().enumerate().filter(|(_, &on)| on).map(|(k, _)| k + 1))
                .collect()
        })
        .collect()
}

/// Draws one NB(λ, ν) count as a gamma-Poisson mixture.
pub fn sample_nb<R: Rng + ?Sized>(lambda: f64, nu: f64, rng: &mut R) -> u64 {
    let rate = Gamma::new(nu, lambda / nu).expect("positive shape and scale").sample(rng);
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

impl ObservationModel for NegBinModel {
    fn n_subjects(&self) -> usize {
        self.data.n
    }

    fn n_factors(&self) -> usize {
        self.params.n_factors()
    }

    fn loglik_row(&self, i: usize, z_row: &[bool]) -> f64 {
        let base = i * self.data.m;
        (0..self.data.m)
            .map(|m| {
                self.constants[base + m]
                    + nb_kernel(self.data.values[base + m] as f64, self.params.log_lambda(z_row, m), self.params.nu[m])
            })
            .sum()
    }

    fn update_params<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, repulsion: f64, rng: &mut R) -> Result<()> {
        let active = active_columns(z);
        let mut pairs = self.pair_distances();
        let k = self.params.n_factors();
        let mut old = vec![0.0; k];
        let mut new = vec![0.0; k];
        for m in 0..self.data.m {
            let draw = self.draw_theta_m(m, &active, rng)?;
            for j in 0..k {
                old[j] = self.params.coef[(m, j + 1)];
                new[j] = draw[j + 1];
            }
            let p = acceptance_probability(pairs.g_after(&old, &new, repulsion), pairs.g(repulsion));
            if p >= 1.0 || rng.random::<f64>() < p {
                pairs.commit(&old, &new);
                self.params.coef.set_row(m, &draw.transpose());
            }
        }
        Ok(())
    }

    fn update_extra<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, rng: &mut R) -> Result<()> {
        for m in 0..self.data.m {
            self.update_nu(m, z, rng);
        }
        Ok(())
    }

    fn adapt(&mut self) {
        self.nu_steps.iter_mut().for_each(AdaptiveStep::adapt);
    }

    fn freeze(&mut self) {
        self.nu_steps.iter_mut().for_each(AdaptiveStep::freeze);
    }

    fn initialize<R: Rng + ?Sized>(&mut self, repulsion: f64, rng: &mut R) {
        for _ in 0..1000 {
            for m in 0..self.data.m {
                for j in 0..=self.params.n_factors() {
                    let sd = self.params.gammas[j].sqrt().recip();
                    self.params.coef[(m, j)] = sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if rng.random::<f64>() < self.pair_distances().g(repulsion) {
                break;
            }
        }
        for m in 0..self.data.m {
            self.params.nu[m] = self.nu_prior.sample(rng).max(1e-8);
            self.refresh_constants(m);
        }
    }

    fn simulate_observations<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, rng: &mut R) {
        for i in 0..self.data.n {
            for m in 0..self.data.m {
                let lambda = self.params.log_lambda(z.row(i), m).exp();
                self.data.values[i * self.data.m + m] = sample_nb(lambda, self.params.nu[m], rng);
            }
        }
        for m in 0..self.data.m {
            self.refresh_constants(m);
        }
    }

    /// Per feature: η_m, θ_1m..θ_Km, ν_m.
    fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.m * (self.params.n_factors() + 2));
        for m in 0..self.data.m {
            out.extend(self.params.coef.row(m).iter());
            out.push(self.params.nu[m]);
        }
        out
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let width = self.params.n_factors() + 2;
        if flat.len() != self.data.m * width {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.data.m * width, flat.len())));
        }
        for (m, chunk) in flat.chunks(width).enumerate() {
            if !(chunk[width - 1] > 0.0) {
                return Err(Error::invalid("dispersions must be positive"));
            }
            for j in 0..width - 1 {
                self.params.coef[(m, j)] = chunk[j];
            }
            self.params.nu[m] = chunk[width - 1];
            self.refresh_constants(m);
        }
        Ok(())
    }

    fn factor_block(&self, k: usize) -> Vec<f64> {
        self.params.coef.column(k + 1).iter().copied().collect()
    }

    fn log_prior_factor(&self, k: usize) -> f64 {
        let g = self.params.gammas[k + 1];
        self.factor_block(k)
            .iter()
            .map(|&v| 0.5 * (g / (2.0 * std::f64::consts::PI)).ln() - 0.5 * g * v * v)
            .sum()
    }

    fn predictive_mean(&self, z_row: &[bool]) -> Vec<f64> {
        (0..self.data.m).map(|m| self.params.log_lambda(z_row, m).exp()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn poisson_log_pmf(x: u64, lambda: f64) -> f64 {
        x as f64 * lambda.ln() - lambda - ln_gamma(x as f64 + 1.0)
    }

    #[test]
    fn zero_count_term() {
        let (ll, nu) = (0.7f64, 2.5);
        let lambda = ll.exp();
        assert!((nb_log_pmf(0, ll, nu) - nu * (nu / (nu + lambda)).ln()).abs() < 1e-12);
    }

    #[test]
    fn poisson_limit() {
        for &(x, lambda) in &[(0u64, 1.0f64), (3, 2.5), (12, 9.0)] {
            let nb = nb_log_pmf(x, lambda.ln(), 1e6);
            assert!((nb - poisson_log_pmf(x, lambda)).abs() < 1e-3);
        }
    }

    #[test]
    fn direct_formula() {
        let (x, lambda, nu) = (4u64, 3.2f64, 1.7f64);
        let expected = ln_gamma(nu + 4.0) - ln_gamma(nu) - ln_gamma(5.0)
            + nu * (nu / (nu + lambda)).ln()
            + 4.0 * (lambda / (nu + lambda)).ln();
        assert!((nb_log_pmf(x, lambda.ln(), nu) - expected).abs() < 1e-12);
    }

    #[test]
    fn simulated_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (lambda, nu) = (4.0, 2.0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_nb(lambda, nu, &mut rng) as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let target_var = lambda + lambda * lambda / nu;
        assert!((mean - lambda).abs() < 3.0 * (target_var / n as f64).sqrt());
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        assert!((var - target_var).abs() < 3.0 * ((m4 - var * var) / n as f64).sqrt());
    }

    #[test]
    fn cached_loglik_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<u64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(0..20)).collect()).collect();
        let data = CountData::from_rows(&rows).unwrap();
        let mut model = NegBinModel::new(data, 2, GammaPrior { shape: 2.0, rate: 1.0 });
        model.initialize(1e-3, &mut rng);
        let z = [true, false];
        for i in 0..5 {
            let direct = nb_loglik(&rows[i], &z, model.params());
            assert!((model.loglik_row(i, &z) - direct).abs() < 1e-10);
        }
        let zm = BinaryMatrix::from_rows(&vec![vec![true, false]; 5]);
        for _ in 0..10 {
            model.update_extra(&zm, &mut rng).unwrap();
        }
        for i in 0..5 {
            assert!((model.loglik_row(i, &z) - nb_loglik(&rows[i], &z, model.params())).abs() < 1e-10);
        }
    }

    #[test]
    fn no_data_recovers_coefficient_prior() {
        let mut model = NegBinModel::new(CountData::empty(1), 1, GammaPrior { shape: 2.0, rate: 1.0 })
            .with_precisions(vec![2.0, 0.5])
            .unwrap();
        let z = BinaryMatrix::zeros(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut ss = [0.0; 2];
        for _ in 0..n {
            model.update_params(&z, 1e-3, &mut rng).unwrap();
            for j in 0..2 {
                ss[j] += model.params().coef[(0, j)].powi(2);
            }
        }
        assert!((ss[0] / n as f64 * 2.0 - 1.0).abs() < 0.05);
        assert!((ss[1] / n as f64 * 0.5 - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_increment_accepted_and_nu_stays_positive() {
        let rows = vec![vec![3u64], vec![0], vec![7]];
        let mut model = NegBinModel::new(CountData::from_rows(&rows).unwrap(), 1, GammaPrior { shape: 2.0, rate: 1.0 });
        let z = BinaryMatrix::zeros(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            assert!(model.update_nu_with(0, &z, 0.0, &mut rng));
        }
        for _ in 0..500 {
            model.update_nu(0, &z, &mut rng);
            assert!(model.params().nu[0] > 0.0);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let rows = vec![vec![1u64, 2], vec![0, 5]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = NegBinModel::new(CountData::from_rows(&rows).unwrap(), 2, GammaPrior { shape: 2.0, rate: 1.0 });
        model.initialize(1e-3, &mut rng);
        let flat = model.params_flat();
        assert_eq!(flat.len(), 2 * 4);
        let mut other = NegBinModel::new(CountData::from_rows(&rows).unwrap(), 2, GammaPrior { shape: 2.0, rate: 1.0 });
        other.set_params_flat(&flat).unwrap();
        assert_eq!(other.params(), model.params());
        assert!((other.loglik_row(1, &[true, true]) - model.loglik_row(1, &[true, true])).abs() < 1e-12);
    }
}
