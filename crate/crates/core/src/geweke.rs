//! Joint-distribution ("getting it right") test of the Gibbs sampler.
//!
//! Marginal-conditional draws sample (τ, μ, ψ, U, Z, Θ) from the prior and
//! record test functions directly. Successive-conditional draws alternate
//! one Gibbs sweep with a fresh data set simulated from the current state.
//! Both sequences target the same joint distribution, so the means of any
//! test function must agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{ChainState, ObservationModel, Sampler, SamplerConfig};
use crate::kernels::Location;
use crate::prior::{simulate_prior, McEstimate, PriorParams};

/// Batch length for the successive-conditional standard errors.
pub const BATCH: usize = 100;

/// Draws (τ, μ, ψ, U, Z) from the prior.
pub fn prior_state<R: Rng + ?Sized>(locations: &[Location], config: &SamplerConfig, rng: &mut R) -> Result<ChainState> {
    let tau = config.tau_prior.sample(rng);
    let mu = Normal::new(config.mu_prior.mean, config.mu_prior.var.sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng);
    let kernel = if config.update_psi && !config.kernel.is_exchangeable() {
        let params = config.kernel.params();
        let draws: Vec<f64> = params.iter().zip(&config.kernel_priors).map(|(_, p)| p.sample(rng)).collect();
        config.kernel.with_params(&draws)?
    } else {
        config.kernel
    };
    let draw = simulate_prior(locations, &PriorParams::new(mu, tau, kernel, config.truncation)?, rng)?;
    let mut state = ChainState::new(locations.len(), config.truncation, tau, mu, kernel);
    state.u = draw.u;
    state.z = draw.z;
    Ok(state)
}

/// Test functions: μ, τ, ψ, all parameters, their squares, and every z_ik.
pub fn test_functions<M: ObservationModel>(state: &ChainState, model: &M) -> Vec<f64> {
    let mut cont = vec![state.mu, state.tau];
    cont.extend(state.kernel.params());
    cont.extend(model.params_flat());
    let mut out = cont.clone();
    out.extend(cont.iter().map(|v| v * v));
    out.extend(state.z.to_flat().iter().map(|&b| b as f64));
    out
}

/// Names matching `test_functions`, given the number of kernel and model parameters.
pub fn test_function_names(n_psi: usize, n_params: usize, n: usize, k: usize) -> Vec<String> {
    let mut cont = vec!["mu".to_string(), "tau".to_string()];
    cont.extend((0..n_psi).map(|j| format!("psi[{j}]")));
    cont.extend((0..n_params).map(|j| format!("param[{j}]")));
    let mut out = cont.clone();
    out.extend(cont.iter().map(|c| format!("{c}^2")));
    for i in 0..n {
        for kk in 0..k {
            out.push(format!("z[{i},{kk}]"));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GewekeComparison {
    pub name: String,
    pub marginal: McEstimate,
    pub successive: McEstimate,
}

impl GewekeComparison {
    /// Difference of means in units of its standard error.
    pub fn z_score(&self) -> f64 {
        let se = (self.marginal.std_error.powi(2) + self.successive.std_error.powi(2)).sqrt();
        let d = self.marginal.estimate - self.successive.estimate;
        if se == 0.0 {
            if d == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            d / se
        }
    }
}

fn iid_estimate(xs: &[f64]) -> McEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    McEstimate { estimate: mean, std_error: (var / n).sqrt() }
}

/// Mean with a batch-means standard error.
fn batch_estimate(xs: &[f64], batch: usize) -> McEstimate {
    let means: Vec<f64> = xs.chunks_exact(batch).map(|c| c.iter().sum::<f64>() / batch as f64).collect();
    let b = iid_estimate(&means);
    McEstimate { estimate: xs.iter().sum::<f64>() / xs.len() as f64, std_error: b.std_error }
}

/// Runs both simulators for `draws` iterations each. `config.burn_in` is
/// ignored: no adaptation happens and the chain starts from a prior draw.
pub fn geweke_test<M: ObservationModel + Clone>(
    model: &M,
    locations: &[Location],
    config: &SamplerConfig,
    draws: usize,
    seed: u64,
) -> Result<Vec<GewekeComparison>> {
    if draws < 2 * BATCH {
        return Err(Error::invalid(format!("need at least {} draws", 2 * BATCH)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marginal: Vec<Vec<f64>> = Vec::with_capacity(draws);
    let mut m = model.clone();
    for _ in 0..draws {
        let state = prior_state(locations, config, &mut rng)?;
        m.initialize(config.repulsion, &mut rng);
        marginal.push(test_functions(&state, &m));
    }

    let mut cfg = config.clone();
    cfg.burn_in = 0;
    cfg.seed = seed.wrapping_add(1);
    let state = prior_state(locations, &cfg, &mut rng)?;
    let mut m = model.clone();
    m.initialize(cfg.repulsion, &mut rng);
    m.simulate_observations(&state.z, &mut rng);
    let mut sampler = Sampler::from_state(m, locations.to_vec(), cfg, state)?;
    let mut successive: Vec<Vec<f64>> = Vec::with_capacity(draws);
    for _ in 0..draws {
        sampler.sweep()?;
        let z = sampler.state().z.clone();
        let (model, rng) = sampler.model_and_rng();
        model.simulate_observations(&z, rng);
        successive.push(test_functions(sampler.state(), sampler.model()));
    }

    let n_psi = if config.kernel.is_exchangeable() { 0 } else { config.kernel.params().len() };
    let names = test_function_names(n_psi, model.params_flat().len(), locations.len(), config.truncation);
    let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(j, name)| GewekeComparison {
            name,
            marginal: iid_estimate(&column(&marginal, j)),
            successive: batch_estimate(&column(&successive, j), BATCH),
        })
        .collect())
}
