//! Blocked Gibbs sampler for latent factor models with an SIBP prior.
//!
//! One sweep updates, in order: the latent columns u_1..u_K (binomial
//! expansion plus Pólya-gamma augmentation), every binary row z_i, the
//! observation-model parameters (with the repulsive-prior correction), τ, μ,
//! the kernel parameters ψ, and finally any model-specific steps.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binary::BinaryMatrix;
use crate::chain::{ChainOutput, Draw};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, Location};
use crate::latent::{LatentBackend, LatentField};
use crate::numeric::{log1m_exp, log_sigmoid, sigmoid};
use crate::pg;
use crate::repulsion::DEFAULT_DELTA;

/// Joint z-row enumeration is refused above this many factors.
pub const JOINT_MAX_FACTORS: usize = 25;
/// `ZUpdateMode::Auto` switches to coordinate updates from this K on.
pub const AUTO_COORDINATE_FROM: usize = 8;
/// Iterations per adaptation window during burn-in.
pub const ADAPT_WINDOW: usize = 50;

/// Gamma(shape, rate) prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = Self { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite()) {
            return Err(Error::invalid(format!("gamma prior needs positive shape and rate, got {self:?}")));
        }
        Ok(())
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - statrs::function::gamma::ln_gamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, 1.0 / self.rate).expect("validated").sample(rng)
    }
}

/// Normal(mean, variance) prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZUpdateMode {
    /// Joint below [`AUTO_COORDINATE_FROM`] factors, coordinate otherwise.
    #[default]
    Auto,
    Joint,
    Coordinate,
}

impl ZUpdateMode {
    fn resolve(self, k: usize) -> ZUpdateMode {
        match self {
            ZUpdateMode::Auto if k >= AUTO_COORDINATE_FROM => ZUpdateMode::Coordinate,
            ZUpdateMode::Auto => ZUpdateMode::Joint,
            m => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Truncation level K.
    pub truncation: usize,
    pub burn_in: usize,
    pub keep: usize,
    pub thin: usize,
    pub tau_prior: GammaPrior,
    pub mu_prior: NormalPrior,
    /// Kernel family and starting value of ψ.
    pub kernel: KernelSpec,
    /// One prior per kernel parameter, in `KernelSpec::params` order.
    pub kernel_priors: Vec<GammaPrior>,
    pub update_psi: bool,
    /// Initial log-scale random-walk step for ψ.
    pub psi_step: f64,
    /// Repulsion threshold δ.
    pub repulsion: f64,
    pub z_update: ZUpdateMode,
    pub latent: LatentBackend,
    pub seed: u64,
    /// Persist U with every kept draw (needed for prediction).
    pub store_u: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            truncation: 10,
            burn_in: 1000,
            keep: 1000,
            thin: 1,
            tau_prior: GammaPrior { shape: 1.0, rate: 1.0 },
            mu_prior: NormalPrior { mean: 0.0, var: 1.0 },
            kernel: KernelSpec::Exponential { range: 0.5 },
            kernel_priors: vec![GammaPrior { shape: 2.0, rate: 2.0 }; 2],
            update_psi: true,
            psi_step: 0.5,
            repulsion: DEFAULT_DELTA,
            z_update: ZUpdateMode::Auto,
            latent: LatentBackend::Dense,
            seed: 1,
            store_u: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 {
            return Err(Error::invalid("keep must be at least 1"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if !(self.repulsion > 0.0) {
            return Err(Error::invalid("repulsion delta must be positive"));
        }
        if !(self.psi_step > 0.0 && self.psi_step.is_finite()) {
            return Err(Error::invalid("psi_step must be positive"));
        }
        self.tau_prior.validate()?;
        if !(self.mu_prior.var > 0.0 && self.mu_prior.mean.is_finite()) {
            return Err(Error::invalid("mu prior variance must be positive"));
        }
        self.kernel.validate()?;
        let needed = self.kernel.params().len();
        if self.kernel_priors.len() < needed {
            return Err(Error::invalid(format!(
                "kernel has {needed} parameters but {} priors were given",
                self.kernel_priors.len()
            )));
        }
        for p in &self.kernel_priors[..needed] {
            p.validate()?;
        }
        if let LatentBackend::Nngp { neighbors } = self.latent {
            if neighbors == 0 {
                return Err(Error::invalid("NNGP needs at least one neighbor"));
            }
        }
        if self.z_update == ZUpdateMode::Joint && self.truncation > JOINT_MAX_FACTORS {
            return Err(Error::invalid(format!("joint z updates support at most {JOINT_MAX_FACTORS} factors")));
        }
        Ok(())
    }

    /// The exchangeable (standard IBP) baseline with otherwise equal settings.
    pub fn exchangeable(&self) -> Self {
        Self { kernel: KernelSpec::Exchangeable, ..self.clone() }
    }
}

/// Latent state of one chain. Θ lives in the observation model.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// n×K latent fields; columns are constant under the exchangeable kernel.
    pub u: DMatrix<f64>,
    pub z: BinaryMatrix,
    /// Most recent PG draws of the u-updates.
    pub omega: DMatrix<f64>,
    pub tau: f64,
    pub mu: f64,
    pub kernel: KernelSpec,
    pub iteration: usize,
}

impl ChainState {
    /// U = μ everywhere, Z = 0.
    pub fn new(n: usize, k: usize, tau: f64, mu: f64, kernel: KernelSpec) -> Self {
        Self {
            u: DMatrix::from_element(n, k, mu),
            z: BinaryMatrix::zeros(n, k),
            omega: DMatrix::zeros(n, k),
            tau,
            mu,
            kernel,
            iteration: 0,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.u.ncols()
    }

    /// Column k as seen by the latent field (length 1 when exchangeable).
    pub fn field_column(&self, k: usize, field: &LatentField) -> DVector<f64> {
        if field.is_exchangeable() {
            DVector::from_element(1, self.u[(0, k)])
        } else {
            self.u.column(k).into_owned()
        }
    }

    /// Redraws Z from Bernoulli(b_ik) given the current U.
    pub fn draw_z_from_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.n_subjects() {
            let mut log_b = 0.0;
            for k in 0..self.n_factors() {
                log_b += log_sigmoid(self.u[(i, k)]);
                self.z.set(i, k, rng.random::<f64>() < log_b.exp());
            }
        }
    }
}

/// Likelihood side of model (4): everything the sampler needs to know
/// about f(x_i | z_i, Θ) and its parameters.
pub trait ObservationModel {
    fn n_subjects(&self) -> usize;
    fn n_factors(&self) -> usize;

    /// log f(x_i | z_i, Θ).
    fn loglik_row(&self, i: usize, z_row: &[bool]) -> f64;

    /// One pass over all Θ blocks, each an exact conditional draw followed
    /// by the repulsive-prior accept step.
    fn update_params<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, repulsion: f64, rng: &mut R) -> Result<()>;

    /// Caches whatever `toggle_eval` needs for row i at `row` and returns
    /// its log-likelihood. The defaults recompute everything.
    fn toggle_init(&self, i: usize, row: &[bool], _scratch: &mut Vec<f64>) -> f64 {
        self.loglik_row(i, row)
    }

    /// log-likelihood of `row`, which differs from the cached row in entry k only.
    fn toggle_eval(&self, i: usize, row: &[bool], _k: usize, _scratch: &[f64]) -> f64 {
        self.loglik_row(i, row)
    }

    /// Model-specific steps run at the end of a sweep.
    fn update_extra<R: Rng + ?Sized>(&mut self, _z: &BinaryMatrix, _rng: &mut R) -> Result<()> {
        Ok(())
    }

    /// Called at the end of every burn-in adaptation window.
    fn adapt(&mut self) {}

    /// Called once when burn-in ends.
    fn freeze(&mut self) {}

    /// Draws Θ from its (repulsive) prior.
    fn initialize<R: Rng + ?Sized>(&mut self, repulsion: f64, rng: &mut R);

    /// Replaces the observations by a draw from f(x | Z, Θ).
    fn simulate_observations<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, rng: &mut R);

    fn params_flat(&self) -> Vec<f64>;
    fn set_params_flat(&mut self, params: &[f64]) -> Result<()>;

    /// θ_k, the parameter block attached to factor k.
    fn factor_block(&self, k: usize) -> Vec<f64>;

    /// log π(θ_k) under the independent (non-repulsive) marginal prior.
    fn log_prior_factor(&self, k: usize) -> f64;

    /// Observation-scale mean for a subject with binary row `z_row`.
    fn predictive_mean(&self, z_row: &[bool]) -> Vec<f64>;

    fn loglik_total(&self, z: &BinaryMatrix) -> f64 {
        (0..self.n_subjects()).map(|i| self.loglik_row(i, z.row(i))).sum()
    }
}

/// Probability that the expansion variable s_ikj is 1: C e^u / (C e^u + 1).
pub fn s_probability(c: f64, u: f64) -> f64 {
    if c <= 0.0 {
        0.0
    } else {
        sigmoid(c.ln() + u)
    }
}

/// Draws the s variables for subject i and column k and returns κ_ik.
pub fn augmented_kappa<R: Rng + ?Sized>(u_row: &[f64], z_row: &[bool], k: usize, rng: &mut R) -> f64 {
    let kk = u_row.len();
    let mut log_others: f64 = u_row[..k].iter().map(|&u| log_sigmoid(u)).sum();
    let mut count = 0.0;
    for j in k..kk {
        if j > k {
            log_others += log_sigmoid(u_row[j]);
        }
        if z_row[j] {
            count += 1.0;
        } else {
            let p = sigmoid(log1m_exp(log_others) + u_row[k]);
            if rng.random::<f64>() < p {
                count += 1.0;
            }
        }
    }
    count - 0.5 * (kk - k) as f64
}

/// Redraws u_k (and ω_·k) from its augmented full conditional.
pub fn update_u_block<R: Rng + ?Sized>(
    state: &mut ChainState,
    k: usize,
    field: &LatentField,
    rng: &mut R,
) -> Result<()> {
    let (n, kk) = (state.n_subjects(), state.n_factors());
    if k >= kk {
        return Err(Error::invalid(format!("factor index {k} out of range")));
    }
    let shape = (kk - k) as f64;
    let mut omega = DVector::zeros(n);
    let mut kappa = DVector::zeros(n);
    let mut row = vec![0.0; kk];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = state.u[(i, j)];
        }
        kappa[i] = augmented_kappa(&row, state.z.row(i), k, rng);
        omega[i] = pg::draw(shape, row[k], rng);
        state.omega[(i, k)] = omega[i];
    }
    let draw = if field.is_exchangeable() {
        let om = DVector::from_element(1, omega.sum());
        let ka = DVector::from_element(1, kappa.sum());
        let cond = field.conditional(&om, &ka, state.tau, state.mu)?;
        DVector::from_element(n, field.sample_conditional(&cond, rng)[0])
    } else {
        let cond = field.conditional(&omega, &kappa, state.tau, state.mu)?;
        field.sample_conditional(&cond, rng)
    };
    if draw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite latent draw in column {k}")));
    }
    state.u.set_column(k, &draw);
    Ok(())
}

/// log b_ik and log(1 - b_ik) for one subject.
fn stick_logs(state: &ChainState, i: usize) -> (Vec<f64>, Vec<f64>) {
    let kk = state.n_factors();
    let mut log_b = Vec::with_capacity(kk);
    let mut acc = 0.0;
    for k in 0..kk {
        acc += log_sigmoid(state.u[(i, k)]);
        log_b.push(acc);
    }
    let log_1mb = log_b.iter().map(|&l| log1m_exp(l)).collect();
    (log_b, log_1mb)
}

/// Redraws the binary row z_i from its full conditional.
pub fn update_z_row<M: ObservationModel + ?Sized, R: Rng + ?Sized>(
    state: &mut ChainState,
    i: usize,
    model: &M,
    mode: ZUpdateMode,
    rng: &mut R,
) -> Result<()> {
    let kk = state.n_factors();
    if kk == 0 {
        return Ok(());
    }
    let (log_b, log_1mb) = stick_logs(state, i);
    match mode.resolve(kk) {
        ZUpdateMode::Joint => {
            if kk > JOINT_MAX_FACTORS {
                return Err(Error::invalid(format!("joint z update with K = {kk} > {JOINT_MAX_FACTORS}")));
            }
            let mut row = vec![false; kk];
            let scores: Vec<f64> = (0..1usize << kk)
                .map(|cfg| {
                    let mut s = 0.0;
                    for (k, r) in row.iter_mut().enumerate() {
                        *r = cfg >> k & 1 == 1;
                        s += if *r { log_b[k] } else { log_1mb[k] };
                    }
                    if s == f64::NEG_INFINITY {
                        s
                    } else {
                        s + model.loglik_row(i, &row)
                    }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numerical(format!("no z configuration of row {i} has positive mass")));
            }
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut target = rng.random::<f64>() * total;
            let mut chosen = weights.len() - 1;
            for (cfg, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = cfg;
                    break;
                }
                target -= w;
            }
            for k in 0..kk {
                state.z.set(i, k, chosen >> k & 1 == 1);
            }
        }
        _ => {
            let mut row = state.z.row(i).to_vec();
            let mut scratch = Vec::new();
            let mut current = model.toggle_init(i, &row, &mut scratch);
            for k in 0..kk {
                row[k] = !row[k];
                let toggled = model.toggle_eval(i, &row, k, &scratch);
                row[k] = !row[k];
                let (l1, l0) = if row[k] { (current, toggled) } else { (toggled, current) };
                let w1 = l1 + log_b[k];
                let w0 = l0 + log_1mb[k];
                let p = if w0 == f64::NEG_INFINITY && w1 == f64::NEG_INFINITY {
                    if row[k] { 1.0 } else { 0.0 }
                } else if w0 == f64::NEG_INFINITY {
                    1.0
                } else if w1 == f64::NEG_INFINITY {
                    0.0
                } else {
                    sigmoid(w1 - w0)
                };
                let new = rng.random::<f64>() < p;
                if new != row[k] {
                    row[k] = new;
                    current = model.toggle_init(i, &row, &mut scratch);
                }
            }
            state.z.row_mut(i).copy_from_slice(&row);
        }
    }
    Ok(())
}

/// Shape and rate of the Gamma full conditional of τ.
pub fn tau_conditional(state: &ChainState, field: &LatentField, prior: &GammaPrior) -> (f64, f64) {
    let kk = state.n_factors();
    let quad: f64 = (0..kk)
        .map(|k| field.quad_form(&state.field_column(k, field).add_scalar(-state.mu)))
        .sum();
    (prior.shape + 0.5 * (field.dim() * kk) as f64, prior.rate + 0.5 * quad)
}

pub fn update_tau<R: Rng + ?Sized>(
    state: &mut ChainState,
    field: &LatentField,
    prior: &GammaPrior,
    rng: &mut R,
) -> Result<()> {
    let (shape, rate) = tau_conditional(state, field, prior);
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Numerical(format!("tau conditional rate {rate}")));
    }
    let tau = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .sample(rng);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Numerical(format!("tau draw {tau}")));
    }
    state.tau = tau;
    Ok(())
}

/// Mean and variance of the normal full conditional of μ.
pub fn mu_conditional(state: &ChainState, field: &LatentField, prior: &NormalPrior) -> (f64, f64) {
    let kk = state.n_factors();
    let a = kk as f64 * state.tau * field.ones_quad() + 1.0 / prior.var;
    let b = state.tau * (0..kk).map(|k| field.ones_dot(&state.field_column(k, field))).sum::<f64>()
        + prior.mean / prior.var;
    (b / a, 1.0 / a)
}

pub fn update_mu<R: Rng + ?Sized>(state: &mut ChainState, field: &LatentField, prior: &NormalPrior, rng: &mut R) {
    let (mean, var) = mu_conditional(state, field, prior);
    state.mu = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
}

/// Log full conditional of ψ on the log scale (prior, Jacobian and the
/// latent-field densities).
pub fn psi_log_target(state: &ChainState, field: &LatentField, priors: &[GammaPrior]) -> f64 {
    let params = field.kernel().params();
    let prior: f64 = params.iter().zip(priors).map(|(&p, pr)| pr.ln_pdf(p) + p.ln()).sum();
    let data: f64 = (0..state.n_factors())
        .map(|k| field.log_density(&state.field_column(k, field), state.mu, state.tau))
        .sum();
    prior + data
}

/// Metropolis step for ψ with a given log-scale increment.
pub fn update_psi_with<R: Rng + ?Sized>(
    state: &mut ChainState,
    field: &mut LatentField,
    locations: &[Location],
    priors: &[GammaPrior],
    increment: &[f64],
    rng: &mut R,
) -> Result<bool> {
    if field.is_exchangeable() {
        return Ok(false);
    }
    let current = field.kernel();
    let proposal: Vec<f64> = current.params().iter().zip(increment).map(|(p, e)| p * e.exp()).collect();
    let Ok(spec) = current.with_params(&proposal) else {
        return Ok(false);
    };
    let candidate = match field.rebuild(locations, &spec) {
        Ok(f) => f,
        Err(e) if e.is_numerical() => return Ok(false),
        Err(e) => return Err(e),
    };
    let log_ratio = psi_log_target(state, &candidate, priors) - psi_log_target(state, field, priors);
    let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accept {
        *field = candidate;
        state.kernel = spec;
    }
    Ok(accept)
}

pub fn update_psi<R: Rng + ?Sized>(
    state: &mut ChainState,
    field: &mut LatentField,
    locations: &[Location],
    priors: &[GammaPrior],
    step: f64,
    rng: &mut R,
) -> Result<bool> {
    let d = field.kernel().params().len();
    let eps: Vec<f64> = (0..d).map(|_| step * rng.sample::<f64, _>(StandardNormal)).collect();
    update_psi_with(state, field, locations, priors, &eps, rng)
}

/// Random-walk step size tuned toward 30-40% acceptance during burn-in.
#[derive(Debug, Clone)]
pub struct AdaptiveStep {
    step: f64,
    window_accepted: usize,
    window_proposed: usize,
    accepted: usize,
    proposed: usize,
    frozen: bool,
}

impl AdaptiveStep {
    pub fn new(step: f64) -> Self {
        Self { step, window_accepted: 0, window_proposed: 0, accepted: 0, proposed: 0, frozen: false }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn record(&mut self, accepted: bool) {
        self.window_proposed += 1;
        self.proposed += 1;
        if accepted {
            self.window_accepted += 1;
            self.accepted += 1;
        }
    }

    pub fn adapt(&mut self) {
        if self.frozen || self.window_proposed == 0 {
            return;
        }
        let rate = self.window_accepted as f64 / self.window_proposed as f64;
        if rate < 0.30 {
            self.step *= 0.8;
        } else if rate > 0.40 {
            self.step *= 1.25;
        }
        self.window_accepted = 0;
        self.window_proposed = 0;
    }

    /// Stops adaptation and resets the counters used for reporting.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.accepted = 0;
        self.proposed = 0;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// A chain: configuration, latent field, state, observation model and RNG.
pub struct Sampler<M: ObservationModel> {
    config: SamplerConfig,
    locations: Vec<Location>,
    field: LatentField,
    state: ChainState,
    model: M,
    rng: ChaCha8Rng,
    psi_step: AdaptiveStep,
}

impl<M: ObservationModel> Sampler<M> {
    /// Starts from μ = m_μ, τ = E[τ], U = μ, Z from its prior and Θ from its prior.
    pub fn new(mut model: M, locations: Vec<Location>, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut state = ChainState::new(
            locations.len(),
            config.truncation,
            config.tau_prior.mean(),
            config.mu_prior.mean,
            config.kernel,
        );
        state.draw_z_from_prior(&mut rng);
        model.initialize(config.repulsion, &mut rng);
        Self::assemble(model, locations, config, state, rng)
    }

    /// Starts from a caller-supplied state; Θ is whatever `model` holds.
    pub fn from_state(model: M, locations: Vec<Location>, config: SamplerConfig, state: ChainState) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::assemble(model, locations, config, state, rng)
    }

    fn assemble(
        model: M,
        locations: Vec<Location>,
        config: SamplerConfig,
        state: ChainState,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let n = locations.len();
        if model.n_subjects() != n || state.n_subjects() != n {
            return Err(Error::Shape(format!(
                "{n} locations, {} observation rows, {} state rows",
                model.n_subjects(),
                state.n_subjects()
            )));
        }
        if model.n_factors() != config.truncation || state.n_factors() != config.truncation {
            return Err(Error::Shape("truncation differs between config, model and state".into()));
        }
        let field = LatentField::build(&locations, &state.kernel, config.latent)?;
        let mut psi_step = AdaptiveStep::new(config.psi_step);
        if config.burn_in == 0 {
            psi_step.freeze();
        }
        Ok(Self { config, locations, field, state, model, rng, psi_step })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ChainState {
        &mut self.state
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn field(&self) -> &LatentField {
        &self.field
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// The model and the chain's generator, borrowed together.
    pub fn model_and_rng(&mut self) -> (&mut M, &mut ChaCha8Rng) {
        (&mut self.model, &mut self.rng)
    }

    pub fn psi_step(&self) -> &AdaptiveStep {
        &self.psi_step
    }

    /// Replaces the state (e.g. after a forward draw); rebuilds the field if ψ changed.
    pub fn set_state(&mut self, state: ChainState) -> Result<()> {
        if state.kernel != self.field.kernel() {
            self.field = self.field.rebuild(&self.locations, &state.kernel)?;
        }
        self.state = state;
        Ok(())
    }

    /// One full Gibbs sweep.
    pub fn sweep(&mut self) -> Result<()> {
        let it = self.state.iteration;
        let rng = &mut self.rng;
        for k in 0..self.state.n_factors() {
            update_u_block(&mut self.state, k, &self.field, rng).map_err(|e| e.in_block(it, "u"))?;
        }
        for i in 0..self.state.n_subjects() {
            update_z_row(&mut self.state, i, &self.model, self.config.z_update, rng)
                .map_err(|e| e.in_block(it, "z"))?;
        }
        self.model
            .update_params(&self.state.z, self.config.repulsion, rng)
            .map_err(|e| e.in_block(it, "theta"))?;
        update_tau(&mut self.state, &self.field, &self.config.tau_prior, rng).map_err(|e| e.in_block(it, "tau"))?;
        update_mu(&mut self.state, &self.field, &self.config.mu_prior, rng);
        if self.config.update_psi && !self.field.is_exchangeable() {
            let accepted = update_psi(
                &mut self.state,
                &mut self.field,
                &self.locations,
                &self.config.kernel_priors,
                self.psi_step.step(),
                rng,
            )
            .map_err(|e| e.in_block(it, "psi"))?;
            self.psi_step.record(accepted);
        }
        self.model.update_extra(&self.state.z, rng).map_err(|e| e.in_block(it, "extra"))?;

        self.state.iteration += 1;
        let done = self.state.iteration;
        if done <= self.config.burn_in && done % ADAPT_WINDOW == 0 {
            self.psi_step.adapt();
            self.model.adapt();
        }
        if done == self.config.burn_in {
            self.psi_step.freeze();
            self.model.freeze();
        }
        Ok(())
    }

    fn record(&self) -> Draw {
        Draw {
            iteration: self.state.iteration,
            tau: self.state.tau,
            mu: self.state.mu,
            psi: self.state.kernel.params(),
            z: self.state.z.to_flat(),
            theta: self.model.params_flat(),
            u: self.config.store_u.then(|| self.state.u.transpose().iter().copied().collect()),
        }
    }

    /// Runs burn-in then `keep` thinned draws.
    pub fn run(mut self) -> Result<ChainOutput> {
        for _ in 0..self.config.burn_in {
            self.sweep()?;
        }
        let mut draws = Vec::with_capacity(self.config.keep);
        for _ in 0..self.config.keep {
            for _ in 0..self.config.thin {
                self.sweep()?;
            }
            draws.push(self.record());
        }
        Ok(ChainOutput {
            n_subjects: self.state.n_subjects(),
            n_factors: self.state.n_factors(),
            kernel: self.config.kernel,
            draws,
            psi_acceptance: self.psi_step.acceptance_rate(),
        })
    }

    pub fn into_parts(self) -> (M, ChainState) {
        (self.model, self.state)
    }
}

/// Observation model without observations: the chain then targets the
/// prior of (U, Z, τ, μ, ψ).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorOnly {
    pub n: usize,
    pub k: usize,
}

impl ObservationModel for PriorOnly {
    fn n_subjects(&self) -> usize {
        self.n
    }
    fn n_factors(&self) -> usize {
        self.k
    }
    fn loglik_row(&self, _: usize, _: &[bool]) -> f64 {
        0.0
    }
    fn update_params<R: Rng + ?Sized>(&mut self, _: &BinaryMatrix, _: f64, _: &mut R) -> Result<()> {
        Ok(())
    }
    fn initialize<R: Rng + ?Sized>(&mut self, _: f64, _: &mut R) {}
    fn simulate_observations<R: Rng + ?Sized>(&mut self, _: &BinaryMatrix, _: &mut R) {}
    fn params_flat(&self) -> Vec<f64> {
        Vec::new()
    }
    fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape("prior-only model has no parameters".into()))
        }
    }
    fn factor_block(&self, _: usize) -> Vec<f64> {
        Vec::new()
    }
    fn log_prior_factor(&self, _: usize) -> f64 {
        0.0
    }
    fn predictive_mean(&self, _: &[bool]) -> Vec<f64> {
        Vec::new()
    }
}

pub fn run_chain<M: ObservationModel>(model: M, locations: &[Location], config: &SamplerConfig) -> Result<ChainOutput> {
    Sampler::new(model, locations.to_vec(), config.clone())?.run()
}

/// Independent chains on scoped threads; chain c uses seed `config.seed + c`.
pub fn run_chains<M>(model: &M, locations: &[Location], config: &SamplerConfig, chains: usize) -> Result<Vec<ChainOutput>>
where
    M: ObservationModel + Clone + Send,
{
    if chains == 0 {
        return Err(Error::invalid("at least one chain is required"));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..chains)
            .map(|c| {
                let model = model.clone();
                let mut cfg = config.clone();
                cfg.seed = config.seed.wrapping_add(c as u64);
                scope.spawn(move || run_chain(model, locations, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Numerical("chain thread panicked".into()))?)
            .collect()
    })
}
