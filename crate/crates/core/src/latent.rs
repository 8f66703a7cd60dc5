//! Prior of the latent columns u_k ~ N(μ1, τ^{-1}Q(ψ)) behind one interface,
//! for the dense GP, the NNGP approximation and the exchangeable baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{build_correlation, CorrelationMatrix, KernelSpec, Location};
use crate::linalg;
use crate::nngp::{build_neighbor_graph, NeighborGraph, NngpConditional, Skyline, DEFAULT_NEIGHBORS};

/// How the latent-field prior is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatentBackend {
    Dense,
    Nngp { neighbors: usize },
}

impl Default for LatentBackend {
    fn default() -> Self {
        LatentBackend::Dense
    }
}

impl LatentBackend {
    pub fn nngp() -> Self {
        LatentBackend::Nngp { neighbors: DEFAULT_NEIGHBORS }
    }
}

#[derive(Debug, Clone)]
pub struct DenseField {
    corr: CorrelationMatrix,
    q_inv: DMatrix<f64>,
    q_inv_ones: DVector<f64>,
    ones_quad: f64,
}

#[derive(Debug, Clone)]
pub struct NngpField {
    graph: NeighborGraph,
    precision: Skyline,
    p_ones: DVector<f64>,
    ones_quad: f64,
}

/// Latent-field prior for one kernel value ψ.
///
/// Quadratic forms, determinants and solves are on the correlation scale;
/// the precision τ is applied by the caller.
#[derive(Debug, Clone)]
pub enum LatentField {
    Dense(Box<DenseField>),
    Nngp(Box<NngpField>),
    /// One shared latent value per column; vectors have length 1.
    Exchangeable { sites: usize },
}

/// Gaussian full conditional of one latent column, ready to sample.
pub enum Conditional {
    Dense { chol: nalgebra::Cholesky<f64, nalgebra::Dyn>, b: DVector<f64> },
    Nngp(NngpConditional),
    Scalar { mean: f64, sd: f64 },
}

impl LatentField {
    pub fn build(locations: &[Location], kernel: &KernelSpec, backend: LatentBackend) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::invalid("at least one location is required"));
        }
        if kernel.is_exchangeable() {
            return Ok(LatentField::Exchangeable { sites: locations.len() });
        }
        match backend {
            LatentBackend::Dense => {
                let corr = build_correlation(locations, kernel)?;
                Ok(LatentField::Dense(Box::new(DenseField::new(corr))))
            }
            LatentBackend::Nngp { neighbors } => {
                let graph = build_neighbor_graph(locations, neighbors, kernel)?;
                Ok(LatentField::Nngp(Box::new(NngpField::new(graph))))
            }
        }
    }

    /// Same backend with a new kernel value; NNGP keeps its neighbor sets.
    pub fn rebuild(&self, locations: &[Location], kernel: &KernelSpec) -> Result<Self> {
        match self {
            LatentField::Dense(_) => Self::build(locations, kernel, LatentBackend::Dense),
            LatentField::Nngp(f) => Ok(LatentField::Nngp(Box::new(NngpField::new(
                f.graph.with_kernel(locations, kernel)?,
            )))),
            LatentField::Exchangeable { sites } => Ok(LatentField::Exchangeable { sites: *sites }),
        }
    }

    pub fn n_sites(&self) -> usize {
        match self {
            LatentField::Dense(f) => f.corr.len(),
            LatentField::Nngp(f) => f.graph.len(),
            LatentField::Exchangeable { sites } => *sites,
        }
    }

    /// Length of the stored latent vector: n, or 1 for the exchangeable field.
    pub fn dim(&self) -> usize {
        match self {
            LatentField::Exchangeable { .. } => 1,
            _ => self.n_sites(),
        }
    }

    pub fn is_exchangeable(&self) -> bool {
        matches!(self, LatentField::Exchangeable { .. })
    }

    pub fn kernel(&self) -> KernelSpec {
        match self {
            LatentField::Dense(f) => *f.corr.spec(),
            LatentField::Nngp(f) => *f.graph.spec(),
            LatentField::Exchangeable { .. } => KernelSpec::Exchangeable,
        }
    }

    pub fn dense(&self) -> Option<&CorrelationMatrix> {
        match self {
            LatentField::Dense(f) => Some(&f.corr),
            _ => None,
        }
    }

    pub fn graph(&self) -> Option<&NeighborGraph> {
        match self {
            LatentField::Nngp(f) => Some(&f.graph),
            _ => None,
        }
    }

    /// v^T Q^{-1} v.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        match self {
            LatentField::Dense(f) => {
                let w = &f.q_inv * v;
                v.dot(&w)
            }
            LatentField::Nngp(f) => f.graph.quad_form(v),
            LatentField::Exchangeable { .. } => v[0] * v[0],
        }
    }

    /// log det Q.
    pub fn log_det(&self) -> f64 {
        match self {
            LatentField::Dense(f) => f.corr.log_det(),
            LatentField::Nngp(f) => f.graph.log_det(),
            LatentField::Exchangeable { .. } => 0.0,
        }
    }

    /// 1^T Q^{-1} 1.
    pub fn ones_quad(&self) -> f64 {
        match self {
            LatentField::Dense(f) => f.ones_quad,
            LatentField::Nngp(f) => f.ones_quad,
            LatentField::Exchangeable { .. } => 1.0,
        }
    }

    /// 1^T Q^{-1} v.
    pub fn ones_dot(&self, v: &DVector<f64>) -> f64 {
        match self {
            LatentField::Dense(f) => f.q_inv_ones.dot(v),
            LatentField::Nngp(f) => f.p_ones.dot(v),
            LatentField::Exchangeable { .. } => v[0],
        }
    }

    /// log N(u; μ1, τ^{-1}Q).
    pub fn log_density(&self, u: &DVector<f64>, mu: f64, tau: f64) -> f64 {
        let d = self.dim() as f64;
        let centered = u.add_scalar(-mu);
        -0.5 * (d * (2.0 * std::f64::consts::PI / tau).ln() + self.log_det() + tau * self.quad_form(&centered))
    }

    /// Full conditional N(A^{-1}B, A^{-1}) with A = diag(ω) + τQ^{-1} and
    /// B = κ + τμQ^{-1}1. For the exchangeable field ω and κ are summed
    /// over subjects by the caller and passed as length-1 vectors.
    pub fn conditional(&self, omega: &DVector<f64>, kappa: &DVector<f64>, tau: f64, mu: f64) -> Result<Conditional> {
        match self {
            LatentField::Dense(f) => {
                let mut a = &f.q_inv * tau;
                for i in 0..a.nrows() {
                    a[(i, i)] += omega[i];
                }
                let (chol, _) = linalg::cholesky_with_jitter(&a, 0.0)?;
                let b = kappa + &f.q_inv_ones * (tau * mu);
                Ok(Conditional::Dense { chol, b })
            }
            LatentField::Nngp(f) => Ok(Conditional::Nngp(NngpConditional::new(
                &f.graph,
                &f.precision,
                &f.p_ones,
                omega,
                kappa,
                tau,
                mu,
            )?)),
            LatentField::Exchangeable { .. } => {
                let a = omega[0] + tau;
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::Numerical(format!("scalar conditional precision {a}")));
                }
                Ok(Conditional::Scalar { mean: (kappa[0] + tau * mu) / a, sd: a.sqrt().recip() })
            }
        }
    }

    pub fn sample_conditional<R: Rng + ?Sized>(&self, cond: &Conditional, rng: &mut R) -> DVector<f64> {
        match (cond, self) {
            (Conditional::Dense { chol, b }, _) => linalg::sample_from_precision(chol, b, rng),
            (Conditional::Nngp(c), LatentField::Nngp(f)) => c.sample(&f.graph, rng),
            (Conditional::Scalar { mean, sd }, _) => {
                DVector::from_element(1, mean + sd * rng.sample::<f64, _>(StandardNormal))
            }
            _ => unreachable!("conditional built by a different field"),
        }
    }

    /// Mean and covariance of a conditional, for diagnostics.
    pub fn conditional_moments(&self, cond: &Conditional) -> (DVector<f64>, DMatrix<f64>) {
        match (cond, self) {
            (Conditional::Dense { chol, b }, _) => (chol.solve(b), chol.inverse()),
            (Conditional::Nngp(c), LatentField::Nngp(f)) => c.moments(&f.graph),
            (Conditional::Scalar { mean, sd }, _) => {
                (DVector::from_element(1, *mean), DMatrix::from_element(1, 1, sd * sd))
            }
            _ => unreachable!("conditional built by a different field"),
        }
    }
}

impl DenseField {
    fn new(corr: CorrelationMatrix) -> Self {
        let q_inv = corr.inverse();
        let n = corr.len();
        let q_inv_ones = corr.solve(&DVector::from_element(n, 1.0));
        let ones_quad = q_inv_ones.sum();
        Self { corr, q_inv, q_inv_ones, ones_quad }
    }
}

impl NngpField {
    fn new(graph: NeighborGraph) -> Self {
        let precision = graph.precision();
        let p_ones = graph.precision_apply(&DVector::from_element(graph.len(), 1.0));
        let ones_quad = p_ones.sum();
        Self { graph, precision, p_ones, ones_quad }
    }
}
