//! Nearest-neighbor Gaussian process approximation of the latent-field prior.
//!
//! Sites are ordered by coordinates (x, then y, then id). Each site is
//! conditioned on its `m` nearest predecessors in that order, which gives a
//! sparse precision (I - B)^T F^{-1} (I - B) on the correlation scale. The
//! precision has a narrow envelope in the coordinate order, so full
//! conditionals are drawn through an envelope (skyline) Cholesky factor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, Location};
use crate::linalg::{self, BASE_JITTER, MAX_JITTER};

/// Default neighbor count.
pub const DEFAULT_NEIGHBORS: usize = 10;

/// Neighbor sets with their conditioning coefficients.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    spec: KernelSpec,
    max_neighbors: usize,
    /// `order[p]` is the original index of the site at position p.
    order: Vec<usize>,
    /// Inverse of `order`.
    position: Vec<usize>,
    /// Neighbor original indices, indexed by original site index.
    neighbors: Vec<Vec<usize>>,
    /// B_i, aligned with `neighbors[i]`.
    coeffs: Vec<Vec<f64>>,
    /// F_i on the correlation scale.
    cond_var: Vec<f64>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn max_neighbors(&self) -> usize {
        self.max_neighbors
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Original indices in conditioning order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn coefficients(&self, i: usize) -> &[f64] {
        &self.coeffs[i]
    }

    pub fn conditional_variance(&self, i: usize) -> f64 {
        self.cond_var[i]
    }

    /// Same neighbor sets, coefficients recomputed for a new kernel.
    pub fn with_kernel(&self, locations: &[Location], spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        let mut graph = self.clone();
        graph.spec = *spec;
        graph.compute_coefficients(locations)?;
        Ok(graph)
    }

    fn compute_coefficients(&mut self, locations: &[Location]) -> Result<()> {
        let spec = self.spec;
        for i in 0..self.len() {
            let nb = &self.neighbors[i];
            if nb.is_empty() {
                self.coeffs[i].clear();
                self.cond_var[i] = 1.0 + BASE_JITTER;
                continue;
            }
            let k = nb.len();
            let sub = DMatrix::from_fn(k, k, |a, b| {
                if a == b {
                    1.0
                } else {
                    spec.correlation(locations[nb[a]].distance(&locations[nb[b]]))
                }
            });
            let cross = DVector::from_iterator(
                k,
                nb.iter().map(|&j| spec.correlation(locations[i].distance(&locations[j]))),
            );
            let (chol, jitter) = linalg::cholesky_with_jitter(&sub, BASE_JITTER)?;
            let b = chol.solve(&cross);
            let f = 1.0 + jitter - b.dot(&cross);
            if !(f > 0.0) {
                return Err(Error::Factorization(format!(
                    "nonpositive conditional variance {f:e} at site {}",
                    locations[i].id
                )));
            }
            self.coeffs[i] = b.iter().copied().collect();
            self.cond_var[i] = f;
        }
        Ok(())
    }

    /// Σ_i log φ(u_i; μ + B_i(u_N(i) - μ1), F_i / τ).
    pub fn log_density(&self, u: &DVector<f64>, mu: f64, tau: f64) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.len())
            .map(|i| {
                let var = self.cond_var[i] / tau;
                let r = self.residual(u, mu, i);
                -0.5 * (ln_2pi + var.ln() + r * r / var)
            })
            .sum()
    }

    fn residual(&self, v: &DVector<f64>, mu: f64, i: usize) -> f64 {
        let pred: f64 = self.neighbors[i]
            .iter()
            .zip(&self.coeffs[i])
            .map(|(&j, b)| b * (v[j] - mu))
            .sum();
        v[i] - mu - pred
    }

    /// v^T P v for the correlation-scale precision P.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        (0..self.len())
            .map(|i| {
                let r = self.residual(v, 0.0, i);
                r * r / self.cond_var[i]
            })
            .sum()
    }

    /// log det of the implied correlation matrix, Σ log F_i.
    pub fn log_det(&self) -> f64 {
        self.cond_var.iter().map(|f| f.ln()).sum()
    }

    /// P v for the correlation-scale precision, in original indexing.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for i in 0..self.len() {
            let r = self.residual(v, 0.0, i) / self.cond_var[i];
            out[i] += r;
            for (&j, b) in self.neighbors[i].iter().zip(&self.coeffs[i]) {
                out[j] -= b * r;
            }
        }
        out
    }

    /// Assembles P in conditioning order as an envelope matrix.
    pub(crate) fn precision(&self) -> Skyline {
        let n = self.len();
        let mut first: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let pi = self.position[i];
            let lowest = self.neighbors[i]
                .iter()
                .map(|&j| self.position[j])
                .chain(std::iter::once(pi))
                .min()
                .unwrap();
            first[pi] = first[pi].min(lowest);
            for &j in &self.neighbors[i] {
                let pj = self.position[j];
                first[pj] = first[pj].min(lowest);
            }
        }
        let mut sky = Skyline::zeros(first);
        for i in 0..n {
            let inv_f = 1.0 / self.cond_var[i];
            let mut entries: Vec<(usize, f64)> = vec![(self.position[i], 1.0)];
            entries.extend(
                self.neighbors[i]
                    .iter()
                    .zip(&self.coeffs[i])
                    .map(|(&j, &b)| (self.position[j], -b)),
            );
            for &(r, ar) in &entries {
                for &(c, ac) in &entries {
                    if c <= r {
                        sky.add(r, c, ar * ac * inv_f);
                    }
                }
            }
        }
        sky
    }

    #[cfg(test)]
    pub(crate) fn position_of(&self, i: usize) -> usize {
        self.position[i]
    }
}

/// Builds the neighbor graph with `m` nearest predecessors per site.
pub fn build_neighbor_graph(
    locations: &[Location],
    m: usize,
    spec: &KernelSpec,
) -> Result<NeighborGraph> {
    if m == 0 {
        return Err(Error::invalid("neighbor count m must be at least 1"));
    }
    if locations.is_empty() {
        return Err(Error::invalid("at least one location is required"));
    }
    if spec.is_exchangeable() {
        return Err(Error::invalid("the exchangeable kernel has no NNGP form"));
    }
    spec.validate()?;
    let n = locations.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (&locations[a], &locations[b]);
        la.coords[0]
            .total_cmp(&lb.coords[0])
            .then(la.coords[1].total_cmp(&lb.coords[1]))
            .then(la.id.cmp(&lb.id))
    });
    let mut position = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        position[i] = p;
    }
    let mut neighbors = vec![Vec::new(); n];
    for p in 1..n {
        let i = order[p];
        let mut cand: Vec<(f64, usize)> = order[..p]
            .iter()
            .enumerate()
            .map(|(q, &j)| (locations[i].distance(&locations[j]), q))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(m);
        let mut nb: Vec<usize> = cand.into_iter().map(|(_, q)| order[q]).collect();
        nb.sort_by_key(|&j| position[j]);
        neighbors[i] = nb;
    }
    let mut graph = NeighborGraph {
        spec: *spec,
        max_neighbors: m,
        order,
        position,
        coeffs: vec![Vec::new(); n],
        cond_var: vec![1.0; n],
        neighbors,
    };
    graph.compute_coefficients(locations)?;
    Ok(graph)
}

/// Symmetric matrix stored by rows over an envelope: row i holds columns
/// `first[i]..=i`. The Cholesky factor of such a matrix stays inside the
/// same envelope.
#[derive(Debug, Clone)]
pub(crate) struct Skyline {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl Skyline {
    fn zeros(first: Vec<usize>) -> Self {
        let rows = first.iter().enumerate().map(|(i, &f)| vec![0.0; i - f + 1]).collect();
        Self { first, rows }
    }

    pub(crate) fn len(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    #[cfg(test)]
    pub(crate) fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if j <= i { (i, j) } else { (j, i) };
        if c < self.first[r] {
            0.0
        } else {
            self.rows[r][c - self.first[r]]
        }
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let f = self.first[i];
        self.rows[i][j - f] += v;
    }

    pub(crate) fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.rows {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub(crate) fn add_diagonal(&mut self, i: usize, v: f64) {
        self.add(i, i, v);
    }

    /// Lower Cholesky factor in the same envelope, or None if not positive definite.
    pub(crate) fn cholesky(&self) -> Option<Skyline> {
        let n = self.len();
        let mut l = Skyline::zeros(self.first.clone());
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = l.first[j];
                let start = fi.max(fj);
                let mut s = self.rows[i][j - fi];
                let (ri, rj) = (&l.rows[i], &l.rows[j]);
                for k in start..j {
                    s -= ri[k - fi] * rj[k - fj];
                }
                if j < i {
                    let d = l.rows[j][j - fj];
                    l.rows[i][j - fi] = s / d;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l.rows[i][i - fi] = s.sqrt();
                }
            }
        }
        Some(l)
    }

    /// Solves L y = b for a lower factor.
    pub(crate) fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        for i in 0..self.len() {
            let f = self.first[i];
            let row = &self.rows[i];
            let mut s = y[i];
            for k in f..i {
                s -= row[k - f] * y[k];
            }
            y[i] = s / row[i - f];
        }
        y
    }

    /// Solves L^T x = y for a lower factor.
    pub(crate) fn solve_upper_transposed(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        for i in (0..self.len()).rev() {
            let f = self.first[i];
            let row = &self.rows[i];
            x[i] /= row[i - f];
            let xi = x[i];
            for k in f..i {
                x[k] -= row[k - f] * xi;
            }
        }
        x
    }

    #[cfg(test)]
    pub(crate) fn log_det_factor(&self) -> f64 {
        (0..self.len())
            .map(|i| 2.0 * self.rows[i][i - self.first[i]].ln())
            .sum()
    }

    #[cfg(test)]
    pub(crate) fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.len(), |i, j| self.get(i, j))
    }
}

/// Factor of the full-conditional precision A = diag(ω) + τP and the
/// matching mean, in conditioning order.
pub struct NngpConditional {
    factor: Skyline,
    mean: Vec<f64>,
}

impl NngpConditional {
    pub(crate) fn new(
        graph: &NeighborGraph,
        precision: &Skyline,
        precision_ones: &DVector<f64>,
        omega: &DVector<f64>,
        kappa: &DVector<f64>,
        tau: f64,
        mu: f64,
    ) -> Result<Self> {
        let n = graph.len();
        let mut jitter = 0.0;
        loop {
            let mut a = precision.scaled(tau);
            for p in 0..n {
                a.add_diagonal(p, omega[graph.order[p]] + jitter);
            }
            if let Some(factor) = a.cholesky() {
                let b: Vec<f64> = (0..n)
                    .map(|p| {
                        let i = graph.order[p];
                        kappa[i] + tau * mu * precision_ones[i]
                    })
                    .collect();
                let mean = factor.solve_upper_transposed(&factor.solve_lower(&b));
                return Ok(Self { factor, mean });
            }
            jitter = if jitter == 0.0 { BASE_JITTER } else { jitter * 10.0 };
            if jitter > MAX_JITTER * (1.0 + 1e-9) {
                return Err(Error::Factorization(
                    "NNGP full-conditional precision not positive definite".into(),
                ));
            }
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, graph: &NeighborGraph, rng: &mut R) -> DVector<f64> {
        let n = self.mean.len();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let noise = self.factor.solve_upper_transposed(&eps);
        let mut out = DVector::zeros(n);
        for p in 0..n {
            out[graph.order[p]] = self.mean[p] + noise[p];
        }
        out
    }

    /// Mean and covariance in original indexing.
    pub(crate) fn moments(&self, graph: &NeighborGraph) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.mean.len();
        let mut mean = DVector::zeros(n);
        for p in 0..n {
            mean[graph.order[p]] = self.mean[p];
        }
        let mut cov = DMatrix::zeros(n, n);
        for q in 0..n {
            let mut e = vec![0.0; n];
            e[q] = 1.0;
            let col = self.factor.solve_upper_transposed(&self.factor.solve_lower(&e));
            for p in 0..n {
                cov[(graph.order[p], graph.order[q])] = col[p];
            }
        }
        (mean, cov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_correlation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sites(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Location::new(format!("s{i}"), rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }

    fn dense_log_density(q: &crate::kernels::CorrelationMatrix, u: &DVector<f64>, mu: f64, tau: f64) -> f64 {
        let n = u.len() as f64;
        let c = u.add_scalar(-mu);
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() - n * tau.ln() + q.log_det() + tau * q.quad_form(&c))
    }

    #[test]
    fn first_site_is_marginal() {
        let sites = random_sites(8, 1);
        let g = build_neighbor_graph(&sites, 3, &KernelSpec::exponential(0.3).unwrap()).unwrap();
        let first = g.order()[0];
        assert!(g.neighbors(first).is_empty());
        assert!((g.conditional_variance(first) - 1.0).abs() < 1e-7);
        for i in 0..8 {
            assert!(g.neighbors(i).len() <= 3);
            assert!(g.conditional_variance(i) > 0.0);
            for &j in g.neighbors(i) {
                assert!(g.position_of(j) < g.position_of(i));
            }
        }
    }

    #[test]
    fn collinear_sites_match_hand_conditioning() {
        let sites = [
            Location::new("a", 0.0, 0.0),
            Location::new("b", 1.0, 0.0),
            Location::new("c", 2.0, 0.0),
        ];
        let g = build_neighbor_graph(&sites, 2, &KernelSpec::exponential(1.0).unwrap()).unwrap();
        let r1 = (-1.0f64).exp();
        let r2 = (-2.0f64).exp();
        // site b | a
        assert!((g.coefficients(1)[0] - r1 / (1.0 + BASE_JITTER)).abs() < 1e-12);
        assert!((g.conditional_variance(1) - (1.0 + BASE_JITTER - r1 * r1 / (1.0 + BASE_JITTER))).abs() < 1e-12);
        // site c | a, b: exponential kernel is Markov on a line, so the weight on a vanishes
        let det = 1.0 - r1 * r1;
        let wa = (r2 - r1 * r1) / det;
        let wb = (r1 - r1 * r2) / det;
        assert!((g.coefficients(2)[0] - wa).abs() < 1e-7);
        assert!((g.coefficients(2)[1] - wb).abs() < 1e-7);
        assert!(wa.abs() < 1e-12);
        let f = 1.0 - (wa * r2 + wb * r1);
        assert!((g.conditional_variance(2) - f).abs() < 1e-7);
    }

    #[test]
    fn saturated_graph_reproduces_dense_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 5, 20] {
            let sites = random_sites(n, 10 + n as u64);
            let spec = KernelSpec::exponential(0.4).unwrap();
            let g = build_neighbor_graph(&sites, n.max(2) - 1, &spec).unwrap();
            let q = build_correlation(&sites, &spec).unwrap();
            for _ in 0..20 {
                let u = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-2.0..2.0)));
                let a = g.log_density(&u, 0.3, 1.7);
                let b = dense_log_density(&q, &u, 0.3, 1.7);
                assert!((a - b).abs() < 1e-8, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn centered_density_value() {
        let sites = random_sites(6, 4);
        let g = build_neighbor_graph(&sites, 2, &KernelSpec::exponential(0.5).unwrap()).unwrap();
        let u = DVector::from_element(6, 0.7);
        let expected: f64 = (0..6)
            .map(|i| -0.5 * (2.0 * std::f64::consts::PI * g.conditional_variance(i) / 2.0).ln())
            .sum();
        assert!((g.log_density(&u, 0.7, 2.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn precision_matches_quadratic_form_and_is_pd() {
        let sites = random_sites(30, 5);
        let g = build_neighbor_graph(&sites, 4, &KernelSpec::exponential(0.3).unwrap()).unwrap();
        let p = g.precision();
        let dense = p.to_dense();
        assert!(dense.clone().symmetric_eigen().eigenvalues.iter().all(|&l| l > 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = DVector::from_iterator(30, (0..30).map(|_| rng.random_range(-1.0..1.0)));
        // permute v into conditioning order
        let vp = DVector::from_iterator(30, g.order().iter().map(|&i| v[i]));
        let qf = (vp.transpose() * &dense * &vp)[(0, 0)];
        assert!((qf - g.quad_form(&v)).abs() < 1e-9);
        let pv = g.precision_apply(&v);
        let pv_dense = &dense * &vp;
        for p_ in 0..30 {
            assert!((pv[g.order()[p_]] - pv_dense[p_]).abs() < 1e-9);
        }
        let l = p.cholesky().unwrap();
        assert!((l.log_det_factor() + g.log_det()).abs() < 1e-8);
    }

    #[test]
    fn graph_is_deterministic() {
        let sites = random_sites(40, 8);
        let spec = KernelSpec::exponential(0.3).unwrap();
        let a = build_neighbor_graph(&sites, 5, &spec).unwrap();
        let b = build_neighbor_graph(&sites, 5, &spec).unwrap();
        assert_eq!(a.order(), b.order());
        for i in 0..40 {
            assert_eq!(a.neighbors(i), b.neighbors(i));
            assert_eq!(a.coefficients(i), b.coefficients(i));
        }
    }

    #[test]
    fn invalid_neighbor_count() {
        let sites = random_sites(4, 1);
        assert!(build_neighbor_graph(&sites, 0, &KernelSpec::exponential(1.0).unwrap()).is_err());
        assert!(build_neighbor_graph(&sites, 2, &KernelSpec::Exchangeable).is_err());
    }
}
