//! Factor presence at unobserved sites from stored posterior draws of U.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::ChainOutput;
use crate::error::{Error, Result};
use crate::gibbs::ObservationModel;
use crate::kernels::{build_correlation, KernelSpec, Location};
use crate::latent::LatentBackend;
use crate::numeric::sigmoid;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPrediction {
    pub site: Location,
    /// p_k(s), the across-draw frequency of z_k(s) = 1.
    pub presence: Vec<f64>,
    /// Across-draw mean of the observation model's mean function, if requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
}

/// Kriging weights of one new site: u(s) | u ~ N(μ + w·(u_idx − μ), resid/τ).
#[derive(Debug, Clone)]
struct Weights {
    idx: Vec<usize>,
    w: Vec<f64>,
    resid: f64,
}

fn kriging_weights(site: &Location, locations: &[Location], kernel: &KernelSpec, backend: LatentBackend) -> Result<Weights> {
    if kernel.is_exchangeable() {
        return Ok(Weights { idx: vec![0], w: vec![1.0], resid: 0.0 });
    }
    let idx: Vec<usize> = match backend {
        LatentBackend::Dense => (0..locations.len()).collect(),
        LatentBackend::Nngp { neighbors } => {
            let mut by_distance: Vec<(f64, usize)> =
                locations.iter().enumerate().map(|(i, l)| (site.distance(l), i)).collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            by_distance.into_iter().take(neighbors.max(1)).map(|(_, i)| i).collect()
        }
    };
    let subset: Vec<Location> = idx.iter().map(|&i| locations[i].clone()).collect();
    let q = build_correlation(&subset, kernel)?;
    let c = q.cross_correlation(site);
    let w = q.solve(&c);
    let resid = (1.0 - c.dot(&w)).max(0.0);
    Ok(Weights { idx, w: w.iter().copied().collect(), resid })
}

/// Predicts z_1(s), …, z_K(s) at each new site. For every kept draw the
/// latent values u_k(s) are drawn from their GP conditional given the stored
/// u_k, then v_k(s) = Π_{j≤k} σ(u_j(s)) and z_k(s) ~ Bernoulli(v_k(s)).
/// With `model`, its mean function at the drawn z(s) is averaged as well,
/// using each draw's Θ. Under the NNGP backend a site conditions on its m
/// nearest observed sites.
pub fn predict_factors<M, R>(
    sites: &[Location],
    locations: &[Location],
    chain: &ChainOutput,
    backend: LatentBackend,
    mut model: Option<&mut M>,
    rng: &mut R,
) -> Result<Vec<FactorPrediction>>
where
    M: ObservationModel,
    R: Rng + ?Sized,
{
    if chain.is_empty() {
        return Err(Error::invalid("chain has no draws"));
    }
    if !chain.has_u() {
        return Err(Error::invalid("chain has no stored latent fields; rerun the fit with U persistence enabled"));
    }
    if locations.len() != chain.n_subjects {
        return Err(Error::Shape(format!("{} locations for a chain over {} subjects", locations.len(), chain.n_subjects)));
    }
    let k = chain.n_factors;
    let mut presence = vec![vec![0.0; k]; sites.len()];
    let mut means: Vec<Option<Vec<f64>>> = vec![None; sites.len()];
    let mut cached: Option<(KernelSpec, Vec<Weights>)> = None;
    let mut z_row = vec![false; k];

    for d in 0..chain.len() {
        let kernel = chain.kernel_at(d)?;
        if cached.as_ref().is_none_or(|(spec, _)| *spec != kernel) {
            let weights = sites
                .iter()
                .map(|s| kriging_weights(s, locations, &kernel, backend))
                .collect::<Result<Vec<_>>>()?;
            cached = Some((kernel, weights));
        }
        let weights = &cached.as_ref().expect("filled above").1;
        let draw = &chain.draws[d];
        let u = draw.u.as_ref().expect("checked has_u");
        let sd = draw.tau.sqrt().recip();
        if let Some(m) = model.as_deref_mut() {
            m.set_params_flat(&draw.theta)?;
        }
        for (s, wt) in weights.iter().enumerate() {
            let mut log_v = 0.0;
            for col in 0..k {
                let mut mean = draw.mu;
                for (&i, &w) in wt.idx.iter().zip(&wt.w) {
                    mean += w * (u[i * k + col] - draw.mu);
                }
                let us = mean + sd * wt.resid.sqrt() * rng.sample::<f64, _>(StandardNormal);
                log_v += sigmoid(us).ln();
                z_row[col] = rng.random::<f64>() < log_v.exp();
                if z_row[col] {
                    presence[s][col] += 1.0;
                }
            }
            if let Some(m) = model.as_deref() {
                let mu = m.predictive_mean(&z_row);
                match &mut means[s] {
                    Some(acc) => acc.iter_mut().zip(&mu).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(mu),
                }
            }
        }
    }
    let n = chain.len() as f64;
    Ok(sites
        .iter()
        .zip(presence)
        .zip(means)
        .map(|((site, p), mean)| FactorPrediction {
            site: site.clone(),
            presence: p.into_iter().map(|v| v / n).collect(),
            mean: mean.map(|m| m.into_iter().map(|v| v / n).collect()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Draw;
    use crate::multinomial::{MultinomialData, MultinomialModel};
    use crate::prior::delta_p;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed_chain(u: Vec<f64>, n: usize, k: usize, kernel: KernelSpec, draws: usize, tau: f64) -> ChainOutput {
        let d = Draw { iteration: 0, tau, mu: 0.0, psi: kernel.params(), z: vec![0; n * k], theta: vec![], u: Some(u) };
        ChainOutput { n_subjects: n, n_factors: k, kernel, draws: vec![d; draws], psi_acceptance: 0.0 }
    }

    fn sites() -> Vec<Location> {
        vec![Location::new("a", 0.0, 0.0), Location::new("b", 0.3, 0.1), Location::new("c", -0.2, 0.4)]
    }

    #[test]
    fn observed_site_reproduces_sticks() {
        let kernel = KernelSpec::exponential(0.5).unwrap();
        let u = vec![1.0, -0.5, 0.3, 2.0, -1.0, 0.0];
        let chain = fixed_chain(u.clone(), 3, 2, kernel, 20_000, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = predict_factors::<MultinomialModel, _>(&[sites()[1].clone()], &sites(), &chain, LatentBackend::Dense, None, &mut rng)
            .unwrap();
        let v1 = sigmoid(u[2]);
        let v2 = v1 * sigmoid(u[3]);
        for (est, truth) in p[0].presence.iter().zip([v1, v2]) {
            let se = (truth * (1.0 - truth) / 20_000.0).sqrt();
            assert!((est - truth).abs() < 4.0 * se, "{est} vs {truth}");
        }
    }

    #[test]
    fn distant_site_reverts_to_prior() {
        let kernel = KernelSpec::exponential(0.1).unwrap();
        let chain = fixed_chain(vec![3.0; 6], 3, 2, kernel, 40_000, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let far = Location::new("far", 1e4, 1e4);
        let p = predict_factors::<MultinomialModel, _>(&[far], &sites(), &chain, LatentBackend::Dense, None, &mut rng).unwrap();
        let d1 = delta_p(1, 0.0, 1.0).unwrap();
        for (k, est) in p[0].presence.iter().enumerate() {
            let truth = d1.powi(k as i32 + 1);
            let se = (truth * (1.0 - truth) / 40_000.0).sqrt();
            assert!((est - truth).abs() < 4.0 * se);
        }
    }

    #[test]
    fn single_factor_matches_quadrature() {
        // K = 1, n = 1: u(s) | u_1 ~ N(ρu_1, 1 − ρ²), P(z = 1) = E σ(u(s)).
        let kernel = KernelSpec::exponential(1.0).unwrap();
        let obs = vec![Location::new("o", 0.0, 0.0)];
        let site = Location::new("s", 0.5, 0.0);
        let rho = (-0.5f64).exp();
        let chain = fixed_chain(vec![1.2], 1, 1, kernel, 50_000, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = predict_factors::<MultinomialModel, _>(&[site], &obs, &chain, LatentBackend::Dense, None, &mut rng).unwrap();
        let mean = rho * 1.2;
        let sd = (1.0 - rho * rho).sqrt();
        let h = 1e-3;
        let oracle: f64 = (-8000..8000)
            .map(|j| {
                let x = j as f64 * h;
                sigmoid(mean + sd * x) * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() * h
            })
            .sum();
        let se = (oracle * (1.0 - oracle) / 50_000.0).sqrt();
        assert!((p[0].presence[0] - oracle).abs() < 3.0 * se);
    }

    #[test]
    fn nngp_backend_with_all_neighbors_matches_dense() {
        let kernel = KernelSpec::exponential(0.5).unwrap();
        let chain = fixed_chain(vec![0.4, -0.2, 1.0, 0.1, -0.7, 0.9], 3, 2, kernel, 500, 2.0);
        let site = Location::new("n", 0.1, 0.2);
        let run = |backend| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            predict_factors::<MultinomialModel, _>(&[site.clone()], &sites(), &chain, backend, None, &mut rng).unwrap()
        };
        let a = run(LatentBackend::Dense);
        let b = run(LatentBackend::Nngp { neighbors: 3 });
        for (x, y) in a[0].presence.iter().zip(&b[0].presence) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_means_are_averaged() {
        let data = MultinomialData::from_labels(&[vec![Some(1)], vec![Some(2)], vec![Some(3)]], None).unwrap();
        let mut model = MultinomialModel::new(data, 2);
        let mut chain = fixed_chain(vec![0.0; 6], 3, 2, KernelSpec::exponential(0.5).unwrap(), 10, 1.0);
        for d in &mut chain.draws {
            d.theta = model.params_flat();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = predict_factors(&sites()[..1], &sites(), &chain, LatentBackend::Dense, Some(&mut model), &mut rng).unwrap();
        let mean = p[0].mean.as_ref().unwrap();
        assert_eq!(mean.len(), 3);
        for v in mean {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn requires_stored_u() {
        let mut chain = fixed_chain(vec![0.0; 6], 3, 2, KernelSpec::Exchangeable, 1, 1.0);
        chain.draws[0].u = None;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let err = predict_factors::<MultinomialModel, _>(&sites(), &sites(), &chain, LatentBackend::Dense, None, &mut rng);
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn exchangeable_uses_shared_value() {
        let chain = fixed_chain(vec![5.0, -5.0, 5.0, -5.0, 5.0, -5.0], 3, 2, KernelSpec::Exchangeable, 2000, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let far = Location::new("far", 100.0, 100.0);
        let p = predict_factors::<MultinomialModel, _>(&[far], &sites(), &chain, LatentBackend::Dense, None, &mut rng).unwrap();
        let v1 = sigmoid(5.0);
        assert!((p[0].presence[0] - v1).abs() < 0.01);
        assert!((p[0].presence[1] - v1 * sigmoid(-5.0)).abs() < 0.01);
    }
}
