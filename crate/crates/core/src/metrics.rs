//! Rand index, prediction MSE and DIC.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryMatrix;
use crate::chain::ChainOutput;
use crate::error::{Error, Result};
use crate::gibbs::ObservationModel;

/// Fraction of subject pairs on which two binary partitions agree.
pub fn rand_index(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("partitions of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("rand index needs at least two subjects"));
    }
    // Count pairs via the 2×2 contingency table.
    let mut t = [[0u64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        t[x as usize][y as usize] += 1;
    }
    let c2 = |v: u64| v * v.saturating_sub(1) / 2;
    let same_both: u64 = t.iter().flatten().map(|&v| c2(v)).sum();
    let same_a = c2(t[0][0] + t[0][1]) + c2(t[1][0] + t[1][1]);
    let same_b = c2(t[0][0] + t[1][0]) + c2(t[0][1] + t[1][1]);
    let total = c2(n as u64);
    let disagree = (same_a - same_both) + (same_b - same_both);
    Ok((total - disagree) as f64 / total as f64)
}

/// Columns of a presence matrix in which some subject exceeds `threshold`.
pub fn non_null_factors(presence: &DMatrix<f64>, threshold: f64) -> Vec<usize> {
    (0..presence.ncols())
        .filter(|&k| presence.column(k).iter().any(|&p| p > threshold))
        .collect()
}

/// Thresholded memberships of column `k`.
pub fn membership(presence: &DMatrix<f64>, k: usize, threshold: f64) -> Vec<bool> {
    presence.column(k).iter().map(|&p| p > threshold).collect()
}

/// For each true factor, the rand index with its estimated factor under the
/// one-to-one assignment maximizing the total rand index. True factors left
/// without a partner (fewer estimates than truths) score 0.
pub fn matched_rand_indices(truth: &[Vec<bool>], estimates: &[Vec<bool>]) -> Result<Vec<f64>> {
    let mut scores = vec![vec![0.0; estimates.len()]; truth.len()];
    for (t, row) in truth.iter().zip(scores.iter_mut()) {
        for (e, s) in estimates.iter().zip(row.iter_mut()) {
            *s = rand_index(t, e)?;
        }
    }
    let mut best = (f64::NEG_INFINITY, vec![None; truth.len()]);
    let mut current = vec![None; truth.len()];
    let mut used = vec![false; estimates.len()];
    assign(0, 0.0, &scores, &mut used, &mut current, &mut best);
    Ok(best.1.iter().enumerate().map(|(t, e)| e.map_or(0.0, |e| scores[t][e])).collect())
}

fn assign(
    t: usize,
    total: f64,
    scores: &[Vec<f64>],
    used: &mut [bool],
    current: &mut Vec<Option<usize>>,
    best: &mut (f64, Vec<Option<usize>>),
) {
    if t == scores.len() {
        if total > best.0 {
            *best = (total, current.clone());
        }
        return;
    }
    let mut any = false;
    for e in 0..used.len() {
        if !used[e] {
            any = true;
            used[e] = true;
            current[t] = Some(e);
            assign(t + 1, total + scores[t][e], scores, used, current, best);
            used[e] = false;
        }
    }
    if !any || used.len() < scores.len() {
        current[t] = None;
        assign(t + 1, total, scores, used, current, best);
    }
}

/// (n_test·M)^{-1} Σ_i Σ_m Σ_l (π̂_iml − π_iml)², indexed [site][feature][category].
pub fn prediction_mse(estimated: &[Vec<Vec<f64>>], truth: &[Vec<Vec<f64>>]) -> Result<f64> {
    if estimated.len() != truth.len() || estimated.is_empty() {
        return Err(Error::Shape(format!("{} estimated sites vs {} true sites", estimated.len(), truth.len())));
    }
    let m = truth[0].len();
    if m == 0 {
        return Err(Error::Shape("no features".into()));
    }
    let mut total = 0.0;
    for (e_site, t_site) in estimated.iter().zip(truth) {
        if e_site.len() != m || t_site.len() != m {
            return Err(Error::Shape("feature counts differ between sites".into()));
        }
        for (e, t) in e_site.iter().zip(t_site) {
            if e.len() != t.len() {
                return Err(Error::Shape("category counts differ".into()));
            }
            total += e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total / (truth.len() * m) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    /// Posterior mean deviance D̄.
    pub mean_deviance: f64,
    /// Deviance at the plug-in point.
    pub plugin_deviance: f64,
    pub p_d: f64,
    pub dic: f64,
}

/// DIC = D̄ + p_D with D = −2 Σ_i log f(x_i | z_i, Θ). The plug-in point
/// uses posterior means of Θ and the componentwise posterior mode of Z.
/// `model` is left holding the plug-in parameters.
pub fn dic<M: ObservationModel>(chain: &ChainOutput, model: &mut M) -> Result<Dic> {
    if chain.is_empty() {
        return Err(Error::invalid("chain has no draws"));
    }
    let mut mean_dev = 0.0;
    let mut theta_mean = vec![0.0; chain.draws[0].theta.len()];
    for (d, draw) in chain.draws.iter().enumerate() {
        model.set_params_flat(&draw.theta)?;
        mean_dev += -2.0 * model.loglik_total(&chain.z(d));
        theta_mean.iter_mut().zip(&draw.theta).for_each(|(a, v)| *a += v);
    }
    let n = chain.len() as f64;
    mean_dev /= n;
    theta_mean.iter_mut().for_each(|v| *v /= n);
    let presence = chain.presence();
    let mut z_mode = BinaryMatrix::zeros(chain.n_subjects, chain.n_factors);
    for i in 0..chain.n_subjects {
        for k in 0..chain.n_factors {
            z_mode.set(i, k, presence[(i, k)] > 0.5);
        }
    }
    model.set_params_flat(&theta_mean)?;
    let plugin = -2.0 * model.loglik_total(&z_mode);
    let p_d = mean_dev - plugin;
    Ok(Dic { mean_deviance: mean_dev, plugin_deviance: plugin, p_d, dic: mean_dev + p_d })
}
