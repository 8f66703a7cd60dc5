//! Repulsive prior on the factor parameter blocks.
//!
//! The joint prior is Π_k π(θ_k) · min_{k<k'} g(‖θ_k − θ_k'‖) with
//! g(x) = I(x > δ)(1 − δ/x). Parameter updates draw proposals from the
//! non-repulsive full conditional, so the Metropolis correction is the ratio
//! of the min-g terms before and after.

use rand::Rng;

/// Default repulsion threshold δ.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// g(x) = I(x > δ)(1 − δ/x).
pub fn repulsion_g(x: f64, delta: f64) -> f64 {
    if x > delta {
        1.0 - delta / x
    } else {
        0.0
    }
}

/// min over the other blocks of g(‖θ − θ_k'‖); 1 when there are none.
pub fn g_min(theta: &[f64], others: &[&[f64]], delta: f64) -> f64 {
    others
        .iter()
        .map(|o| {
            let d2: f64 = theta.iter().zip(o.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            repulsion_g(d2.sqrt(), delta)
        })
        .fold(1.0, f64::min)
}

/// Acceptance probability min(1, g_new / g_cur). A current state outside
/// the prior support (g_cur = 0) accepts any move.
pub fn acceptance_probability(g_new: f64, g_cur: f64) -> f64 {
    if g_cur <= 0.0 {
        1.0
    } else {
        (g_new / g_cur).min(1.0)
    }
}

/// Metropolis step for replacing `current` by `proposal` among `others`.
pub fn repulsive_accept<R: Rng + ?Sized>(
    proposal: &[f64],
    current: &[f64],
    others: &[&[f64]],
    delta: f64,
    rng: &mut R,
) -> bool {
    let p = acceptance_probability(g_min(proposal, others, delta), g_min(current, others, delta));
    p >= 1.0 || rng.random::<f64>() < p
}

/// Squared pairwise distances between K factor blocks, kept in sync while
/// single coordinates of every block change at once.
#[derive(Debug, Clone)]
pub struct PairDistances {
    k: usize,
    d2: Vec<f64>,
}

impl PairDistances {
    /// `coord(k, c)` returns coordinate c of block k; blocks have `len` coordinates.
    pub fn new(k: usize, len: usize, coord: impl Fn(usize, usize) -> f64) -> Self {
        let mut d2 = vec![0.0; k * k];
        for a in 0..k {
            for b in (a + 1)..k {
                let s: f64 = (0..len).map(|c| (coord(a, c) - coord(b, c)).powi(2)).sum();
                d2[a * k + b] = s;
            }
        }
        Self { k, d2 }
    }

    /// min_{k<k'} g over the current configuration.
    pub fn g(&self, delta: f64) -> f64 {
        let mut best = 1.0f64;
        for a in 0..self.k {
            for b in (a + 1)..self.k {
                best = best.min(repulsion_g(self.d2[a * self.k + b].max(0.0).sqrt(), delta));
            }
        }
        best
    }

    /// min g after replacing one coordinate, whose old and new values per
    /// block are `old[k]` and `new[k]`.
    pub fn g_after(&self, old: &[f64], new: &[f64], delta: f64) -> f64 {
        let mut best = 1.0f64;
        for a in 0..self.k {
            for b in (a + 1)..self.k {
                let d = self.shifted(a, b, old, new);
                best = best.min(repulsion_g(d.max(0.0).sqrt(), delta));
            }
        }
        best
    }

    pub fn commit(&mut self, old: &[f64], new: &[f64]) {
        for a in 0..self.k {
            for b in (a + 1)..self.k {
                self.d2[a * self.k + b] = self.shifted(a, b, old, new);
            }
        }
    }

    #[inline]
    fn shifted(&self, a: usize, b: usize, old: &[f64], new: &[f64]) -> f64 {
        let dn = new[a] - new[b];
        let d0 = old[a] - old[b];
        self.d2[a * self.k + b] + dn * dn - d0 * d0
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        self.d2[a * self.k + b].max(0.0).sqrt()
    }
}
