//! Small numerically careful scalar helpers.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Logistic function 1 / (1 + e^{-x}).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) = -log(1 + e^{-x}).
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// log(1 - e^{a}) for a <= 0.
#[inline]
pub fn log1m_exp(a: f64) -> f64 {
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Nodes and weights of the n-point Gauss-Hermite rule for weight e^{-x^2}.
///
/// Starting points come from the eigenvalues of the Jacobi matrix; each node
/// is then polished by Newton steps on the orthonormal recurrence, which also
/// yields the weight.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guesses.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = guesses[i];
        let mut pp = 0.0;
        let mut log_scale = 0.0;
        for _ in 0..50 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            log_scale = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                // the orthonormal polynomials grow like e^{z^2/2}
                if p1.abs() > 1e200 {
                    p1 *= 1e-200;
                    p2 *= 1e-200;
                    log_scale += 200.0 * std::f64::consts::LN_10;
                }
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 * (-2.0 * log_scale).exp() / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

const RULE_SIZES: [usize; 4] = [64, 128, 256, 512];

fn cached_rule(slot: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static RULES: [OnceLock<(Vec<f64>, Vec<f64>)>; 4] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RULES[slot].get_or_init(|| gauss_hermite(RULE_SIZES[slot]))
}

/// E[f(X)] for X ~ N(mean, sd^2) by Gauss-Hermite quadrature, doubling the
/// node count from 64 (up to 512) until successive estimates agree to `tol`.
pub fn normal_expectation(f: impl Fn(f64) -> f64, mean: f64, sd: f64, tol: f64) -> f64 {
    let rule = |slot: usize| {
        let (x, w) = cached_rule(slot);
        x.iter()
            .zip(w)
            .map(|(xi, wi)| wi * f(mean + std::f64::consts::SQRT_2 * sd * xi))
            .sum::<f64>()
            / PI.sqrt()
    };
    let mut prev = rule(0);
    for slot in 1..RULE_SIZES.len() {
        let next = rule(slot);
        if (next - prev).abs() < tol {
            return next;
        }
        prev = next;
    }
    prev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_helpers() {
        for &x in &[-800.0, -30.0, -1.0, 0.0, 2.0, 40.0, 800.0] {
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s));
            if s > 0.0 {
                assert!((log_sigmoid(x) - s.ln()).abs() < 1e-12 * s.ln().abs().max(1.0));
            }
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log1m_exp(-1e-20) - (1e-20f64).ln()).abs() < 1e-9);
        assert!((log1m_exp(-3.0) - (1.0 - (-3.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn hermite_rule_integrates_polynomials() {
        for n in [5, 64, 128, 256, 512] {
            let (x, w) = gauss_hermite(n);
            let total: f64 = w.iter().sum();
            assert!((total - PI.sqrt()).abs() < 1e-12, "n = {n}: {total}");
            // int x^4 e^{-x^2} = 3 sqrt(pi) / 4
            let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
            assert!((m4 - 0.75 * PI.sqrt()).abs() < 1e-11);
        }
    }

    #[test]
    fn normal_expectation_of_moments() {
        let m2 = normal_expectation(|x| x * x, 1.5, 0.7, 1e-12);
        assert!((m2 - (1.5 * 1.5 + 0.49)).abs() < 1e-12);
    }
}
