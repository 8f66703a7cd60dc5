//! Synthetic multinomial data sets with known spatial factor structure.
//!
//! Sites are uniform on [−1, 1]². Scenarios I and II place three factors as
//! indicator regions of the plane with random loadings θ_kml; Scenario III
//! has no factor structure and builds the probabilities directly from the
//! coordinates.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::binary::BinaryMatrix;
use crate::error::{Error, Result};
use crate::kernels::Location;
use crate::multinomial::MultinomialData;
use crate::numeric::log_sum_exp;

/// Floor applied to Scenario III's unnormalized weights, which go negative
/// where s_1 < 0.
pub const SCENARIO_III_FLOOR: f64 = 1e-6;

/// Number of true factors in Scenarios I and II.
pub const TRUE_FACTORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    I,
    II,
    III,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Self::I),
            "II" | "2" => Ok(Self::II),
            "III" | "3" => Ok(Self::III),
            other => Err(Error::invalid(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: ScenarioKind,
    pub n: usize,
    pub n_test: usize,
    pub features: usize,
    pub categories: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: ScenarioKind, n: usize, n_test: usize, seed: u64) -> Self {
        Self { scenario, n, n_test, features: 50, categories: 5, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if self.categories < 2 {
            return Err(Error::invalid("at least two categories are required"));
        }
        if self.features == 0 {
            return Err(Error::invalid("at least one feature is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub locations: Vec<Location>,
    pub test_locations: Vec<Location>,
    /// True memberships at the training sites (Scenarios I and II only).
    pub true_z: Option<BinaryMatrix>,
    pub true_z_test: Option<BinaryMatrix>,
    /// True probabilities, indexed [site][feature][category].
    pub probs: Vec<Vec<Vec<f64>>>,
    pub test_probs: Vec<Vec<Vec<f64>>>,
    pub data: MultinomialData,
}

/// Factor indicators of Scenario I at one site.
pub fn scenario_i_factors(s: (f64, f64)) -> [bool; 3] {
    let (s1, s2) = s;
    [s1 * s1 + s2 * s2 < 0.81, s1 < 0.5 && s2 > 0.0, s1 < s2 - 0.7]
}

/// Factor indicators of Scenario II at one site.
pub fn scenario_ii_factors(s: (f64, f64)) -> [bool; 3] {
    let (s1, s2) = s;
    [s1 < 0.0, s2.abs() > s1, s1 > 0.5 && s2 < -0.5]
}

fn uniform_sites<R: Rng + ?Sized>(n: usize, prefix: &str, rng: &mut R) -> Vec<Location> {
    let u = Uniform::new(-1.0, 1.0).expect("valid bounds");
    (0..n)
        .map(|i| {
            let x = u.sample(rng);
            let y = u.sample(rng);
            Location::new(format!("{prefix}{}", i + 1), x, y)
        })
        .collect()
}

/// Loadings θ_kml for the three factors; entry [k] is an M × L matrix.
fn loadings<R: Rng + ?Sized>(kind: ScenarioKind, m: usize, l: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    let normal = |mean: f64, var: f64| Normal::new(mean, var.sqrt()).expect("positive variance");
    let draw = |rng: &mut R, f: &dyn Fn(&mut R) -> f64| DMatrix::from_fn(m, l, |_, _| f(rng));
    match kind {
        ScenarioKind::I => {
            let (a, b, c) = (normal(1.0, 1.0), normal(0.5, 2.25), normal(0.0, 4.0));
            vec![draw(rng, &|r| a.sample(r)), draw(rng, &|r| b.sample(r)), draw(rng, &|r| c.sample(r))]
        }
        ScenarioKind::II => {
            let (a, b) = (normal(1.0, 3.0), normal(0.5, 2.25));
            let t = StudentT::new(3.0).expect("positive degrees of freedom");
            vec![
                draw(rng, &|r| a.sample(r)),
                draw(rng, &|r| b.sample(r)),
                draw(rng, &|r| 2.0 + t.sample(r)),
            ]
        }
        ScenarioKind::III => Vec::new(),
    }
}

fn factor_probs(z: &[bool], theta: &[DMatrix<f64>], m: usize, l: usize) -> Vec<f64> {
    let lp: Vec<f64> = (0..l)
        .map(|c| z.iter().zip(theta).filter(|(on, _)| **on).map(|(_, t)| t[(m, c)]).sum())
        .collect();
    let lse = log_sum_exp(&lp);
    lp.iter().map(|v| (v - lse).exp()).collect()
}

fn scenario_iii_probs(s: (f64, f64), cuts: &DMatrix<f64>, m: usize) -> Vec<f64> {
    let (s1, s2) = s;
    let w: Vec<f64> = (0..cuts.ncols())
        .map(|c| {
            let raw = if s2 > cuts[(m, c)] * s1 { s1 } else { s1 * s1 + s2 * s2 };
            raw.max(SCENARIO_III_FLOOR)
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return c;
        }
    }
    p.len() - 1
}

/// Draws a data set. Draw order: training sites, test sites, loadings (or
/// Scenario III cut slopes), then observations.
pub fn generate_scenario<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Scenario> {
    spec.validate()?;
    let (m, l) = (spec.features, spec.categories);
    let locations = uniform_sites(spec.n, "s", rng);
    let test_locations = uniform_sites(spec.n_test, "t", rng);

    let (probs_at, true_z, true_z_test): (Box<dyn Fn(&Location) -> Vec<Vec<f64>>>, _, _) = match spec.scenario {
        ScenarioKind::I | ScenarioKind::II => {
            let factors = if spec.scenario == ScenarioKind::I { scenario_i_factors } else { scenario_ii_factors };
            let theta = loadings(spec.scenario, m, l, rng);
            let zmat = |sites: &[Location]| {
                BinaryMatrix::from_rows(&sites.iter().map(|s| factors((s.coords[0], s.coords[1])).to_vec()).collect::<Vec<_>>())
            };
            let (z, zt) = (zmat(&locations), zmat(&test_locations));
            let f = move |s: &Location| {
                let z = factors((s.coords[0], s.coords[1]));
                (0..m).map(|f| factor_probs(&z, &theta, f, l)).collect()
            };
            (Box::new(f), Some(z), Some(zt))
        }
        ScenarioKind::III => {
            let u = Uniform::new(-2.0, 2.0).expect("valid bounds");
            let cuts = DMatrix::from_fn(m, l, |_, _| u.sample(rng));
            let f = move |s: &Location| (0..m).map(|f| scenario_iii_probs((s.coords[0], s.coords[1]), &cuts, f)).collect();
            (Box::new(f), None, None)
        }
    };
    let probs: Vec<Vec<Vec<f64>>> = locations.iter().map(&probs_at).collect();
    let test_probs: Vec<Vec<Vec<f64>>> = test_locations.iter().map(&probs_at).collect();
    let rows: Vec<Vec<Option<usize>>> = probs
        .iter()
        .map(|site| site.iter().map(|p| Some(categorical(p, rng) + 1)).collect())
        .collect();
    let data = MultinomialData::from_labels(&rows, Some(vec![l; m]))?;
    Ok(Scenario { spec: *spec, locations, test_locations, true_z, true_z_test, probs, test_probs, data })
}

/// `generate_scenario` with a generator seeded from `spec.seed`.
pub fn generate_seeded(spec: &ScenarioSpec) -> Result<Scenario> {
    generate_scenario(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}
