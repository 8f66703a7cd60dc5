//! Multinomial factor model: x_im ~ Categorical(softmax_l(η_ml + Σ_k z_ik θ_kml)).
//!
//! Category 1 is the reference (η_m1 = θ_km1 = 0). Each block
//! Θ_ml = (η_ml, θ_1ml, …, θ_Kml), l ≥ 2, is drawn from its one-vs-rest
//! Pólya-gamma conditional given the other categories of feature m.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::binary::BinaryMatrix;
use crate::error::{Error, Result};
use crate::gibbs::{GammaPrior, ObservationModel};
use crate::linalg;
use crate::numeric::log_sum_exp;
use crate::pg;
use crate::repulsion::{acceptance_probability, PairDistances};

/// Categorical observations with 0-based categories and missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialData {
    n: usize,
    m: usize,
    values: Vec<Option<u16>>,
    categories: Vec<usize>,
}

impl MultinomialData {
    /// Rows of 1-based labels (`None` = missing). `categories` gives c_m per
    /// feature; when absent c_m is the largest observed label (at least 2).
    pub fn from_labels(rows: &[Vec<Option<usize>>], categories: Option<Vec<usize>>) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("rows have different numbers of features".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * m);
        for (i, row) in rows.iter().enumerate() {
            for (f, v) in row.iter().enumerate() {
                match *v {
                    Some(0) => {
                        return Err(Error::invalid(format!("row {i}, feature {f}: labels are 1-based")));
                    }
                    Some(l) if l > u16::MAX as usize => {
                        return Err(Error::invalid(format!("row {i}, feature {f}: label {l} too large")));
                    }
                    Some(l) => values.push(Some((l - 1) as u16)),
                    None => values.push(None),
                }
            }
        }
        let observed_max: Vec<usize> = (0..m)
            .map(|f| {
                (0..rows.len())
                    .filter_map(|i| values[i * m + f])
                    .map(|v| v as usize + 1)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let categories = match categories {
            Some(c) => {
                if c.len() != m {
                    return Err(Error::Shape(format!("{} category counts for {m} features", c.len())));
                }
                for (f, (&cm, &mx)) in c.iter().zip(&observed_max).enumerate() {
                    if cm < 2 {
                        return Err(Error::invalid(format!("feature {f} needs at least 2 categories")));
                    }
                    if mx > cm {
                        return Err(Error::invalid(format!("feature {f}: label {mx} exceeds {cm} categories")));
                    }
                }
                c
            }
            None => observed_max.iter().map(|&mx| mx.max(2)).collect(),
        };
        Ok(Self { n: rows.len(), m, values, categories })
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.m
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    /// 0-based category of cell (i, m).
    #[inline]
    pub fn get(&self, i: usize, m: usize) -> Option<usize> {
        self.values[i * self.m + m].map(usize::from)
    }

    /// 1-based labels of row i.
    pub fn labels(&self, i: usize) -> Vec<Option<usize>> {
        (0..self.m).map(|f| self.get(i, f).map(|v| v + 1)).collect()
    }

    pub fn is_missing(&self, i: usize, m: usize) -> bool {
        self.values[i * self.m + m].is_none()
    }

    /// Row-major missingness mask.
    pub fn missing_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_none()).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    fn set(&mut self, i: usize, m: usize, v: usize) {
        self.values[i * self.m + m] = Some(v as u16);
    }
}

/// (η, θ) for all features plus the prior precisions γ_0..γ_K.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialParams {
    /// Per feature a c_m × (K+1) matrix: row l is Θ_ml, column 0 holds η.
    /// Row 0 stays zero.
    pub coef: Vec<DMatrix<f64>>,
    pub gammas: Vec<f64>,
}

impl MultinomialParams {
    pub fn zeros(categories: &[usize], k: usize) -> Self {
        Self {
            coef: categories.iter().map(|&c| DMatrix::zeros(c, k + 1)).collect(),
            gammas: vec![1.0; k + 1],
        }
    }

    pub fn n_factors(&self) -> usize {
        self.gammas.len() - 1
    }

    pub fn flat_len(&self) -> usize {
        self.coef.iter().map(|c| (c.nrows() - 1) * c.ncols()).sum()
    }

    /// Linear predictors η_ml + Σ_k z_k θ_kml for l = 0..c_m.
    fn linear_predictor(&self, z_row: &[bool], m: usize, out: &mut Vec<f64>) {
        let c = &self.coef[m];
        out.clear();
        out.extend(c.column(0).iter());
        for (k, &on) in z_row.iter().enumerate() {
            if on {
                for (o, v) in out.iter_mut().zip(c.column(k + 1).iter()) {
                    *o += v;
                }
            }
        }
    }

    fn assert_identifiable(&self) {
        debug_assert!(self.coef.iter().all(|c| c.row(0).iter().all(|&v| v == 0.0)));
    }
}

/// Softmax probabilities of feature m for a subject with binary row `z_row`.
pub fn multinomial_probs(z_row: &[bool], params: &MultinomialParams, m: usize) -> Vec<f64> {
    let mut lp = Vec::new();
    params.linear_predictor(z_row, m, &mut lp);
    let lse = log_sum_exp(&lp);
    lp.iter().map(|v| (v - lse).exp()).collect()
}

/// Σ_m log π_{i m x_im} over the observed cells of `row` (0-based categories).
pub fn loglik(row: &[Option<usize>], z_row: &[bool], params: &MultinomialParams) -> f64 {
    let mut lp = Vec::new();
    row.iter()
        .enumerate()
        .filter_map(|(m, x)| x.map(|x| (m, x)))
        .map(|(m, x)| {
            params.linear_predictor(z_row, m, &mut lp);
            lp[x] - log_sum_exp(&lp)
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct MultinomialModel {
    data: MultinomialData,
    params: MultinomialParams,
    /// Current imputations, aligned with the missing cells in row-major order.
    imputed: Vec<u16>,
    accepted: usize,
    proposed: usize,
    /// e^{θ} and e^{−θ} per feature, refreshed whenever Θ changes.
    exp_pos: Vec<DMatrix<f64>>,
    exp_neg: Vec<DMatrix<f64>>,
    /// Optional Gamma hyperprior on γ_1..γ_K, resampled each sweep.
    effect_prior: Option<GammaPrior>,
}

impl MultinomialModel {
    pub fn new(data: MultinomialData, k: usize) -> Self {
        let params = MultinomialParams::zeros(&data.categories, k);
        let imputed = vec![0; data.missing_count()];
        let mut model = Self { data, params, imputed, accepted: 0, proposed: 0, exp_pos: Vec::new(), exp_neg: Vec::new(), effect_prior: None };
        model.refresh_exp();
        model
    }

    fn refresh_exp(&mut self) {
        self.exp_pos = self.params.coef.iter().map(|c| c.map(f64::exp)).collect();
        self.exp_neg = self.params.coef.iter().map(|c| c.map(|v| (-v).exp())).collect();
    }

    /// Prior precisions γ_0 (baselines) and γ_1..γ_K (factor effects).
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

    /// Treats the effect precisions as unknown with a Gamma hyperprior.
    pub fn with_effect_prior(mut self, prior: GammaPrior) -> Result<Self> {
        prior.validate()?;
        self.effect_prior = Some(prior);
        Ok(self)
    }

    pub fn effect_prior(&self) -> Option<GammaPrior> {
        self.effect_prior
    }

    fn update_effect_precisions<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let Some(prior) = self.effect_prior else { return Ok(()) };
        for k in 0..self.params.n_factors() {
            let block = self.factor_block(k);
            let ss: f64 = block.iter().map(|v| v * v).sum();
            let shape = prior.shape + 0.5 * block.len() as f64;
            let rate = prior.rate + 0.5 * ss;
            let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng);
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Numerical(format!("effect precision draw {g}")));
            }
            self.params.gammas[k + 1] = g;
        }
        Ok(())
    }

    pub fn data(&self) -> &MultinomialData {
        &self.data
    }

    pub fn params(&self) -> &MultinomialParams {
        &self.params
    }

    pub fn set_params(&mut self, params: MultinomialParams) -> Result<()> {
        if params.coef.len() != self.params.coef.len()
            || params.coef.iter().zip(&self.params.coef).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("parameter shapes differ from the data".into()));
        }
        self.params = params;
        self.refresh_exp();
        Ok(())
    }

    /// Current imputations as (i, m, 0-based category).
    pub fn imputations(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.imputed.len());
        let mut idx = 0;
        for i in 0..self.data.n {
            for m in 0..self.data.m {
                if self.data.is_missing(i, m) {
                    out.push((i, m, self.imputed[idx] as usize));
                    idx += 1;
                }
            }
        }
        out
    }

    /// Fraction of Θ proposals that passed the repulsive correction.
    pub fn repulsion_acceptance(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn flat_coordinates(&self) -> usize {
        self.params.coef.iter().map(|c| c.nrows() - 1).sum()
    }

    fn pair_distances(&self) -> PairDistances {
        let k = self.params.n_factors();
        let blocks: Vec<Vec<f64>> = (0..k).map(|j| self.factor_block(j)).collect();
        PairDistances::new(k, self.flat_coordinates(), |a, c| blocks[a][c])
    }

    /// Exact draw of Θ_ml from its augmented conditional, without repulsion.
    ///
    /// `lp` holds the current linear predictors of feature m for every
    /// subject (n × c_m), `cache` their exponentials relative to a per-subject
    /// shift, and `active[i]` the design columns of subject i.
    fn draw_block<R: Rng + ?Sized>(
        &self,
        m: usize,
        l: usize,
        lp: &DMatrix<f64>,
        cache: &ExpCache,
        active: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let d = self.params.n_factors() + 1;
        let c_m = self.data.categories[m];
        let mut a = DMatrix::from_diagonal(&DVector::from_column_slice(&self.params.gammas));
        let mut b = DVector::zeros(d);
        for (i, act) in active.iter().enumerate() {
            let Some(x) = self.data.get(i, m) else { continue };
            let others: f64 = (0..c_m).filter(|&q| q != l).map(|q| cache.exp[(i, q)]).sum();
            let c = if others > 0.0 {
                cache.shift[i] + others.ln()
            } else {
                let rest: Vec<f64> = (0..c_m).filter(|&q| q != l).map(|q| lp[(i, q)]).collect();
                log_sum_exp(&rest)
            };
            let omega = pg::draw(1.0, lp[(i, l)] - c, rng);
            let kappa = if x == l { 0.5 } else { -0.5 };
            let r = kappa + omega * c;
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
            return Err(Error::Numerical(format!("non-finite draw for block ({m}, {l})")));
        }
        Ok(draw)
    }

    /// Updates all blocks Θ_m2..Θ_mc_m of feature m.
    fn update_feature<R: Rng + ?Sized>(
        &mut self,
        m: usize,
        active: &[Vec<usize>],
        pairs: &mut PairDistances,
        delta: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n = self.data.n;
        let c_m = self.data.categories[m];
        let k = self.params.n_factors();
        let mut lp = DMatrix::zeros(n, c_m);
        for (i, act) in active.iter().enumerate() {
            for l in 0..c_m {
                lp[(i, l)] = act.iter().map(|&p| self.params.coef[m][(l, p)]).sum();
            }
        }
        let mut cache = ExpCache::new(&lp);
        let mut old = vec![0.0; k];
        let mut new = vec![0.0; k];
        for l in 1..c_m {
            let draw = self.draw_block(m, l, &lp, &cache, active, rng)?;
            for j in 0..k {
                old[j] = self.params.coef[m][(l, j + 1)];
                new[j] = draw[j + 1];
            }
            self.proposed += 1;
            let p = acceptance_probability(pairs.g_after(&old, &new, delta), pairs.g(delta));
            if p >= 1.0 || rng.random::<f64>() < p {
                self.accepted += 1;
                pairs.commit(&old, &new);
                for (j, v) in draw.iter().enumerate() {
                    self.params.coef[m][(l, j)] = *v;
                }
                for (i, act) in active.iter().enumerate() {
                    lp[(i, l)] = act.iter().map(|&p| draw[p]).sum();
                    cache.update(&lp, i, l);
                }
            }
        }
        Ok(())
    }

    /// Draws every missing cell from its current categorical distribution.
    pub fn impute_missing<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, rng: &mut R) {
        let mut idx = 0;
        for i in 0..self.data.n {
            for m in 0..self.data.m {
                if self.data.is_missing(i, m) {
                    let probs = multinomial_probs(z.row(i), &self.params, m);
                    self.imputed[idx] = categorical(&probs, rng) as u16;
                    idx += 1;
                }
            }
        }
    }
}

/// e^{lp_il − shift_i} for one feature; the shift keeps the entries in range.
struct ExpCache {
    shift: Vec<f64>,
    exp: DMatrix<f64>,
}

impl ExpCache {
    /// Largest exponent tolerated before the row is reshifted.
    const MAX_EXPONENT: f64 = 300.0;

    fn new(lp: &DMatrix<f64>) -> Self {
        let mut cache = Self { shift: vec![0.0; lp.nrows()], exp: DMatrix::zeros(lp.nrows(), lp.ncols()) };
        for i in 0..lp.nrows() {
            cache.reshift(lp, i);
        }
        cache
    }

    fn reshift(&mut self, lp: &DMatrix<f64>, i: usize) {
        let shift = lp.row(i).max();
        self.shift[i] = shift;
        for l in 0..lp.ncols() {
            self.exp[(i, l)] = (lp[(i, l)] - shift).exp();
        }
    }

    fn update(&mut self, lp: &DMatrix<f64>, i: usize, l: usize) {
        let e = lp[(i, l)] - self.shift[i];
        if e.abs() > Self::MAX_EXPONENT {
            self.reshift(lp, i);
        } else {
            self.exp[(i, l)] = e.exp();
        }
    }
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (l, &p) in probs.iter().enumerate() {
        if u < p {
            return l;
        }
        u -= p;
    }
    probs.len() - 1
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

fn normal_ln_pdf(x: f64, precision: f64) -> f64 {
    0.5 * (precision / (2.0 * std::f64::consts::PI)).ln() - 0.5 * precision * x * x
}

impl ObservationModel for MultinomialModel {
    fn n_subjects(&self) -> usize {
        self.data.n
    }

    fn n_factors(&self) -> usize {
        self.params.n_factors()
    }

    fn loglik_row(&self, i: usize, z_row: &[bool]) -> f64 {
        let mut lp = Vec::new();
        let mut total = 0.0;
        for m in 0..self.data.m {
            if let Some(x) = self.data.get(i, m) {
                self.params.linear_predictor(z_row, m, &mut lp);
                total += lp[x] - log_sum_exp(&lp);
            }
        }
        total
    }

    /// Scratch per observed feature: [log shift, lp_x, e^{lp_l − shift} for each l].
    fn toggle_init(&self, i: usize, z_row: &[bool], scratch: &mut Vec<f64>) -> f64 {
        let mut lp = Vec::new();
        let mut total = 0.0;
        scratch.clear();
        for m in 0..self.data.m {
            if let Some(x) = self.data.get(i, m) {
                self.params.linear_predictor(z_row, m, &mut lp);
                let shift = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                scratch.push(shift);
                scratch.push(lp[x]);
                let mut sum = 0.0;
                for v in &lp {
                    let e = (v - shift).exp();
                    sum += e;
                    scratch.push(e);
                }
                total += lp[x] - shift - sum.ln();
            }
        }
        total
    }

    fn toggle_eval(&self, i: usize, z_row: &[bool], k: usize, scratch: &[f64]) -> f64 {
        let on = z_row[k];
        let mut total = 0.0;
        let mut pos = 0;
        for m in 0..self.data.m {
            let Some(x) = self.data.get(i, m) else { continue };
            let c = self.data.categories[m];
            let table = if on { &self.exp_pos[m] } else { &self.exp_neg[m] };
            let theta = self.params.coef[m][(x, k + 1)];
            let lp_x = scratch[pos + 1] + if on { theta } else { -theta };
            let mut sum = 0.0;
            for l in 0..c {
                sum += scratch[pos + 2 + l] * table[(l, k + 1)];
            }
            total += lp_x - scratch[pos] - sum.ln();
            pos += 2 + c;
        }
        total
    }

    fn update_params<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, repulsion: f64, rng: &mut R) -> Result<()> {
        let active = active_columns(z);
        let mut pairs = self.pair_distances();
        for m in 0..self.data.m {
            self.update_feature(m, &active, &mut pairs, repulsion, rng)
                .map_err(|e| match e {
                    Error::Factorization(msg) => Error::Factorization(format!("feature {m}: {msg}")),
                    other => other,
                })?;
        }
        self.params.assert_identifiable();
        self.refresh_exp();
        Ok(())
    }

    fn update_extra<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, rng: &mut R) -> Result<()> {
        self.impute_missing(z, rng);
        self.update_effect_precisions(rng)
    }

    fn initialize<R: Rng + ?Sized>(&mut self, repulsion: f64, rng: &mut R) {
        for _ in 0..1000 {
            for c in self.params.coef.iter_mut() {
                for l in 1..c.nrows() {
                    for j in 0..c.ncols() {
                        let sd = self.params.gammas[j].sqrt().recip();
                        c[(l, j)] = sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            if rng.random::<f64>() < self.pair_distances().g(repulsion) {
                break;
            }
        }
        self.refresh_exp();
    }

    fn simulate_observations<R: Rng + ?Sized>(&mut self, z: &BinaryMatrix, rng: &mut R) {
        for i in 0..self.data.n {
            for m in 0..self.data.m {
                if !self.data.is_missing(i, m) {
                    let probs = multinomial_probs(z.row(i), &self.params, m);
                    let x = categorical(&probs, rng);
                    self.data.set(i, m, x);
                }
            }
        }
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.flat_len());
        for c in &self.params.coef {
            for l in 1..c.nrows() {
                out.extend(c.row(l).iter());
            }
        }
        out
    }

    fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.flat_len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.params.flat_len(), params.len())));
        }
        let mut it = params.iter();
        for c in self.params.coef.iter_mut() {
            for l in 1..c.nrows() {
                for j in 0..c.ncols() {
                    c[(l, j)] = *it.next().unwrap();
                }
            }
        }
        self.refresh_exp();
        Ok(())
    }

    fn factor_block(&self, k: usize) -> Vec<f64> {
        self.params
            .coef
            .iter()
            .flat_map(|c| (1..c.nrows()).map(move |l| c[(l, k + 1)]))
            .collect()
    }

    fn log_prior_factor(&self, k: usize) -> f64 {
        let g = self.params.gammas[k + 1];
        self.factor_block(k).iter().map(|&v| normal_ln_pdf(v, g)).sum()
    }

    fn predictive_mean(&self, z_row: &[bool]) -> Vec<f64> {
        (0..self.data.m).flat_map(|m| multinomial_probs(z_row, &self.params, m)).collect()
    }
}
