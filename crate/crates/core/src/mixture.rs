//! Finite Gaussian mixture densities `f(x) = Σ_g π_g φ(x | μ_g, Σ_g)`.
//!
//! Everything is evaluated from the per-component log terms
//! `ln π_g + ln φ_g(x)`, so densities, responsibilities and the
//! weighted-harmonic-mean covariance stay finite far away from all
//! components.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, CovarianceFactor, LN_2PI};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// `ln Σ exp(v)`, shifted by the maximum. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log terms in place into softmax weights; returns the log-sum.
pub(crate) fn softmax_in_place(values: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let lse = log_sum_exp(values);
        for v in values.iter_mut() {
            *v = (*v - lse).exp();
        }
        return lse;
    }
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
    max + total.ln()
}

/// One weighted normal component with its factorization and precision cached.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: CovarianceFactor,
    precision: DMatrix<f64>,
    precision_mean: DVector<f64>,
    /// `ln π − ½(d·ln 2π + ln|Σ|)`
    log_norm: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::InvalidMixture(format!(
                "component weight {weight} outside (0, 1]"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMixture("non-finite component mean".into()));
        }
        if covariance.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let factor = gaussian::factorize(&covariance)?;
        let precision = factor.inverse();
        let precision_mean = &precision * &mean;
        let d = mean.len() as f64;
        let log_norm = weight.ln() - 0.5 * (d * LN_2PI + factor.log_det());
        Ok(Self {
            weight,
            mean,
            covariance,
            factor,
            precision,
            precision_mean,
            log_norm,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn factor(&self) -> &CovarianceFactor {
        &self.factor
    }

    /// `Σ⁻¹`
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// `ln π_g + ln φ(x | μ_g, Σ_g)` for a raw coordinate slice. `scratch`
    /// must have length `d`.
    #[inline]
    pub(crate) fn log_term_slice(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        for ((s, xi), mi) in scratch.iter_mut().zip(x).zip(self.mean.iter()) {
            *s = xi - mi;
        }
        self.log_norm - 0.5 * self.factor.mahalanobis_sq_in_place(scratch)
    }
}

/// A Gaussian mixture density. Component order is preserved and is what
/// component cluster labels refer to.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureJson", into = "MixtureJson")]
pub struct GaussianMixture {
    dimension: usize,
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("mixture needs at least one component".into()))?;
        let dimension = first.dimension();
        if dimension == 0 {
            return Err(Error::InvalidMixture("zero-dimensional mixture".into()));
        }
        for c in &components {
            if c.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: c.dimension(),
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            dimension,
            components,
        })
    }

    /// Builds a mixture from parallel lists of weights, means and covariances.
    pub fn from_parts(
        weights: &[f64],
        means: &[DVector<f64>],
        covariances: &[DMatrix<f64>],
    ) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(Error::InvalidMixture(
                "weights, means and covariances differ in length".into(),
            ));
        }
        let components = weights
            .iter()
            .zip(means)
            .zip(covariances)
            .map(|((&w, m), s)| GaussianComponent::new(w, m.clone(), s.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(components)
    }

    /// A single normal `N(mean, covariance)`.
    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, covariance)?])
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Fills `out[g] = ln π_g + ln φ_g(x)`.
    pub(crate) fn log_terms_slice(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.log_term_slice(x, scratch);
        }
    }

    /// Per-component log terms `ln π_g + ln φ(x | μ_g, Σ_g)`.
    pub fn log_terms(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut scratch = vec![0.0; self.dimension];
        let mut out = vec![0.0; self.n_components()];
        self.log_terms_slice(x.as_slice(), &mut scratch, &mut out);
        Ok(out)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(log_sum_exp(&self.log_terms(x)?))
    }

    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        self.log_density(x).map(f64::exp)
    }

    /// Posterior component probabilities `w_g(x) = π_g φ_g(x) / f(x)`.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let mut terms = self.log_terms(x)?;
        softmax_in_place(&mut terms);
        Ok(terms)
    }

    /// `Df(x) = Σ_g π_g φ_g(x) Σ_g⁻¹ (μ_g − x)`, with `Σ_g⁻¹(μ_g − x)` from
    /// triangular solves.
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let terms = self.log_terms(x)?;
        let mut grad = DVector::zeros(self.dimension);
        for (c, t) in self.components.iter().zip(&terms) {
            let scaled = c.factor.solve(&(&c.mean - x))?;
            grad.axpy(t.exp(), &scaled, 1.0);
        }
        Ok(grad)
    }

    /// `Df(x)/f(x) = Σ_g w_g(x) Σ_g⁻¹ (μ_g − x)`; finite even where `f`
    /// underflows.
    pub fn log_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.responsibilities(x)?;
        let mut grad = DVector::zeros(self.dimension);
        for (c, wg) in self.components.iter().zip(&w) {
            if *wg == 0.0 {
                continue;
            }
            let scaled = c.factor.solve(&(&c.mean - x))?;
            grad.axpy(*wg, &scaled, 1.0);
        }
        Ok(grad)
    }

    /// Hessian of `f` divided by `f(x)`:
    /// `Σ_g w_g(x) [v_g v_gᵀ − Σ_g⁻¹]` with `v_g = Σ_g⁻¹(μ_g − x)`.
    pub fn scaled_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let w = self.responsibilities(x)?;
        let d = self.dimension;
        let mut h = DMatrix::zeros(d, d);
        for (c, wg) in self.components.iter().zip(&w) {
            let v = c.factor.solve(&(&c.mean - x))?;
            h += (&v * v.transpose() - &c.precision) * *wg;
        }
        Ok(h)
    }

    /// `Σ_g w_g Σ_g⁻¹` for the given weights.
    pub(crate) fn weighted_precision(&self, weights: &[f64]) -> DMatrix<f64> {
        let d = self.dimension;
        let mut p = DMatrix::zeros(d, d);
        for (c, w) in self.components.iter().zip(weights) {
            if *w != 0.0 {
                p += &c.precision * *w;
            }
        }
        p
    }

    /// `Σ_g w_g Σ_g⁻¹ μ_g` for the given weights.
    pub(crate) fn weighted_precision_mean(&self, weights: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(self.dimension);
        for (c, w) in self.components.iter().zip(weights) {
            if *w != 0.0 {
                b.axpy(*w, &c.precision_mean, 1.0);
            }
        }
        b
    }

    /// Weighted harmonic mean of the component covariances,
    /// `Σ̄(x) = {Σ_g w_g(x) Σ_g⁻¹}⁻¹`.
    pub fn harmonic_mean_covariance(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let w = self.responsibilities(x)?;
        let p = self.weighted_precision(&w);
        Ok(gaussian::factorize(&p)?.inverse())
    }

    /// Mixture mean `Σ π_g μ_g`.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dimension);
        for c in &self.components {
            m.axpy(c.weight, &c.mean, 1.0);
        }
        m
    }

    /// Total covariance `Σ π_g (Σ_g + μ_g μ_gᵀ) − μ̄ μ̄ᵀ`.
    pub fn total_covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let d = self.dimension;
        let mut cov = DMatrix::zeros(d, d);
        for c in &self.components {
            let dm = &c.mean - &mean;
            cov += (&c.covariance + &dm * dm.transpose()) * c.weight;
        }
        cov
    }

    /// Square root of the mean per-coordinate variance of the mixture.
    pub fn data_scale(&self) -> f64 {
        (self.total_covariance().trace() / self.dimension as f64).sqrt()
    }

    /// Draws `count` points; returns them with their 1-based component labels.
    pub fn sample(&self, count: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(count, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<(DMatrix<f64>, Vec<usize>)> {
        if count == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        let mut out = DMatrix::zeros(count, self.dimension);
        let mut labels = Vec::with_capacity(count);
        let mut z = vec![0.0; self.dimension];
        let last = self.components.len() - 1;
        for row in 0..count {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = last;
            for (g, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = g;
                    break;
                }
            }
            let c = &self.components[pick];
            gaussian::draw_into(&c.mean, &c.factor, rng, &mut z, &mut out, row);
            labels.push(pick + 1);
        }
        Ok((out, labels))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    weight: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

/// On-disk form: `{"dimension", "components": [{"weight", "mean", "covariance"}]}`,
/// covariance as row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct MixtureJson {
    dimension: usize,
    components: Vec<ComponentJson>,
}

impl From<GaussianMixture> for MixtureJson {
    fn from(m: GaussianMixture) -> Self {
        let components = m
            .components
            .iter()
            .map(|c| ComponentJson {
                weight: c.weight,
                mean: c.mean.iter().copied().collect(),
                covariance: c
                    .covariance
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
            })
            .collect();
        MixtureJson {
            dimension: m.dimension,
            components,
        }
    }
}

impl TryFrom<MixtureJson> for GaussianMixture {
    type Error = Error;

    fn try_from(j: MixtureJson) -> Result<Self> {
        let d = j.dimension;
        let mut components = Vec::with_capacity(j.components.len());
        for c in j.components {
            if c.mean.len() != d || c.covariance.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: c.mean.len(),
                });
            }
            if let Some(row) = c.covariance.iter().find(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            let cov = DMatrix::from_fn(d, d, |i, k| c.covariance[i][k]);
            components.push(GaussianComponent::new(
                c.weight,
                DVector::from_vec(c.mean),
                cov,
            )?);
        }
        let m = GaussianMixture::new(components)?;
        if m.dimension != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.dimension,
            });
        }
        Ok(m)
    }
}
