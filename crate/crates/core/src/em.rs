//! Maximum-likelihood fitting of full-covariance Gaussian mixtures by EM,
//! with BIC scoring and selection of the number of components.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, GaussianComponent, GaussianMixture};

/// Components whose effective point count falls below this are reinitialized.
const MIN_EFFECTIVE_POINTS: f64 = 10.0;
const LLOYD_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tol: f64,
    pub restarts: usize,
    /// Ridge added to every fitted covariance, relative to the mean
    /// per-coordinate variance of the data.
    pub covariance_floor: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rel_tol: 1e-8,
            restarts: 5,
            covariance_floor: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "max_iterations and restarts must be positive".into(),
            ));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::InvalidArgument("rel_tol must lie in (0, 1)".into()));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(Error::InvalidArgument(
                "covariance_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bookkeeping across all restarts of one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub restarts_completed: usize,
    pub restarts_abandoned: usize,
    pub reinitializations: usize,
    /// Largest drop `L(t) − L(t+1)` seen between consecutive EM iterations of
    /// any restart; 0 when the log-likelihood never decreased.
    pub max_loglik_decrease: f64,
    /// Candidate steps that would have lowered the log-likelihood; each one
    /// was discarded and its restart stopped at the previous iterate.
    #[serde(default)]
    pub rejected_steps: usize,
    /// Largest drop a rejected candidate step would have caused.
    #[serde(default)]
    pub max_rejected_decrease: f64,
    /// Log-likelihood after every E-step of the returned restart, counted
    /// from its last reinitialization.
    #[serde(default, skip_serializing)]
    pub loglik_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub mixture: GaussianMixture,
    pub log_likelihood: f64,
    pub bic: f64,
    pub n_params: usize,
    pub iterations_used: usize,
    pub converged: bool,
    pub n_points: usize,
    #[serde(default)]
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn n_components(&self) -> usize {
        self.mixture.n_components()
    }
}

/// Free parameters of a `g`-component full-covariance mixture in `d` dimensions.
pub fn n_params(g: usize, d: usize) -> usize {
    (g - 1) + g * d + g * d * (d + 1) / 2
}

/// `2·loglik − k·ln n`; larger is better.
pub fn bic(log_likelihood: f64, n_params: usize, n_points: usize) -> f64 {
    2.0 * log_likelihood - n_params as f64 * (n_points as f64).ln()
}

pub fn bic_score(fit: &FitResult) -> f64 {
    bic(fit.log_likelihood, fit.n_params, fit.n_points)
}

/// Log-likelihood of `data` (rows are observations) under `mixture`.
pub fn log_likelihood(mixture: &GaussianMixture, data: &DMatrix<f64>) -> Result<f64> {
    if data.ncols() != mixture.dimension() {
        return Err(Error::DimensionMismatch {
            expected: mixture.dimension(),
            found: data.ncols(),
        });
    }
    let rows = row_major(data);
    let d = data.ncols();
    let mut scratch = vec![0.0; d];
    let mut terms = vec![0.0; mixture.n_components()];
    Ok(rows
        .chunks_exact(d)
        .map(|x| {
            mixture.log_terms_slice(x, &mut scratch, &mut terms);
            log_sum_exp(&terms)
        })
        .sum())
}

fn row_major(data: &DMatrix<f64>) -> Vec<f64> {
    data.transpose().as_slice().to_vec()
}

/// Data moments shared by every restart.
struct Prepared {
    rows: Vec<f64>,
    n: usize,
    d: usize,
    /// Diagonal ridge added after every M-step.
    ridge: f64,
    pooled: DMatrix<f64>,
}

impl Prepared {
    fn new(data: &DMatrix<f64>, g: usize, config: &FitConfig) -> Result<Self> {
        let (n, d) = data.shape();
        if d == 0 {
            return Err(Error::InvalidArgument("data has no columns".into()));
        }
        if n <= g {
            return Err(Error::DegenerateData(format!(
                "{n} points cannot support {g} components"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("data has non-finite entries".into()));
        }
        let rows = row_major(data);
        let ones = vec![1.0; n];
        let (_, pooled) = weighted_moments(&rows, d, &ones, n as f64);
        let mean_var = pooled.trace() / d as f64;
        if !(mean_var > 0.0) {
            return Err(Error::DegenerateData("data has zero variance".into()));
        }
        Ok(Self {
            rows,
            n,
            d,
            ridge: config.covariance_floor * mean_var,
            pooled,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

/// Weighted mean and (divisor `total`) scatter of row-major `rows`.
fn weighted_moments(rows: &[f64], d: usize, w: &[f64], total: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(d);
    for (x, wi) in rows.chunks_exact(d).zip(w) {
        for k in 0..d {
            mean[k] += wi * x[k];
        }
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (x, wi) in rows.chunks_exact(d).zip(w) {
        if *wi == 0.0 {
            continue;
        }
        for k in 0..d {
            diff[k] = x[k] - mean[k];
        }
        for a in 0..d {
            let da = wi * diff[a];
            for b in 0..=a {
                cov[(a, b)] += da * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    cov /= total;
    (mean, cov)
}

struct RestartOutcome {
    mixture: GaussianMixture,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
    reinitializations: usize,
    max_decrease: f64,
    rejected_decrease: Option<f64>,
    trace: Vec<f64>,
}

/// Fits a `g`-component full-covariance mixture by EM, keeping the best of
/// `config.restarts` k-means-seeded runs.
pub fn em_fit(data: &DMatrix<f64>, g: usize, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if g == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    let prep = Prepared::new(data, g, config)?;
    // a single component has one fixed point, restarts would repeat it
    let restarts = if g == 1 { 1 } else { config.restarts };
    let outcomes: Vec<Result<RestartOutcome>> = (0..restarts)
        .into_par_iter()
        .map(|r| run_restart(&prep, g, config, derive_seed(config.seed, r as u64)))
        .collect();

    let mut diagnostics = FitDiagnostics::default();
    let mut best: Option<RestartOutcome> = None;
    let mut last_err = None;
    for outcome in outcomes {
        match outcome {
            Ok(o) => {
                diagnostics.restarts_completed += 1;
                diagnostics.reinitializations += o.reinitializations;
                diagnostics.max_loglik_decrease =
                    diagnostics.max_loglik_decrease.max(o.max_decrease);
                if let Some(drop) = o.rejected_decrease {
                    diagnostics.rejected_steps += 1;
                    diagnostics.max_rejected_decrease = diagnostics.max_rejected_decrease.max(drop);
                }
                if best
                    .as_ref()
                    .map_or(true, |b| o.log_likelihood > b.log_likelihood)
                {
                    best = Some(o);
                }
            }
            Err(e) => {
                diagnostics.restarts_abandoned += 1;
                last_err = Some(e);
            }
        }
    }
    let best = best.ok_or_else(|| match last_err {
        Some(Error::DegenerateData(m)) => Error::DegenerateData(m),
        Some(e) => Error::DegenerateData(format!("every restart failed: {e}")),
        None => Error::DegenerateData("no restarts ran".into()),
    })?;
    diagnostics.loglik_trace = best.trace;
    let k = n_params(g, prep.d);
    Ok(FitResult {
        mixture: sort_components(best.mixture)?,
        log_likelihood: best.log_likelihood,
        bic: bic(best.log_likelihood, k, prep.n),
        n_params: k,
        iterations_used: best.iterations,
        converged: best.converged,
        n_points: prep.n,
        diagnostics,
    })
}

/// Decreasing weight, ties by lexicographic mean.
fn sort_components(m: GaussianMixture) -> Result<GaussianMixture> {
    let mut comps = m.components().to_vec();
    comps.sort_by(|a, b| {
        b.weight().total_cmp(&a.weight()).then_with(|| {
            a.mean()
                .iter()
                .zip(b.mean().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    GaussianMixture::new(comps)
}

/// Farthest-point seeding from a random first center, refined by a few
/// Lloyd passes; returns hard assignments.
fn kmeans_assign(prep: &Prepared, g: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (n, d) = (prep.n, prep.d);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let first = rng.gen_range(0..n);
    let mut centers: Vec<f64> = prep.row(first).to_vec();
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(prep.row(i), prep.row(first))).collect();
    for _ in 1..g {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        let c = prep.row(far).to_vec();
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq(prep.row(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut labels = vec![0usize; n];
    for pass in 0..=LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let x = prep.row(i);
            let mut best = (0, f64::INFINITY);
            for k in 0..g {
                let dist = sq(x, &centers[k * d..(k + 1) * d]);
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            if *label != best.0 {
                changed = true;
                *label = best.0;
            }
        }
        if pass > 0 && !changed || pass == LLOYD_ITERATIONS {
            break;
        }
        let mut sums = vec![0.0; g * d];
        let mut counts = vec![0usize; g];
        for (i, &k) in labels.iter().enumerate() {
            counts[k] += 1;
            for (s, x) in sums[k * d..(k + 1) * d].iter_mut().zip(prep.row(i)) {
                *s += x;
            }
        }
        for k in 0..g {
            if counts[k] > 0 {
                for j in 0..d {
                    centers[k * d + j] = sums[k * d + j] / counts[k] as f64;
                }
            }
        }
    }
    labels
}

fn initial_mixture(prep: &Prepared, g: usize, rng: &mut ChaCha8Rng) -> Result<GaussianMixture> {
    let labels = kmeans_assign(prep, g, rng);
    let mut counts = vec![0.0_f64; g];
    for &k in &labels {
        counts[k] += 1.0;
    }
    // empty clusters keep a token share so every component starts valid
    let shares: Vec<f64> = counts.iter().map(|&c| c.max(1.0)).collect();
    let total: f64 = shares.iter().sum();
    let weights = normalized(&shares, total);
    let mut comps = Vec::with_capacity(g);
    for k in 0..g {
        let w: Vec<f64> = labels
            .iter()
            .map(|&l| if l == k { 1.0 } else { 0.0 })
            .collect();
        let (mean, cov) = if counts[k] > prep.d as f64 {
            weighted_moments(&prep.rows, prep.d, &w, counts[k])
        } else if counts[k] > 0.0 {
            let (mean, _) = weighted_moments(&prep.rows, prep.d, &w, counts[k]);
            (mean, prep.pooled.clone())
        } else {
            (
                DVector::from_row_slice(prep.row(k % prep.n)),
                prep.pooled.clone(),
            )
        };
        comps.push(GaussianComponent::new(
            weights[k],
            mean,
            ridged(cov, prep.ridge),
        )?);
    }
    GaussianMixture::new(comps)
}

fn ridged(mut cov: DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    for i in 0..cov.nrows() {
        cov[(i, i)] += ridge;
    }
    cov
}

/// `v / total`, with the last entry absorbing rounding so the sum is 1.
fn normalized(v: &[f64], total: f64) -> Vec<f64> {
    let mut w: Vec<f64> = v.iter().map(|x| x / total).collect();
    let last = w.len() - 1;
    let rest: f64 = w[..last].iter().sum();
    if (1.0 - rest) > 0.0 {
        w[last] = 1.0 - rest;
    }
    w
}

/// One E-step: fills `resp` (n × g, row-major) and returns the
/// log-likelihood together with the index of the lowest-density point.
fn e_step(prep: &Prepared, mixture: &GaussianMixture, resp: &mut [f64]) -> (f64, usize) {
    let g = mixture.n_components();
    let mut scratch = vec![0.0; prep.d];
    let mut total = 0.0;
    let mut lowest = (0, f64::INFINITY);
    for (i, r) in resp.chunks_exact_mut(g).enumerate() {
        mixture.log_terms_slice(prep.row(i), &mut scratch, r);
        let lse = crate::mixture::softmax_in_place(r);
        total += lse;
        if lse < lowest.1 {
            lowest = (i, lse);
        }
    }
    (total, lowest.0)
}

fn run_restart(prep: &Prepared, g: usize, config: &FitConfig, seed: u64) -> Result<RestartOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixture = initial_mixture(prep, g, &mut rng)?;
    let mut resp = vec![0.0; prep.n * g];
    let mut trace = Vec::new();
    let mut prev: Option<(f64, GaussianMixture)> = None;
    let mut max_decrease = 0.0_f64;
    let mut rejected_decrease = None;
    let mut reinitializations = 0;
    let mut converged = false;
    let mut iterations = 0;

    let mut loglik;
    loop {
        let (ll, lowest) = e_step(prep, &mixture, &mut resp);
        loglik = ll;
        if !loglik.is_finite() {
            return Err(Error::DegenerateData(
                "log-likelihood became non-finite".into(),
            ));
        }
        if let Some((p, previous)) = prev.take() {
            // the ridge keeps the M-step slightly off the exact maximizer, so
            // at the fixed point a step can go downhill by a rounding-sized amount
            if loglik < p {
                rejected_decrease = Some(p - loglik);
                mixture = previous;
                loglik = p;
                converged = true;
                break;
            }
            trace.push(loglik);
            max_decrease = max_decrease.max(p - loglik);
            if loglik - p < config.rel_tol * loglik.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(loglik);
        }
        if iterations == config.max_iterations {
            break;
        }
        iterations += 1;
        match m_step(prep, g, &resp, lowest)? {
            MStep::Updated(next) => {
                prev = Some((loglik, std::mem::replace(&mut mixture, next)));
            }
            MStep::Reinitialized(next) => {
                reinitializations += 1;
                if reinitializations > 1 {
                    return Err(Error::DegenerateData(
                        "component collapsed twice in one restart".into(),
                    ));
                }
                mixture = next;
                // a fresh start: ascent is only guaranteed from here on
                prev = None;
                trace.clear();
            }
        }
    }
    Ok(RestartOutcome {
        mixture,
        log_likelihood: loglik,
        iterations,
        converged,
        reinitializations,
        max_decrease,
        rejected_decrease,
        trace,
    })
}

enum MStep {
    Updated(GaussianMixture),
    Reinitialized(GaussianMixture),
}

fn m_step(prep: &Prepared, g: usize, resp: &[f64], lowest: usize) -> Result<MStep> {
    let d = prep.d;
    let mut counts = vec![0.0; g];
    for r in resp.chunks_exact(g) {
        for (c, v) in counts.iter_mut().zip(r) {
            *c += v;
        }
    }
    let collapsed: Vec<usize> = (0..g)
        .filter(|&k| counts[k] < MIN_EFFECTIVE_POINTS)
        .collect();

    let mut means = Vec::with_capacity(g);
    let mut covs = Vec::with_capacity(g);
    let mut column = vec![0.0; prep.n];
    for k in 0..g {
        if collapsed.contains(&k) {
            means.push(DVector::from_row_slice(prep.row(lowest)));
            covs.push(prep.pooled.clone());
            continue;
        }
        for (c, r) in column.iter_mut().zip(resp.chunks_exact(g)) {
            *c = r[k];
        }
        let (mean, cov) = weighted_moments(&prep.rows, d, &column, counts[k]);
        means.push(mean);
        covs.push(cov);
    }
    let shares: Vec<f64> = if collapsed.is_empty() {
        counts.clone()
    } else {
        let fresh = prep.n as f64 / g as f64;
        (0..g)
            .map(|k| {
                if collapsed.contains(&k) {
                    fresh
                } else {
                    counts[k]
                }
            })
            .collect()
    };
    let total: f64 = shares.iter().sum();
    let weights = normalized(&shares, total);
    let comps = (0..g)
        .map(|k| {
            GaussianComponent::new(
                weights[k],
                means[k].clone(),
                ridged(covs[k].clone(), prep.ridge),
            )
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::DegenerateData(format!("covariance collapsed: {e}")))?;
    let mixture = GaussianMixture::new(comps)?;
    Ok(if collapsed.is_empty() {
        MStep::Updated(mixture)
    } else {
        MStep::Reinitialized(mixture)
    })
}

/// Per-G outcome retained by [`select_model`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelScore {
    pub g: usize,
    pub n_params: usize,
    pub log_likelihood: Option<f64>,
    pub bic: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ModelSelection {
    pub best: FitResult,
    pub scores: Vec<ModelScore>,
    /// Every successful fit, in increasing `g`.
    pub fits: Vec<FitResult>,
}

/// Fits every `g` in the range and keeps the largest BIC, ties toward the
/// smaller `g`. Each `g` gets its own seed derived from `config.seed`.
pub fn select_model(
    data: &DMatrix<f64>,
    g_range: RangeInclusive<usize>,
    config: &FitConfig,
) -> Result<ModelSelection> {
    config.validate()?;
    let (lo, hi) = (*g_range.start(), *g_range.end());
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "invalid component range {lo}..={hi}"
        )));
    }
    if hi >= data.nrows() {
        return Err(Error::InvalidArgument(format!(
            "largest G ({hi}) must be below the number of points ({})",
            data.nrows()
        )));
    }
    let d = data.ncols();
    let results: Vec<(usize, Result<FitResult>)> = (lo..=hi)
        .into_par_iter()
        .map(|g| {
            let cfg = FitConfig {
                seed: derive_seed(config.seed, g as u64),
                ..*config
            };
            (g, em_fit(data, g, &cfg))
        })
        .collect();

    let mut scores = Vec::with_capacity(results.len());
    let mut fits = Vec::new();
    let mut last_err = None;
    for (g, r) in results {
        match r {
            Ok(fit) => {
                scores.push(ModelScore {
                    g,
                    n_params: fit.n_params,
                    log_likelihood: Some(fit.log_likelihood),
                    bic: Some(fit.bic),
                    converged: Some(fit.converged),
                    iterations: Some(fit.iterations_used),
                    error: None,
                });
                fits.push(fit);
            }
            Err(e) => {
                scores.push(ModelScore {
                    g,
                    n_params: n_params(g, d),
                    log_likelihood: None,
                    bic: None,
                    converged: None,
                    iterations: None,
                    error: Some(e.to_string()),
                });
                last_err = Some(e);
            }
        }
    }
    let best = fits
        .iter()
        .fold(None::<&FitResult>, |acc, f| match acc {
            Some(b) if b.bic >= f.bic => Some(b),
            _ => Some(f),
        })
        .cloned();
    match best {
        Some(best) => Ok(ModelSelection { best, scores, fits }),
        None => Err(last_err.unwrap_or_else(|| Error::DegenerateData("no fits".into()))),
    }
}
